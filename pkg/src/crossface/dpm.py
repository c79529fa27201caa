"""Feed-forward mapping network between modality descriptor spaces.

The network regresses source-modality descriptor vectors onto the
corresponding target-modality vectors: N tanh hidden layers followed by a
bias-free linear output layer of the same dimensionality as the input.
Training minimizes

    J = (1/M) sum_i ||net(x_i) - t_i||^2
        + (lambda/N) sum_{k=1..N} (||W_k||_F^2 + ||b_k||^2)

by plain minibatch SGD. The regularizer covers hidden layers only; a switch
exists to include the output layer for sensitivity studies.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import container
from .errors import InvalidInputError, InvalidParameterError
from .features import DescriptorSet, MAPPED_SOURCE, SOURCE


@dataclass
class DpmModel:
    """Layer weights/biases of the learned mapping.

    weights[k] has shape (m_k, m_{k-1}); hidden layers carry biases, the
    linear output layer does not. ``input_mean``/``input_scale`` hold the
    training-time standardization of the input dims (identity when disabled).
    """

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"
    input_mean: np.ndarray | None = None
    input_scale: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 3:
            raise InvalidParameterError("need at least one hidden layer")
        if dims[0] != dims[-1]:
            raise InvalidParameterError("input and output dims must match")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 2:
            raise InvalidInputError("weight/bias counts do not match layer_dims")
        if self.activation != "tanh":
            raise InvalidParameterError(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "layer_dims", dims)

    @property
    def n_hidden(self) -> int:
        return len(self.layer_dims) - 2

    @property
    def dim(self) -> int:
        return self.layer_dims[0]

    def standardize(self, x: np.ndarray) -> np.ndarray:
        if self.input_mean is None:
            return x
        return (x - self.input_mean) / self.input_scale

    def save(self, path) -> None:
        arrays = {f"weights/{k}": w for k, w in enumerate(self.weights)}
        arrays.update({f"biases/{k}": b for k, b in enumerate(self.biases)})
        if self.input_mean is not None:
            arrays["input_mean"] = self.input_mean
            arrays["input_scale"] = self.input_scale
        meta = dict(self.meta)
        meta.update({"layer_dims": list(self.layer_dims), "activation": self.activation})
        container.write_container(path, "dpm-model", arrays, meta)

    @classmethod
    def load(cls, path) -> "DpmModel":
        _, arrays, meta = container.read_container(path, expect_kind="dpm-model")
        dims = tuple(meta["layer_dims"])
        weights = [arrays[f"weights/{k}"] for k in range(len(dims) - 1)]
        biases = [arrays[f"biases/{k}"] for k in range(len(dims) - 2)]
        extra = {k: v for k, v in meta.items() if k not in ("layer_dims", "activation")}
        return cls(
            dims,
            weights,
            biases,
            activation=meta["activation"],
            input_mean=arrays.get("input_mean"),
            input_scale=arrays.get("input_scale"),
            meta=extra,
        )


@dataclass
class TrainConfig:
    """SGD hyperparameters; everything randomized is driven by ``seed``."""

    reg_lambda: float = 1e-4
    learning_rate: float = 0.01
    batch_size: int = 128
    epochs: int = 30
    seed: int = 0
    shuffle: bool = True
    holdout_fraction: float = 0.05
    plateau_threshold: float = 1e-3  # relative improvement below this counts as a plateau
    plateau_patience: int = 3        # consecutive held-out plateaus before early stop
    halve_lr_on_plateau: bool = True
    standardize_dims: int | None = None  # leading input dims to standardize, None = off
    include_output_penalty: bool = False

    def validate(self) -> None:
        if self.reg_lambda < 0:
            raise InvalidParameterError("reg_lambda must be >= 0")
        if self.learning_rate <= 0:
            raise InvalidParameterError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise InvalidParameterError("batch_size must be >= 1")
        if self.epochs < 1:
            raise InvalidParameterError("epochs must be >= 1")
        if not (0.0 <= self.holdout_fraction < 1.0):
            raise InvalidParameterError("holdout_fraction must be in [0, 1)")


@dataclass(frozen=True)
class TrainPair:
    """One aligned descriptor pair: same block position, same identity."""

    x: np.ndarray
    t: np.ndarray


@dataclass
class TrainLog:
    epoch_loss: list[float] = field(default_factory=list)
    holdout_loss: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)
    stopped_epoch: int | None = None


def glorot_init(layer_dims: Sequence[int], seed) -> DpmModel:
    """Uniform init on [-sqrt(6)/sqrt(fan_in+fan_out), +...]; biases start at 0."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dims = [int(d) for d in layer_dims]
    weights = []
    for k in range(1, len(dims)):
        bound = np.sqrt(6.0) / np.sqrt(dims[k] + dims[k - 1])
        weights.append(rng.uniform(-bound, bound, size=(dims[k], dims[k - 1])))
    biases = [np.zeros(dims[k]) for k in range(1, len(dims) - 1)]
    return DpmModel(tuple(dims), weights, biases)


def forward(model: DpmModel, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Evaluate the network; returns (output, hidden_states incl. the input).

    Accepts a single (d,) vector or an (M, d) batch.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.shape[1] != model.dim:
        raise InvalidInputError(f"expected input dim {model.dim}, got {batch.shape[1]}")
    states = [batch]
    h = batch
    for w, b in zip(model.weights[:-1], model.biases):
        h = np.tanh(h @ w.T + b)
        states.append(h)
    out = h @ model.weights[-1].T  # linear output layer, no bias
    if single:
        return out[0], [s[0] for s in states]
    return out, states


def _penalty(model: DpmModel, reg_lambda: float, include_output: bool) -> float:
    n = model.n_hidden
    total = 0.0
    for w, b in zip(model.weights[:-1], model.biases):
        total += np.sum(w * w) + np.sum(b * b)
    if include_output:
        total += np.sum(model.weights[-1] ** 2)
    return reg_lambda / n * total


def loss(model: DpmModel, x: np.ndarray, t: np.ndarray, reg_lambda: float = 0.0, *, include_output_penalty: bool = False) -> float:
    """Mean squared residual over the batch plus the scaled weight penalty."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    if x.shape[0] == 0:
        raise InvalidInputError("batch must be non-empty")
    if x.shape != t.shape:
        raise InvalidInputError(f"input/target shapes differ: {x.shape} vs {t.shape}")
    out, _ = forward(model, x)
    data = np.sum((out - t) ** 2) / x.shape[0]
    return float(data + _penalty(model, reg_lambda, include_output_penalty))


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


def gradient(model: DpmModel, x: np.ndarray, t: np.ndarray, reg_lambda: float = 0.0, *, include_output_penalty: bool = False) -> Gradients:
    """Analytic dJ/dW, dJ/db by backpropagation (tanh' = 1 - h^2)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    if x.shape[0] == 0:
        raise InvalidInputError("batch must be non-empty")
    if x.shape != t.shape:
        raise InvalidInputError(f"input/target shapes differ: {x.shape} vs {t.shape}")
    out, states = forward(model, x)
    return _backward(model, states, out - t, reg_lambda, include_output_penalty)


def _backward(model: DpmModel, states: list[np.ndarray], resid: np.ndarray, reg_lambda: float, include_output_penalty: bool) -> Gradients:
    """Backprop reusing forward states; resid = out - t for the minibatch."""
    m = resid.shape[0]
    n = model.n_hidden
    g_weights: list[np.ndarray] = [None] * len(model.weights)
    g_biases: list[np.ndarray] = [None] * len(model.biases)
    delta = 2.0 * resid / m  # residual passes the linear output layer unchanged
    g_weights[-1] = delta.T @ states[-1]
    if include_output_penalty:
        g_weights[-1] = g_weights[-1] + (2.0 * reg_lambda / n) * model.weights[-1]
    back = delta @ model.weights[-1]
    for k in range(n, 0, -1):
        dz = back * (1.0 - states[k] ** 2)
        g_weights[k - 1] = dz.T @ states[k - 1] + (2.0 * reg_lambda / n) * model.weights[k - 1]
        g_biases[k - 1] = dz.sum(axis=0) + (2.0 * reg_lambda / n) * model.biases[k - 1]
        if k > 1:
            back = dz @ model.weights[k - 1]
    return Gradients(g_weights, g_biases)


def _standardization(x: np.ndarray, dims: int | None) -> tuple[np.ndarray, np.ndarray]:
    d = x.shape[1]
    mean = np.zeros(d)
    scale = np.ones(d)
    if dims:
        dims = min(dims, d)
        mean[:dims] = x[:, :dims].mean(axis=0)
        std = x[:, :dims].std(axis=0)
        scale[:dims] = np.where(std > 1e-12, std, 1.0)
    return mean, scale


def train(
    x: np.ndarray,
    t: np.ndarray,
    config: TrainConfig,
    layer_dims: Sequence[int],
) -> tuple[DpmModel, TrainLog]:
    """Minibatch SGD over aligned pairs; deterministic given config.seed.

    The learning rate is halved when the epoch-mean training loss stops
    improving, and training stops early once the held-out loss has plateaued
    for ``plateau_patience`` consecutive epochs.
    """
    config.validate()
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if x.ndim != 2 or x.shape != t.shape:
        raise InvalidInputError(f"pair arrays must be equal-shaped 2-D, got {x.shape} vs {t.shape}")
    if x.shape[0] < config.batch_size:
        raise InvalidParameterError(
            f"need at least batch_size={config.batch_size} pairs, got {x.shape[0]}"
        )

    seed_seq = np.random.SeedSequence(config.seed)
    init_seed, split_seed, shuffle_seed = seed_seq.spawn(3)
    model = glorot_init(layer_dims, np.random.default_rng(init_seed))
    mean, scale = _standardization(x, config.standardize_dims)
    model.input_mean = mean
    model.input_scale = scale
    xs = (x - mean) / scale

    n_hold = int(round(config.holdout_fraction * xs.shape[0]))
    if n_hold > 0 and xs.shape[0] - n_hold >= config.batch_size:
        perm = np.random.default_rng(split_seed).permutation(xs.shape[0])
        hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
        x_hold, t_hold = xs[hold_idx], t[hold_idx]
        x_tr, t_tr = xs[train_idx], t[train_idx]
    else:
        x_hold = t_hold = None
        x_tr, t_tr = xs, t

    shuffle_rng = np.random.default_rng(shuffle_seed)
    lr = config.learning_rate
    log = TrainLog()
    prev_train = np.inf
    best_hold = np.inf
    plateaus = 0
    m_total = x_tr.shape[0]

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(m_total) if config.shuffle else np.arange(m_total)
        sq_sum = 0.0
        for start in range(0, m_total, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, tb = x_tr[idx], t_tr[idx]
            out, states = forward(model, xb)
            resid = out - tb
            sq_sum += float(np.sum(resid * resid))
            grads = _backward(model, states, resid, config.reg_lambda, config.include_output_penalty)
            for w, gw in zip(model.weights, grads.weights):
                w -= lr * gw
            for b, gb in zip(model.biases, grads.biases):
                b -= lr * gb
        epoch_loss = sq_sum / m_total + _penalty(model, config.reg_lambda, config.include_output_penalty)
        log.epoch_loss.append(epoch_loss)
        log.learning_rates.append(lr)

        if config.halve_lr_on_plateau and prev_train - epoch_loss < config.plateau_threshold * abs(prev_train):
            lr *= 0.5
        prev_train = epoch_loss

        if x_hold is not None:
            out_h, _ = forward(model, x_hold)
            hold = float(np.sum((out_h - t_hold) ** 2) / x_hold.shape[0])
            log.holdout_loss.append(hold)
            if best_hold - hold < config.plateau_threshold * abs(best_hold):
                plateaus += 1
            else:
                plateaus = 0
            best_hold = min(best_hold, hold)
            if plateaus >= config.plateau_patience:
                log.stopped_epoch = epoch
                break

    model.meta["train_config"] = {
        "reg_lambda": config.reg_lambda,
        "learning_rate": config.learning_rate,
        "batch_size": config.batch_size,
        "epochs": config.epochs,
        "seed": config.seed,
        "shuffle": config.shuffle,
        "holdout_fraction": config.holdout_fraction,
        "standardize_dims": config.standardize_dims,
        "include_output_penalty": config.include_output_penalty,
    }
    return model, log


def map_descriptor_set(model: DpmModel, dset: DescriptorSet) -> DescriptorSet:
    """Replace every descriptor with its mapped value; order is preserved."""
    if dset.modality != SOURCE:
        raise InvalidInputError(
            f"mapping applies to {SOURCE!r} descriptor sets, got {dset.modality!r}"
        )
    if dset.dim != model.dim:
        raise InvalidInputError(f"model dim {model.dim} != descriptor dim {dset.dim}")
    out, _ = forward(model, model.standardize(dset.values))
    return replace(dset, modality=MAPPED_SOURCE, values=out)
