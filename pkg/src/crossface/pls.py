"""Two-block partial least squares fitted by NIPALS deflation.

Used as the latent-space matching baseline: paired descriptor matrices X
(source) and Y (target) are centered, then p latent components are extracted
greedily. Per component the weight vector w maximizing the X/Y covariance is
found by the NIPALS inner iteration, scores t = Ew and u = Fq are computed,
and both residual blocks are deflated by their rank-one approximations.

Projection of new vectors to the latent space uses the closed forms

    scores_x(v) = (v - x_mean) W (P^T W)^-1
    scores_y(v) = (v - y_mean) W_y (Q^T W_y)^-1

which reproduce the training score matrices T and U exactly. The regression
operators B_v (source -> target) and B_t (target -> source) use the standard
m x m form built from regression loadings on the undeflated counterpart
block; a weight-only m x p form is available behind a flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import container
from .errors import InvalidInputError, InvalidParameterError, NumericalFailureError

_TINY = 1e-14


@dataclass
class PlsModel:
    p: int
    W_pls: np.ndarray    # (m, p) X-side weights, unit columns
    P_load: np.ndarray   # (m, p) X loadings
    W_y: np.ndarray      # (m, p) Y-side weights, unit columns
    Q_load: np.ndarray   # (m, p) Y loadings
    B_v: np.ndarray      # source -> target regression operator
    B_t: np.ndarray      # target -> source regression operator
    x_mean: np.ndarray
    y_mean: np.ndarray
    weight_only: bool = False

    @property
    def dim(self) -> int:
        return self.x_mean.shape[0]

    def projector(self, side: str) -> np.ndarray:
        """(m, p) matrix taking a centered vector to its latent scores."""
        if side == "source":
            return _score_operator(self.W_pls, self.P_load)
        if side == "target":
            return _score_operator(self.W_y, self.Q_load)
        raise InvalidInputError(f"side must be 'source' or 'target', got {side!r}")

    def save(self, path) -> None:
        arrays = {
            "W_pls": self.W_pls,
            "P_load": self.P_load,
            "W_y": self.W_y,
            "Q_load": self.Q_load,
            "B_v": self.B_v,
            "B_t": self.B_t,
            "x_mean": self.x_mean,
            "y_mean": self.y_mean,
        }
        container.write_container(
            path, "pls-model", arrays, {"p": self.p, "weight_only": self.weight_only}
        )

    @classmethod
    def load(cls, path) -> "PlsModel":
        _, a, meta = container.read_container(path, expect_kind="pls-model")
        return cls(
            meta["p"], a["W_pls"], a["P_load"], a["W_y"], a["Q_load"],
            a["B_v"], a["B_t"], a["x_mean"], a["y_mean"],
            weight_only=meta["weight_only"],
        )


def _score_operator(weights: np.ndarray, loadings: np.ndarray) -> np.ndarray:
    try:
        return weights @ np.linalg.inv(loadings.T @ weights)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailureError(f"loading/weight system is singular: {exc}") from exc


def pls_fit(
    x: np.ndarray,
    y: np.ndarray,
    p: int,
    *,
    max_iter: int = 500,
    tol: float = 1e-10,
    weight_only_regression: bool = False,
) -> PlsModel:
    """NIPALS extraction of p latent components from row-paired X and Y."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise InvalidInputError(f"X and Y must be row-paired 2-D arrays, got {x.shape}, {y.shape}")
    n, m = x.shape
    if y.shape[1] != m:
        raise InvalidInputError("X and Y must have the same number of columns")
    if not (0 < p <= m):
        raise InvalidParameterError(f"p must be in [1, {m}], got {p}")
    if n <= p:
        raise InvalidParameterError(f"need more than p={p} rows, got {n}")

    x_mean = x.mean(axis=0)
    y_mean = y.mean(axis=0)
    e = x - x_mean
    f = y - y_mean
    yc = f.copy()
    xc = e.copy()

    w_cols, p_cols, wy_cols, q_cols = [], [], [], []
    t_cols, u_cols = [], []
    scale = max(np.linalg.norm(e), 1.0)

    for comp in range(p):
        # deterministic start: Y column with the largest residual energy
        u = f[:, int(np.argmax(np.sum(f * f, axis=0)))].copy()
        if np.linalg.norm(u) < _TINY * scale:
            raise NumericalFailureError(
                f"Y residual vanished after {comp} components", components_achieved=comp
            )
        w = np.zeros(m)
        for _ in range(max_iter):
            w_new = e.T @ u
            nw = np.linalg.norm(w_new)
            if nw < _TINY * scale:
                raise NumericalFailureError(
                    f"X residual is rank deficient after {comp} components",
                    components_achieved=comp,
                )
            w_new /= nw
            t = e @ w_new
            fq = f.T @ t
            nq = np.linalg.norm(fq)
            if nq < _TINY * scale:
                raise NumericalFailureError(
                    f"X/Y covariance vanished after {comp} components",
                    components_achieved=comp,
                )
            q_hat = fq / nq
            u = f @ q_hat
            if np.linalg.norm(w_new - w) < tol:
                w = w_new
                break
            w = w_new
        t = e @ w
        tt = float(t @ t)
        uu = float(u @ u)
        if tt < _TINY or uu < _TINY:
            raise NumericalFailureError(
                f"score norm vanished after {comp} components", components_achieved=comp
            )
        p_vec = e.T @ t / tt
        q_vec = f.T @ u / uu
        e = e - np.outer(t, p_vec)
        f = f - np.outer(u, q_vec)
        w_cols.append(w)
        p_cols.append(p_vec)
        wy_cols.append(q_hat)
        q_cols.append(q_vec)
        t_cols.append(t)
        u_cols.append(u)

    w_mat = np.column_stack(w_cols)
    p_mat = np.column_stack(p_cols)
    wy_mat = np.column_stack(wy_cols)
    q_mat = np.column_stack(q_cols)
    t_mat = np.column_stack(t_cols)
    u_mat = np.column_stack(u_cols)

    if weight_only_regression:
        b_v = _score_operator(w_mat, p_mat)          # m x p, weight-only form
        b_t = _score_operator(w_mat, q_mat)
    else:
        r_x = _score_operator(w_mat, p_mat)
        r_y = _score_operator(wy_mat, q_mat)
        # regression loadings against the undeflated counterpart block; with
        # p = rank this reduces to the least-squares solution
        q_reg = yc.T @ t_mat / np.sum(t_mat * t_mat, axis=0)  # T columns orthogonal
        try:
            p_reg = xc.T @ u_mat @ np.linalg.inv(u_mat.T @ u_mat)
        except np.linalg.LinAlgError as exc:
            raise NumericalFailureError(f"U score system singular: {exc}", components_achieved=p) from exc
        b_v = r_x @ q_reg.T
        b_t = r_y @ p_reg.T

    return PlsModel(
        p, w_mat, p_mat, wy_mat, q_mat, b_v, b_t, x_mean, y_mean,
        weight_only=weight_only_regression,
    )


def pls_project(model: PlsModel, v: np.ndarray, side: str) -> np.ndarray:
    """Latent scores of one m-vector or an (n, m) batch from the given side."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != model.dim:
        raise InvalidInputError(f"expected dim {model.dim}, got {v.shape[-1]}")
    mean = model.x_mean if side == "source" else model.y_mean if side == "target" else None
    if mean is None:
        raise InvalidInputError(f"side must be 'source' or 'target', got {side!r}")
    return (v - mean) @ model.projector(side)


def pls_predict(model: PlsModel, v: np.ndarray, direction: str = "source_to_target") -> np.ndarray:
    """Regression prediction through B_v or B_t (standard form only)."""
    if model.weight_only:
        raise InvalidInputError("regression prediction requires the full (loading-completed) form")
    v = np.asarray(v, dtype=np.float64)
    if direction == "source_to_target":
        return (v - model.x_mean) @ model.B_v + model.y_mean
    if direction == "target_to_source":
        return (v - model.y_mean) @ model.B_t + model.x_mean
    raise InvalidInputError(f"unknown direction {direction!r}")
