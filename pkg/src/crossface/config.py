"""Run configuration: one human-editable key=value document per run.

Flags override file values; unknown keys are rejected so typos fail fast.
Keys map 1:1 onto the benchmark dataclasses (synthetic data, extraction,
training, protocol); see configs/benchmark.cfg for the annotated default.
"""

from __future__ import annotations

from pathlib import Path

from .errors import UsageError
from .workflow import BenchmarkConfig

_SYNTH_KEYS = {
    "n_subjects": int,
    "images_per_subject": int,
    "width": int,
    "height": int,
    "identity_seed": int,
    "tone_curve": str,
    "tone_exponent": float,
    "tone_center": float,
    "blur_sigma": float,
    "downsample_factor": int,
    "noise_sigma": float,
    "brightness_jitter": float,
    "contrast_jitter": float,
    "translation_range": float,
    "n_blobs": int,
}

_EXTRACT_KEYS = {
    "block": int,
    "stride": int,
    "scales": "floats",
    "pca_dims": int,
    "median_radius": int,
    "dog_sigma_inner": float,
    "dog_sigma_outer": float,
}

_TRAIN_KEYS = {
    "reg_lambda": float,
    "learning_rate": float,
    "batch_size": int,
    "epochs": int,
    "seed": int,
    "shuffle": bool,
    "holdout_fraction": float,
    "plateau_threshold": float,
    "plateau_patience": int,
    "halve_lr_on_plateau": bool,
    "standardize_dims": int,
    "include_output_penalty": bool,
}

_BENCH_KEYS = {
    "n_train_subjects": int,
    "pair_mode": str,
    "pair_pool_size": int,
    "pair_seed": int,
    "deep_hidden": "ints",
    "shallow_hidden": "ints",
    "pls_components": int,
    "gallery_spec": str,
    "fusion": str,
}

ALL_KEYS = {**_SYNTH_KEYS, **_EXTRACT_KEYS, **_TRAIN_KEYS, **_BENCH_KEYS}


def _coerce(key: str, value: str, kind):
    try:
        if kind is bool:
            lowered = value.strip().lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if kind == "floats":
            return tuple(float(v) for v in value.split(",") if v.strip())
        if kind == "ints":
            return tuple(int(v) for v in value.split(",") if v.strip())
        return kind(value)
    except ValueError as exc:
        raise UsageError(f"config key {key!r}: cannot parse {value!r}") from exc


def load_config_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in ALL_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = value.strip()
    return values


def resolve(file_values: dict[str, str], overrides: dict[str, str]) -> dict[str, object]:
    """Merge file values with CLI overrides (overrides win) and type them."""
    merged = dict(file_values)
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in ALL_KEYS:
            raise UsageError(f"unknown config key {key!r}")
        merged[key] = str(value)
    return {key: _coerce(key, value, ALL_KEYS[key]) for key, value in merged.items()}


def _subset(values: dict, keys) -> dict:
    return {k: values[k] for k in keys if k in values}


def benchmark_config(values: dict[str, object]) -> BenchmarkConfig:
    """Overlay resolved config values onto the frozen benchmark defaults."""
    from dataclasses import replace

    base = BenchmarkConfig()
    synth = replace(base.synth, **_subset(values, _SYNTH_KEYS))
    pre_keys = ("median_radius", "dog_sigma_inner", "dog_sigma_outer")
    preprocess = replace(base.extract.preprocess, **_subset(values, pre_keys))
    extract = replace(
        base.extract,
        **_subset(values, ("block", "stride", "scales", "pca_dims")),
        preprocess=preprocess,
    )
    train = replace(base.train, **_subset(values, _TRAIN_KEYS))
    return replace(base, synth=synth, extract=extract, train=train, **_subset(values, _BENCH_KEYS))
