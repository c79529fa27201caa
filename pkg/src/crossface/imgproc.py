"""Shared image preprocessing for both modalities.

The preprocessing chain applied before descriptor extraction is
median filter -> zero-mean normalization -> difference-of-Gaussians.
All operations are pure, shape-preserving and deterministic; borders are
handled by clamped replication throughout so no artificial zero intensities
are introduced at the crop boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidInputError, InvalidParameterError


@dataclass(frozen=True)
class GrayImage:
    """Single-channel intensity raster with real-valued pixels.

    ``data`` is a read-only (height, width) float64 array in row-major order.
    ``bit_depth_origin`` records the source quantization (8 or 16) and is
    informational only; pixel values are mapped to [0, 1] on load.
    """

    data: np.ndarray
    bit_depth_origin: int = 8

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvalidInputError(f"image data must be 2-D and non-empty, got shape {arr.shape}")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def with_data(self, data: np.ndarray) -> "GrayImage":
        return GrayImage(data, bit_depth_origin=self.bit_depth_origin)


def median_filter(img: GrayImage, radius: int = 1) -> GrayImage:
    """Windowed median with a (2*radius+1)^2 window and replicated borders."""
    if radius < 1:
        raise InvalidParameterError(f"median radius must be >= 1, got {radius}")
    if radius > min(img.width, img.height) / 2:
        raise InvalidParameterError(
            f"median radius {radius} exceeds half the minimum image dimension "
            f"({img.width}x{img.height})"
        )
    k = 2 * radius + 1
    padded = np.pad(img.data, radius, mode="edge")
    windows = sliding_window_view(padded, (k, k))
    out = np.median(windows, axis=(2, 3))
    return img.with_data(out)


def zero_mean(img: GrayImage) -> GrayImage:
    """Subtract the global mean so the output averages to zero."""
    return img.with_data(img.data - img.data.mean())


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Truncated 1-D Gaussian with half-width ceil(3*sigma), normalized to sum 1."""
    if sigma <= 0:
        raise InvalidParameterError(f"sigma must be positive, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kern = np.exp(-(xs**2) / (2.0 * sigma * sigma))
    return kern / kern.sum()


def _smooth_array(arr: np.ndarray, sigma: float) -> np.ndarray:
    kern = gaussian_kernel(sigma)
    radius = (kern.size - 1) // 2
    h, w = arr.shape
    # horizontal pass
    padded = np.pad(arr, ((0, 0), (radius, radius)), mode="edge")
    out = np.zeros_like(arr)
    for i, kv in enumerate(kern):
        out += kv * padded[:, i : i + w]
    # vertical pass
    padded = np.pad(out, ((radius, radius), (0, 0)), mode="edge")
    out = np.zeros_like(arr)
    for i, kv in enumerate(kern):
        out += kv * padded[i : i + h, :]
    return out


def gaussian_smooth(img: GrayImage, sigma: float) -> GrayImage:
    """Separable truncated-Gaussian convolution with clamped borders."""
    return img.with_data(_smooth_array(img.data, sigma))


def dog_filter(img: GrayImage, sigma_inner: float = 1.0, sigma_outer: float = 2.0) -> GrayImage:
    """Difference of Gaussians: blur(sigma_inner) - blur(sigma_outer)."""
    if not (0 < sigma_inner < sigma_outer):
        raise InvalidParameterError(
            f"require 0 < sigma_inner < sigma_outer, got ({sigma_inner}, {sigma_outer})"
        )
    inner = _smooth_array(img.data, sigma_inner)
    outer = _smooth_array(img.data, sigma_outer)
    return img.with_data(inner - outer)


@dataclass(frozen=True)
class PreprocessParams:
    """Configuration of the shared preprocessing chain."""

    median_radius: int = 1
    dog_sigma_inner: float = 1.0
    dog_sigma_outer: float = 2.0


def preprocess(img: GrayImage, params: PreprocessParams = PreprocessParams()) -> GrayImage:
    """median filter -> zero-mean -> DoG, in that order."""
    out = median_filter(img, params.median_radius)
    out = zero_mean(out)
    out = dog_filter(out, params.dog_sigma_inner, params.dog_sigma_outer)
    return out


# --- PGM (P5) I/O -----------------------------------------------------------
#
# Binary PGM covers both modalities: 8-bit visible and 16-bit thermal rasters
# are read bit-exactly and mapped linearly to [0, 1].


def read_pgm(path: str | Path) -> GrayImage:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise InvalidInputError(f"{path}: not a binary PGM (P5) file")
    pos = 2
    fields = []
    while len(fields) < 3:
        # skip whitespace and comment lines between header tokens
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InvalidInputError(f"{path}: truncated PGM header")
        fields.append(int(buf[start:pos]))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if not (0 < maxval < 65536):
        raise InvalidInputError(f"{path}: invalid maxval {maxval}")
    if maxval < 256:
        raw = np.frombuffer(buf, dtype=np.uint8, count=width * height, offset=pos)
        depth = 8
    else:
        raw = np.frombuffer(buf, dtype=">u2", count=width * height, offset=pos)
        depth = 16
    if raw.size != width * height:
        raise InvalidInputError(f"{path}: pixel payload shorter than {width}x{height}")
    data = raw.reshape(height, width).astype(np.float64) / float(maxval)
    return GrayImage(data, bit_depth_origin=depth)


def write_pgm(path: str | Path, img: GrayImage, maxval: int = 255) -> None:
    if not (0 < maxval < 65536):
        raise InvalidParameterError(f"invalid maxval {maxval}")
    quant = np.clip(np.rint(img.data * maxval), 0, maxval)
    header = f"P5\n{img.width} {img.height}\n{maxval}\n".encode("ascii")
    if maxval < 256:
        payload = quant.astype(np.uint8).tobytes()
    else:
        payload = quant.astype(">u2").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + payload)


def _read_png(path: Path) -> GrayImage:
    try:
        from PIL import Image
    except ImportError as exc:
        raise InvalidInputError(
            f"{path}: PNG support requires Pillow; use PGM instead"
        ) from exc
    with Image.open(path) as handle:
        if handle.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(handle, dtype=np.float64)
            return GrayImage(arr / 65535.0, bit_depth_origin=16)
        gray = handle.convert("L")
        arr = np.asarray(gray, dtype=np.float64)
        return GrayImage(arr / 255.0, bit_depth_origin=8)


def read_image(path: str | Path) -> GrayImage:
    """Load a grayscale raster; PGM is first-class, PNG works when Pillow exists."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        return read_pgm(path)
    if suffix == ".png":
        return _read_png(path)
    raise InvalidInputError(f"{path}: unsupported image format {suffix!r}")
