"""Dense two-scale block descriptors, PCA reduction and position embedding.

Every image is covered by a row-major grid of overlapping square blocks
(default 20x20, stride 8). At each smoothing scale a 128-d gradient
orientation histogram (4x4 spatial cells x 8 orientation bins, magnitude
weighted, trilinear binned, L2 -> clip 0.2 -> L2 normalized) is computed per
block. Descriptors are decorrelated to 64 dims with PCA and concatenated with
the block center position normalized to [-1, 1], giving the 66-d vectors used
everywhere downstream.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import container
from .errors import InvalidInputError, InvalidParameterError
from .imgproc import GrayImage, _smooth_array

DESCRIPTOR_DIM = 128
EMBED_DIM = 66
N_CELLS = 4          # cells per block side
N_ORIENT_BINS = 8
CLIP_THRESHOLD = 0.2
DEFAULT_BLOCK = 20
DEFAULT_STRIDE = 8
DEFAULT_SCALES = (0.6, 1.0)
DEFAULT_PCA_DIMS = 64

SOURCE = "source"
TARGET = "target"
MAPPED_SOURCE = "mapped-source"


@dataclass(frozen=True)
class BlockGrid:
    """Row-major block layout; centers are measured from the image center."""

    block_size: int
    stride: int
    width: int
    height: int
    n_x: int
    n_y: int
    positions: np.ndarray  # (n_blocks, 2) of (cx, cy)

    def __len__(self) -> int:
        return self.n_x * self.n_y


def make_grid(width: int, height: int, block: int = DEFAULT_BLOCK, stride: int = DEFAULT_STRIDE) -> BlockGrid:
    if block > min(width, height):
        raise InvalidParameterError(
            f"block size {block} exceeds image dimensions {width}x{height}"
        )
    if stride < 1:
        raise InvalidParameterError(f"stride must be >= 1, got {stride}")
    n_x = (width - block) // stride + 1
    n_y = (height - block) // stride + 1
    cx0 = (block - 1) / 2.0 - (width - 1) / 2.0
    cy0 = (block - 1) / 2.0 - (height - 1) / 2.0
    xs = cx0 + stride * np.arange(n_x, dtype=np.float64)
    ys = cy0 + stride * np.arange(n_y, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)  # row-major: y outer, x inner
    positions = np.column_stack([gx.ravel(), gy.ravel()])
    positions.flags.writeable = False
    return BlockGrid(block, stride, width, height, n_x, n_y, positions)


@dataclass(frozen=True)
class RawDescriptor:
    """One 128-d block descriptor before PCA."""

    values: np.ndarray
    block_center: tuple[float, float]
    scale_index: int


def _cell_interp(block: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel linear spatial interpolation onto the 4x4 cell lattice.

    Returns (idx0, idx1, w0, w1) along one axis: each pixel contributes to the
    two nearest cell centers; weight to a cell outside [0, 4) is dropped.
    """
    cell = block / N_CELLS
    u = (np.arange(block) + 0.5) / cell - 0.5
    i0 = np.floor(u).astype(np.int64)
    w1 = u - i0
    w0 = 1.0 - w1
    i1 = i0 + 1
    w0[(i0 < 0) | (i0 >= N_CELLS)] = 0.0
    w1[(i1 < 0) | (i1 >= N_CELLS)] = 0.0
    i0 = np.clip(i0, 0, N_CELLS - 1)
    i1 = np.clip(i1, 0, N_CELLS - 1)
    return i0, i1, w0, w1


def _spatial_weights(block: int) -> np.ndarray:
    """(block*block, 16) matrix of bilinear pixel->cell weights, cached per size."""
    cached = _spatial_weights._cache.get(block)
    if cached is not None:
        return cached
    ri0, ri1, rw0, rw1 = _cell_interp(block)
    ci0, ci1, cw0, cw1 = _cell_interp(block)
    weights = np.zeros((block * block, N_CELLS * N_CELLS), dtype=np.float64)
    px = 0
    for r in range(block):
        for c in range(block):
            for cy, wy in ((ri0[r], rw0[r]), (ri1[r], rw1[r])):
                if wy == 0.0:
                    continue
                for cx, wx in ((ci0[c], cw0[c]), (ci1[c], cw1[c])):
                    if wx == 0.0:
                        continue
                    weights[px, cy * N_CELLS + cx] += wy * wx
            px += 1
    weights.flags.writeable = False
    _spatial_weights._cache[block] = weights
    return weights


_spatial_weights._cache = {}


def _gradients(arr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences with replicated borders."""
    padded = np.pad(arr, 1, mode="edge")
    gx = 0.5 * (padded[1:-1, 2:] - padded[1:-1, :-2])
    gy = 0.5 * (padded[2:, 1:-1] - padded[:-2, 1:-1])
    return gx, gy


def _block_histograms(arr: np.ndarray, grid: BlockGrid) -> np.ndarray:
    """All block descriptors of one smoothed image, shape (n_blocks, 128)."""
    block, stride = grid.block_size, grid.stride
    gx, gy = _gradients(arr)
    mag = np.hypot(gx, gy)
    theta = np.arctan2(gy, gx)

    # orientation bin centers sit at (k + 0.5) * pi/4 - pi, so each gradient
    # splits linearly between its two nearest bins (circularly)
    pos = (theta + np.pi) / (2.0 * np.pi / N_ORIENT_BINS)
    z = pos - 0.5
    b0 = np.floor(z)
    frac = z - b0
    b0 = b0.astype(np.int64) % N_ORIENT_BINS
    b1 = (b0 + 1) % N_ORIENT_BINS

    def blocks_of(a: np.ndarray) -> np.ndarray:
        view = sliding_window_view(a, (block, block))[::stride, ::stride]
        return view.reshape(-1, block * block)

    w0_b = blocks_of(mag * (1.0 - frac))
    w1_b = blocks_of(mag * frac)
    b0_b = blocks_of(b0)
    b1_b = blocks_of(b1)

    spatial = _spatial_weights(block)  # (px, 16)
    n_blocks = w0_b.shape[0]
    hist = np.zeros((n_blocks, N_CELLS * N_CELLS, N_ORIENT_BINS), dtype=np.float64)
    for o in range(N_ORIENT_BINS):
        votes = w0_b * (b0_b == o) + w1_b * (b1_b == o)  # (n_blocks, px)
        hist[:, :, o] = votes @ spatial
    desc = hist.reshape(n_blocks, DESCRIPTOR_DIM)

    # L2 normalize, clip large bins, renormalize; flat blocks stay all-zero
    norms = np.linalg.norm(desc, axis=1, keepdims=True)
    nonzero = norms[:, 0] > 0
    desc[nonzero] /= norms[nonzero]
    np.clip(desc, 0.0, CLIP_THRESHOLD, out=desc)
    norms = np.linalg.norm(desc, axis=1, keepdims=True)
    nonzero = norms[:, 0] > 0
    desc[nonzero] /= norms[nonzero]
    return desc


def extract_dense(img: GrayImage, grid: BlockGrid, scales: Sequence[float] = DEFAULT_SCALES) -> list[RawDescriptor]:
    """Dense descriptors at each scale, scale 0 blocks first, row-major within a scale."""
    if len(scales) == 0:
        raise InvalidParameterError("scale list must not be empty")
    if grid.block_size % N_CELLS != 0:
        raise InvalidParameterError(f"block size must be divisible by {N_CELLS}")
    if (grid.width, grid.height) != (img.width, img.height):
        raise InvalidInputError("grid geometry does not match the image")
    values = extract_dense_values(img, grid, scales)
    out = []
    n_blocks = len(grid)
    for s in range(len(scales)):
        for b in range(n_blocks):
            cx, cy = grid.positions[b]
            out.append(RawDescriptor(values[s * n_blocks + b], (float(cx), float(cy)), s))
    return out


def extract_dense_values(img: GrayImage, grid: BlockGrid, scales: Sequence[float] = DEFAULT_SCALES) -> np.ndarray:
    """Array form of extract_dense: (len(scales) * n_blocks, 128)."""
    if len(scales) == 0:
        raise InvalidParameterError("scale list must not be empty")
    chunks = []
    for sigma in scales:
        smoothed = _smooth_array(img.data, sigma)
        chunks.append(_block_histograms(smoothed, grid))
    return np.vstack(chunks)


@dataclass(frozen=True)
class PcaModel:
    """Mean + orthonormal basis of the top principal directions."""

    mean: np.ndarray                # (d,)
    basis: np.ndarray               # (out_dims, d), rows orthonormal
    explained_variance: np.ndarray  # (out_dims,), non-increasing

    @property
    def out_dims(self) -> int:
        return self.basis.shape[0]

    @property
    def fingerprint(self) -> str:
        return container.fingerprint(
            {"mean": self.mean, "basis": self.basis, "explained_variance": self.explained_variance}
        )

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.basis.T

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) @ self.basis + self.mean

    def save(self, path) -> None:
        container.write_container(
            path,
            "pca-model",
            {"mean": self.mean, "basis": self.basis, "explained_variance": self.explained_variance},
            {"fingerprint": self.fingerprint, "out_dims": self.out_dims},
        )

    @classmethod
    def load(cls, path) -> "PcaModel":
        _, arrays, _ = container.read_container(path, expect_kind="pca-model")
        return cls(arrays["mean"], arrays["basis"], arrays["explained_variance"])


def pca_fit(samples: np.ndarray | Sequence[np.ndarray], out_dims: int = DEFAULT_PCA_DIMS) -> PcaModel:
    """Eigendecomposition of the sample covariance, keeping the top directions.

    The sign of each basis vector is fixed so its largest-magnitude component
    is positive, making the fit deterministic.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidInputError(f"samples must be 2-D, got shape {x.shape}")
    n, d = x.shape
    if out_dims < 1 or out_dims > d:
        raise InvalidParameterError(f"out_dims must be in [1, {d}], got {out_dims}")
    if n <= out_dims:
        raise InvalidParameterError(f"need more than {out_dims} samples, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = (centered.T @ centered) / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:out_dims]
    basis = eigvecs[:, order].T.copy()
    variance = np.clip(eigvals[order], 0.0, None)
    for row in basis:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PcaModel(mean, basis, variance)


@dataclass(frozen=True)
class EmbeddedDescriptor:
    """64 PCA coefficients followed by the normalized block-center position."""

    values: np.ndarray  # (66,)
    block_center: tuple[float, float]


def _normalize_position(center, width: int, height: int) -> tuple[float, float]:
    return (center[0] / ((width - 1) / 2.0), center[1] / ((height - 1) / 2.0))


def embed(desc: RawDescriptor, pca: PcaModel, img_dims: tuple[int, int]) -> EmbeddedDescriptor:
    width, height = img_dims
    coeffs = pca.transform(desc.values)
    px, py = _normalize_position(desc.block_center, width, height)
    return EmbeddedDescriptor(np.concatenate([coeffs, [px, py]]), desc.block_center)


@dataclass
class DescriptorSet:
    """All embedded descriptors of one image in canonical order.

    Order is scale 0 row-major then scale 1 row-major, identical for every
    image with the same dimensions; template alignment depends on it.
    """

    image_id: str
    modality: str
    width: int
    height: int
    values: np.ndarray       # (n_desc, embed_dim)
    centers: np.ndarray      # (n_desc, 2)
    scale_index: np.ndarray  # (n_desc,)

    def __post_init__(self):
        if self.values.ndim != 2 or len(self.values) != len(self.centers):
            raise InvalidInputError("descriptor arrays are inconsistent")

    @property
    def n_descriptors(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def build_descriptor_set(
    image_id: str,
    modality: str,
    img: GrayImage,
    grid: BlockGrid,
    pca: PcaModel,
    scales: Sequence[float] = DEFAULT_SCALES,
) -> DescriptorSet:
    """Extract, PCA-project and position-embed a whole image in one pass."""
    raw = extract_dense_values(img, grid, scales)
    coeffs = pca.transform(raw)
    half_w = (grid.width - 1) / 2.0
    half_h = (grid.height - 1) / 2.0
    pos = grid.positions / np.array([half_w, half_h])
    n_scales = len(scales)
    pos_all = np.tile(pos, (n_scales, 1))
    values = np.hstack([coeffs, pos_all])
    centers = np.tile(grid.positions, (n_scales, 1))
    scale_index = np.repeat(np.arange(n_scales, dtype=np.int8), len(grid))
    return DescriptorSet(image_id, modality, grid.width, grid.height, values, centers, scale_index)
