"""Versioned binary container used by every persisted model/artifact.

All model files (PCA, mapping network, PLS, galleries, descriptor archives)
share one chunked layout so round-trips are bit-exact for the stored reals.

Byte layout (all integers little-endian):

    offset  size  field
    0       8     magic, ASCII ``XMCONT01``
    8       4     u32 format version (currently 1)
    12      4     u32 kind length K
    16      K     kind, UTF-8 (e.g. "pca-model", "dpm-model", "pls-model",
                  "gallery", "descriptor-archive")
    ...     4     u32 metadata length M
    ...     M     canonical JSON metadata (UTF-8, sorted keys, no whitespace)
    ...     4     u32 array count A
    then A array records, each:
            4     u32 name length, followed by the UTF-8 name
            2     u16 dtype code (see _DTYPE_CODES)
            1     u8 ndim
            8*nd  u64 dims
            *     raw array bytes, C order

Array payloads are written/read verbatim (no text round-trip), which makes
serialization bit-exact by construction.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ArtifactError

MAGIC = b"XMCONT01"
FORMAT_VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f8"): 1,
    np.dtype("<f4"): 2,
    np.dtype("<i8"): 3,
    np.dtype("<i4"): 4,
    np.dtype("uint8"): 5,
    np.dtype("int8"): 6,
}
_CODE_DTYPES = {code: dt for dt, code in _DTYPE_CODES.items()}


def canonical_json(obj) -> str:
    """Deterministic JSON encoding (sorted keys, minimal separators)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def write_container(path: str | Path, kind: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    kind_b = kind.encode("utf-8")
    parts.append(struct.pack("<I", len(kind_b)))
    parts.append(kind_b)
    meta_b = canonical_json(meta).encode("utf-8")
    parts.append(struct.pack("<I", len(meta_b)))
    parts.append(meta_b)
    parts.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        arr = arr.astype(dt, copy=False)
        if arr.dtype not in _DTYPE_CODES:
            raise ArtifactError(f"unsupported array dtype {arr.dtype!r} for section {name!r}")
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<HB", _DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))


def read_container(path: str | Path, expect_kind: str | None = None):
    """Return (kind, arrays, meta). Raises ArtifactError on any malformation."""
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"artifact not found: {path}")
    buf = path.read_bytes()
    if len(buf) < 16 or buf[:8] != MAGIC:
        raise ArtifactError(f"{path}: not a crossface container (bad magic)")
    pos = 8
    (version,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if version != FORMAT_VERSION:
        raise ArtifactError(f"{path}: unsupported container version {version}")
    (klen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    kind = buf[pos : pos + klen].decode("utf-8")
    pos += klen
    if expect_kind is not None and kind != expect_kind:
        raise ArtifactError(f"{path}: expected kind {expect_kind!r}, found {kind!r}")
    (mlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    meta = json.loads(buf[pos : pos + mlen].decode("utf-8"))
    pos += mlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<HB", buf, pos)
        pos += 3
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        dtype = _CODE_DTYPES.get(code)
        if dtype is None:
            raise ArtifactError(f"{path}: unknown dtype code {code} in section {name!r}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(buf[pos : pos + nbytes], dtype=dtype).reshape(shape).copy()
        pos += nbytes
        arrays[name] = arr
    return kind, arrays, meta


def fingerprint(arrays: dict[str, np.ndarray]) -> str:
    """Stable content hash of a set of named arrays (used to tie pipelines together)."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode("utf-8"))
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes(order="C"))
    return h.hexdigest()[:16]
