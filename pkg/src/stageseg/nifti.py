"""Minimal NIfTI-1 volume IO: enough to round-trip float/int volumes.

Supports plain and gzipped single-file images (.nii / .nii.gz), C-contiguous
arrays ordered (depth, height, width) on our side, stored x-fastest as the
format requires. Only the header fields needed for geometry and dtype are
honored; orientation matrices are ignored (synthetic + preprocessed data are
axis-aligned by construction).
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

HEADER_SIZE = 348
MAGIC_OFFSET = 344

_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def _open(path: Path, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path) -> np.ndarray:
    """Read a .nii or .nii.gz volume as a (depth, height, width) array."""
    path = Path(path)
    with _open(path, "rb") as fh:
        header = fh.read(HEADER_SIZE)
        if len(header) < HEADER_SIZE:
            raise ContractError(f"{path}: truncated header")
        magic = header[MAGIC_OFFSET:MAGIC_OFFSET + 4]
        if magic not in (b"n+1\x00", b"ni1\x00"):
            raise ContractError(f"{path}: not a NIfTI-1 file (magic {magic!r})")
        sizeof_hdr = struct.unpack_from("<i", header, 0)[0]
        if sizeof_hdr != HEADER_SIZE:
            raise ContractError(f"{path}: unsupported byte order or header size")
        dim = struct.unpack_from("<8h", header, 40)
        ndim = dim[0]
        if not 2 <= ndim <= 3:
            raise ContractError(f"{path}: expected 2D/3D volume, dim={dim}")
        nx, ny = dim[1], dim[2]
        nz = dim[3] if ndim == 3 else 1
        datatype = struct.unpack_from("<h", header, 70)[0]
        if datatype not in _DTYPES:
            raise ContractError(f"{path}: unsupported datatype code {datatype}")
        dtype = np.dtype(_DTYPES[datatype]).newbyteorder("<")
        vox_offset = int(struct.unpack_from("<f", header, 108)[0])
        scl_slope = struct.unpack_from("<f", header, 112)[0]
        scl_inter = struct.unpack_from("<f", header, 116)[0]
        fh.read(max(0, vox_offset - HEADER_SIZE))
        count = nx * ny * nz
        raw = fh.read(count * dtype.itemsize)
        if len(raw) < count * dtype.itemsize:
            raise ContractError(f"{path}: truncated data section")
    # x varies fastest on disk; our C-order (z, y, x) matches exactly
    arr = np.frombuffer(raw, dtype=dtype, count=count).reshape(nz, ny, nx)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        arr = arr.astype(np.float32) * slope + scl_inter
    return np.ascontiguousarray(arr)


def write_nifti(path, volume: np.ndarray) -> None:
    """Write a (depth, height, width) array as single-file NIfTI-1."""
    path = Path(path)
    arr = np.asarray(volume)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ContractError(f"expected a 2D/3D array, got shape {arr.shape}")
    dtype = np.dtype(arr.dtype)
    if dtype not in _CODES:
        arr = arr.astype(np.float32)
        dtype = np.dtype(np.float32)
    nz, ny, nx = arr.shape
    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, _CODES[dtype])
    struct.pack_into("<h", header, 72, dtype.itemsize * 8)  # bitpix
    struct.pack_into("<8f", header, 76, 0, 1, 1, 1, 1, 1, 1, 1)  # pixdim
    struct.pack_into("<f", header, 108, 352.0)  # vox_offset
    struct.pack_into("<f", header, 112, 1.0)    # scl_slope
    struct.pack_into("<f", header, 116, 0.0)    # scl_inter
    header[MAGIC_OFFSET:MAGIC_OFFSET + 4] = b"n+1\x00"
    path.parent.mkdir(parents=True, exist_ok=True)
    with _open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(b"\x00" * 4)  # extension flag
        fh.write(np.ascontiguousarray(arr, dtype=dtype.newbyteorder("<")).tobytes())
