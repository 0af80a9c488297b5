"""Minimal NIfTI-1 read/write for 3D volumes, plus JSON sidecars.

Supports the subset this package produces: single-file .nii/.nii.gz,
little-endian, unscaled uint8/int16/int32/float32/float64 data. Gzip
members are written with mtime=0 so identical arrays give identical
bytes.
"""

from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}
_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items()}
_HDR_SIZE = 348


def write_nifti(path: str | Path, data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> Path:
    """Write a 3D array as NIfTI-1; gzip when the suffix is .gz."""
    path = Path(path)
    if data.ndim != 3:
        raise DataError(f"only 3D volumes supported, got shape {data.shape}")
    code = _CODES.get(data.dtype.str)
    if code is None:
        raise DataError(f"unsupported dtype {data.dtype}")

    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    dims = (3,) + data.shape + (1, 1, 1, 1)
    struct.pack_into("<8h", hdr, 40, *dims)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, data.dtype.itemsize * 8)
    pixdim = (1.0,) + tuple(float(s) for s in spacing) + (1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, 352.0)           # vox_offset
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)       # scl_slope/inter
    struct.pack_into("<2h", hdr, 252, 0, 1)           # qform, sform codes
    sx, sy, sz = (float(s) for s in spacing)
    struct.pack_into("<4f", hdr, 280, sx, 0, 0, 0)
    struct.pack_into("<4f", hdr, 296, 0, sy, 0, 0)
    struct.pack_into("<4f", hdr, 312, 0, 0, sz, 0)
    hdr_end = struct.pack("<4x")                      # 4-byte extension flag, zeros
    magic = b"n+1\x00"
    hdr[344:348] = magic

    payload = bytes(hdr) + hdr_end + np.asfortranarray(data).tobytes(order="F")
    if path.suffix == ".gz":
        with open(path, "wb") as fh:
            with gzip.GzipFile(filename="", fileobj=fh, mode="wb", mtime=0) as gz:
                gz.write(payload)
    else:
        path.write_bytes(payload)
    return path


def read_nifti(path: str | Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read a NIfTI-1 file written by this module (or compatible)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < _HDR_SIZE + 4:
        raise DataError(f"{path}: truncated NIfTI header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != _HDR_SIZE:
        raise DataError(f"{path}: not little-endian NIfTI-1 (sizeof_hdr={sizeof_hdr})")
    dims = struct.unpack_from("<8h", raw, 40)
    ndim = dims[0]
    if ndim != 3:
        raise DataError(f"{path}: expected 3D volume, got ndim={ndim}")
    shape = tuple(dims[1:4])
    (code,) = struct.unpack_from("<h", raw, 70)
    dtype = _DTYPES.get(code)
    if dtype is None:
        raise DataError(f"{path}: unsupported datatype code {code}")
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    start = int(vox_offset)
    count = int(np.prod(shape))
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    return arr.reshape(shape, order="F").copy(), tuple(pixdim[1:4])


def write_sidecar(path: str | Path, payload: dict) -> Path:
    """Write the JSON sidecar next to a volume, deterministic byte layout."""
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def read_sidecar(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
