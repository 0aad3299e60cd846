"""
PDFL binary tensor format.

Layout (little-endian):
    magic    4 bytes  b"PDFL"
    version  u16
    dtype    u8       1 = float32, 2 = float64
    ndim     u8
    dims     ndim x u64
    payload  row-major values
"""
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import torch

from ..utils.errors import CorruptionError, FormatError, StoreError

MAGIC = b"PDFL"
FORMAT_VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR = {"float32": 1, "float64": 2}
_PREFIX = struct.Struct("<4sHBB")


@dataclass(frozen=True)
class TensorRecord:
    dtype_code: int
    dims: Tuple[int, ...]
    payload: np.ndarray

    def to_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.payload.astype(self.payload.dtype.newbyteorder("="), copy=True))


def encode(data: Union[torch.Tensor, np.ndarray], dtype: Optional[str] = None) -> bytes:
    arr = data.detach().cpu().numpy() if isinstance(data, torch.Tensor) else np.asarray(data)
    name = dtype or ("float64" if arr.dtype == np.float64 else "float32")
    if name not in _CODE_FOR:
        raise FormatError(f"unsupported dtype '{name}'")
    code = _CODE_FOR[name]
    arr = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code])
    if arr.ndim > 255:
        raise FormatError("too many dimensions")
    header = _PREFIX.pack(MAGIC, FORMAT_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def decode(blob: bytes, source: str = "<bytes>") -> TensorRecord:
    if len(blob) < _PREFIX.size:
        raise CorruptionError(f"{source}: truncated header")
    magic, version, code, ndim = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported format version {version}")
    if code not in DTYPE_CODES:
        raise FormatError(f"{source}: unknown dtype code {code}")
    dims_end = _PREFIX.size + 8 * ndim
    if len(blob) < dims_end:
        raise CorruptionError(f"{source}: truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", blob, _PREFIX.size)
    dtype = DTYPE_CODES[code]
    expected = dtype.itemsize * int(np.prod(dims, dtype=np.int64))
    actual = len(blob) - dims_end
    if actual != expected:
        raise CorruptionError(f"{source}: payload has {actual} bytes, header implies {expected}")
    payload = np.frombuffer(blob, dtype=dtype, offset=dims_end).reshape(dims)
    return TensorRecord(code, tuple(dims), payload)


def save_tensor(path: Union[str, Path], data: Union[torch.Tensor, np.ndarray, TensorRecord],
                dtype: Optional[str] = None) -> Path:
    """Write atomically; an existing file is replaced, never edited in place."""
    path = Path(path)
    if isinstance(data, TensorRecord):
        data, dtype = data.payload, ("float32" if data.dtype_code == 1 else "float64")
    blob = encode(data, dtype)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except OSError as e:
        raise StoreError(f"cannot write {path}: {e}") from e
    return path


def read_record(path: Union[str, Path]) -> TensorRecord:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise StoreError(f"cannot read {path}: {e}") from e
    return decode(blob, str(path))


def load_tensor(path: Union[str, Path]) -> torch.Tensor:
    return read_record(path).to_tensor()
