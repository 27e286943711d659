from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from rib_lab.lab_core.tensor.errors_v0 import TensorFormatError, TensorLengthError
from rib_lab.lab_core.tensor.tensor_v0 import Tensor


MAGIC = b"RIBT"
VERSION = 1

# dtype_code → little-endian numpy dtype
_CODE_TO_DTYPE = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
}

# magic(4) + version(u8) + dtype_code(u8) + rank(u32 LE)
_PREFIX = struct.Struct("<4sBBI")


def _dtype_code(dtype: np.dtype) -> int:
    for code, value in _CODE_TO_DTYPE.items():
        if value.kind == dtype.kind and value.itemsize == dtype.itemsize:
            return code
    raise TensorFormatError(f"Unsupported dtype for RIBT: {dtype}")


def encode_tensor(t: Tensor) -> bytes:
    """Сериализовать тензор в байты формата RIBT (см. docs/ribt-format.md)."""
    arr = np.asarray(t)
    if arr.ndim < 1:
        raise TensorFormatError("RIBT tensors must have rank >= 1")
    code = _dtype_code(arr.dtype)
    header = _PREFIX.pack(MAGIC, VERSION, code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_CODE_TO_DTYPE[code]).tobytes(order="C")
    return header + dims + payload


def decode_tensor(blob: bytes) -> Tensor:
    """Разобрать байты RIBT обратно в тензор (read-only, нативный порядок байт).

    Raises
    ------
    TensorFormatError
        Неверные magic / version / dtype_code.
    TensorLengthError
        Файл обрезан или содержит лишние байты.
    """
    if len(blob) < _PREFIX.size:
        raise TensorLengthError(f"RIBT header truncated: {len(blob)} bytes")
    magic, version, code, rank = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise TensorFormatError(f"Bad RIBT magic: {magic!r}")
    if version != VERSION:
        raise TensorFormatError(f"Unsupported RIBT version: {version}")
    if code not in _CODE_TO_DTYPE:
        raise TensorFormatError(f"Unknown RIBT dtype_code: {code}")
    if rank < 1:
        raise TensorFormatError("RIBT rank must be >= 1")

    dims_end = _PREFIX.size + 8 * rank
    if len(blob) < dims_end:
        raise TensorLengthError(f"RIBT dims truncated: need {dims_end} bytes, got {len(blob)}")
    dims = struct.unpack_from(f"<{rank}Q", blob, _PREFIX.size)

    dtype = _CODE_TO_DTYPE[code]
    expected = dims_end + dtype.itemsize * int(np.prod(dims, dtype=np.int64))
    if len(blob) != expected:
        raise TensorLengthError(f"RIBT payload length mismatch: expected {expected} bytes, got {len(blob)}")

    arr = np.frombuffer(blob, dtype=dtype, offset=dims_end).reshape(dims)
    arr = arr.astype(dtype.newbyteorder("="), copy=True)
    arr.setflags(write=False)
    return arr


def save_tensor(path: Path | str, t: Tensor) -> Path:
    """Записать тензор в файл RIBT."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(t))
    return path


def load_tensor(path: Path | str) -> Tensor:
    """Прочитать тензор из файла RIBT; load(save(t)) == t побитово."""
    return decode_tensor(Path(path).read_bytes())


__all__ = ["MAGIC", "VERSION", "encode_tensor", "decode_tensor", "save_tensor", "load_tensor"]
