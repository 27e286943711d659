from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import special

from rib_lab.lab_core.tensor.errors_v0 import DimensionError, NumericError


# Тензор библиотеки: обычный плотный numpy-массив в row-major порядке.
Tensor = NDArray[np.floating]

DTYPES = {
    "f32": np.dtype(np.float32),
    "f64": np.dtype(np.float64),
}


def resolve_dtype(dtype: str | np.dtype | type) -> np.dtype:
    """Привести имя dtype ("f32"/"f64") или numpy-dtype к одному из поддерживаемых.

    Raises
    ------
    ValueError
        Если dtype не f32 и не f64.
    """
    if isinstance(dtype, str) and dtype in DTYPES:
        return DTYPES[dtype]
    resolved = np.dtype(dtype)
    if resolved not in DTYPES.values():
        raise ValueError(f"Unsupported dtype: {dtype!r} (expected f32 or f64)")
    return resolved


def dtype_name(dtype: np.dtype) -> str:
    """Обратное отображение: numpy-dtype → "f32"/"f64"."""
    for name, value in DTYPES.items():
        if value == dtype:
            return name
    raise ValueError(f"Unsupported dtype: {dtype!r}")


def as_tensor(data: ArrayLike, dtype: str | np.dtype = "f32") -> Tensor:
    """Построить неизменяемый тензор (rank ≥ 1) заданного dtype.

    Скаляры превращаются в тензор формы [1]. Буфер помечается read-only:
    тензоры в библиотеке: значения, а не контейнеры.
    """
    arr = np.array(data, dtype=resolve_dtype(dtype), order="C")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    arr.setflags(write=False)
    return arr


def check_finite_inputs(op: str, *arrays: np.ndarray) -> None:
    """Бросить NumericError, если во входах есть NaN (−inf допустим как маска)."""
    for arr in arrays:
        if np.isnan(arr).any():
            raise NumericError(f"{op}: NaN in input of shape {arr.shape}")


def _strip_leading_ones(shape: Sequence[int]) -> Tuple[int, ...]:
    shape = tuple(shape)
    i = 0
    while i < len(shape) and shape[i] == 1:
        i += 1
    return shape[i:]


def check_compatible(op: str, a_shape: Sequence[int], b_shape: Sequence[int]) -> Tuple[int, ...]:
    """Проверить совместимость форм для поэлементной операции.

    Разрешено: одинаковые формы; ведущие batch-оси размера 1;
    форма одного операнда: суффикс формы другого (bias [D] к [B, N, D]).

    Returns
    -------
    tuple
        Итоговая форма результата.
    """
    a_core = _strip_leading_ones(a_shape)
    b_core = _strip_leading_ones(b_shape)
    longer, shorter = (a_core, b_core) if len(a_core) >= len(b_core) else (b_core, a_core)
    if shorter and longer[len(longer) - len(shorter):] != shorter:
        raise DimensionError.mismatch(op, a_shape, b_shape)
    return tuple(np.broadcast_shapes(tuple(a_shape), tuple(b_shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Матричное произведение с batch-осями: [.., m, k] × [.., k, n] → [.., m, n].

    Batch-оси должны совпадать либо одна из них равна 1.

    Raises
    ------
    DimensionError
        Если внутренние размерности или batch-оси не согласованы.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError.mismatch("matmul", a.shape, b.shape)
    batch_a, batch_b = a.shape[:-2], b.shape[:-2]
    for da, db in zip(reversed(batch_a), reversed(batch_b)):
        if da != db and da != 1 and db != 1:
            raise DimensionError.mismatch("matmul", a.shape, b.shape)
    if a.dtype != b.dtype:
        raise DimensionError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    return np.matmul(a, b)


def softmax_rows(s: Tensor) -> Tensor:
    """Softmax по последней оси с вычитанием максимума.

    Строка, целиком состоящая из −inf (все ключи замаскированы),
    возвращает нули, а не NaN.

    Raises
    ------
    NumericError
        Если во входе есть NaN.
    """
    check_finite_inputs("softmax_rows", s)
    row_max = np.max(s, axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0).astype(s.dtype, copy=False)
    e = np.exp(s - row_max)
    denom = np.sum(e, axis=-1, keepdims=True)
    safe = np.where(denom > 0, denom, 1).astype(s.dtype, copy=False)
    return np.where(denom > 0, e / safe, 0).astype(s.dtype, copy=False)


def add(a: Tensor, b: Tensor) -> Tensor:
    check_compatible("add", a.shape, b.shape)
    return a + b


def sub(a: Tensor, b: Tensor) -> Tensor:
    check_compatible("sub", a.shape, b.shape)
    return a - b


def mul(a: Tensor, b: Tensor) -> Tensor:
    check_compatible("mul", a.shape, b.shape)
    return a * b


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    return special.expit(x).astype(x.dtype, copy=False)


def gelu(x: Tensor) -> Tensor:
    """Точный GELU через erf (без tanh-аппроксимации)."""
    return (0.5 * x * (1.0 + special.erf(x / np.sqrt(2.0)))).astype(x.dtype, copy=False)


def gelu_grad(x: Tensor) -> Tensor:
    """Аналитическая производная точного GELU."""
    cdf = 0.5 * (1.0 + special.erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return (cdf + x * pdf).astype(x.dtype, copy=False)


__all__ = [
    "Tensor",
    "DTYPES",
    "resolve_dtype",
    "dtype_name",
    "as_tensor",
    "check_finite_inputs",
    "check_compatible",
    "matmul",
    "softmax_rows",
    "add",
    "sub",
    "mul",
    "relu",
    "sigmoid",
    "gelu",
    "gelu_grad",
]
