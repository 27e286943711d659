"""Дифференцируемые операции над Var.

Каждая функция считает значение через tensor_v0 / numpy и записывает на ленту
замыкание vjp. Свёртки: NHWC с zero-padding "same".
"""
from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from rib_lab.lab_core.autodiff.tape_v0 import Tape, Var
from rib_lab.lab_core.tensor import tensor_v0 as T
from rib_lab.lab_core.tensor.errors_v0 import ContractError, DimensionError


def lift(tape: Tape, value, dtype: np.dtype) -> Var:
    """Var остаётся как есть, всё остальное становится константой ленты."""
    if isinstance(value, Var):
        return value
    return tape.constant(np.asarray(value, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Поэлементные операции
# ---------------------------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    value = T.add(a.value, b.value)
    return a.tape.record(
        "add", [a, b], value,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Var, b: Var) -> Var:
    value = T.sub(a.value, b.value)
    return a.tape.record(
        "sub", [a, b], value,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    value = T.mul(av, bv)
    return a.tape.record(
        "mul", [a, b], value,
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )


def scale(a: Var, c: float) -> Var:
    return a.tape.record("scale", [a], a.value * c, lambda g: (g * c,))


def relu(a: Var) -> Var:
    av = a.value
    # субградиент в нуле равен 0
    return a.tape.record("relu", [a], T.relu(av), lambda g: (g * (av > 0),))


def sigmoid(a: Var) -> Var:
    y = T.sigmoid(a.value)
    return a.tape.record("sigmoid", [a], y, lambda g: (g * y * (1 - y),))


def gelu(a: Var) -> Var:
    av = a.value
    return a.tape.record("gelu", [a], T.gelu(av), lambda g: (g * T.gelu_grad(av),))


def sin(a: Var) -> Var:
    av = a.value
    return a.tape.record("sin", [a], np.sin(av), lambda g: (g * np.cos(av),))


def abs_(a: Var) -> Var:
    av = a.value
    return a.tape.record("abs", [a], np.abs(av), lambda g: (g * np.sign(av),))


# ---------------------------------------------------------------------------
# Редукции
# ---------------------------------------------------------------------------


def sum_all(a: Var) -> Var:
    shape, dtype = a.shape, a.dtype
    value = np.asarray(np.sum(a.value), dtype=dtype)
    return a.tape.record("sum", [a], value, lambda g: (np.broadcast_to(g, shape).astype(dtype),))


def mean_all(a: Var) -> Var:
    shape, dtype = a.shape, a.dtype
    n = a.value.size
    value = np.asarray(np.mean(a.value), dtype=dtype)
    return a.tape.record("mean", [a], value, lambda g: (np.broadcast_to(g / n, shape).astype(dtype),))


# ---------------------------------------------------------------------------
# Линейная алгебра и перестановки осей
# ---------------------------------------------------------------------------


def matmul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    value = T.matmul(av, bv)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return a.tape.record("matmul", [a, b], value, vjp)


def swap_last(a: Var) -> Var:
    """Транспонирование двух последних осей."""
    return a.tape.record("swap_last", [a], np.swapaxes(a.value, -1, -2), lambda g: (np.swapaxes(g, -1, -2),))


def transpose(a: Var, axes: Sequence[int]) -> Var:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return a.tape.record("transpose", [a], np.transpose(a.value, axes), lambda g: (np.transpose(g, inverse),))


def reshape(a: Var, shape: Sequence[int]) -> Var:
    original = a.shape
    return a.tape.record("reshape", [a], a.value.reshape(tuple(shape)), lambda g: (g.reshape(original),))


def broadcast_to(a: Var, shape: Sequence[int]) -> Var:
    shape = tuple(shape)
    T.check_compatible("broadcast_to", a.shape, shape)
    value = np.broadcast_to(a.value, shape)
    return a.tape.record("broadcast_to", [a], value, lambda g: (_unbroadcast(g, a.shape),))


def concat(parts: Sequence[Var], axis: int = -1) -> Var:
    if not parts:
        raise ContractError("concat: empty input")
    values = [p.value for p in parts]
    try:
        value = np.concatenate(values, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[v.shape for v in values]}") from exc
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]
    return parts[0].tape.record("concat", list(parts), value, lambda g: tuple(np.split(g, splits, axis=axis)))


def getitem(a: Var, key) -> Var:
    """Базовый срез (slice / int); повторяющиеся индексы не поддерживаются."""
    shape, dtype = a.shape, a.dtype

    def vjp(g):
        out = np.zeros(shape, dtype=dtype)
        out[key] += g
        return (out,)

    return a.tape.record("getitem", [a], a.value[key], vjp)


def pad(a: Var, widths: Sequence[Tuple[int, int]]) -> Var:
    """Zero-padding; обратный проход: обрезка."""
    widths = tuple(tuple(w) for w in widths)
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return a.tape.record("pad", [a], np.pad(a.value, widths), lambda g: (g[crop],))


def gather_last(table: Var, idx: np.ndarray) -> Var:
    """table[..., idx]: поиск в таблице по целочисленному индексу (RPB)."""
    tv = table.value
    lead = tv.shape[:-1]
    size = tv.shape[-1]

    def vjp(g):
        flat_g = g.reshape(-1, idx.size)
        out = np.stack([np.bincount(idx.ravel(), weights=row, minlength=size) for row in flat_g])
        return (out.reshape(lead + (size,)).astype(tv.dtype),)

    return table.tape.record("gather", [table], tv[..., idx], vjp)


# ---------------------------------------------------------------------------
# Нормировки
# ---------------------------------------------------------------------------


def softmax_rows(a: Var) -> Var:
    y = T.softmax_rows(a.value)
    return a.tape.record("softmax", [a], y, lambda g: (y * (g - np.sum(g * y, axis=-1, keepdims=True)),))


def layer_norm(x: Var, gamma: Var, beta: Var, eps: float = 1e-6) -> Var:
    """LayerNorm по канальной (последней) оси с обучаемым аффинным преобразованием."""
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv_std
    value = xhat * gamma.value + beta.value
    reduce_axes = tuple(range(xv.ndim - 1))

    def vjp(g):
        dxhat = g * gamma.value
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx.astype(xv.dtype), np.sum(g * xhat, axis=reduce_axes), np.sum(g, axis=reduce_axes)

    return x.tape.record("layer_norm", [x, gamma, beta], value.astype(xv.dtype), vjp)


# ---------------------------------------------------------------------------
# Свёртки (NHWC, нечётное ядро, zero-padding "same")
# ---------------------------------------------------------------------------


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    # [B, H, W, C, k, k]
    return sliding_window_view(xp, (k, k), axis=(1, 2))


def conv2d(x: Var, w: Var, b: Var | None = None) -> Var:
    """Полная свёртка: x [B,H,W,Ci], w [k,k,Ci,Co], b [Co] → [B,H,W,Co]."""
    xv, wv = x.value, w.value
    k = wv.shape[0]
    if xv.ndim != 4 or wv.ndim != 4 or wv.shape[1] != k or k % 2 == 0 or wv.shape[2] != xv.shape[-1]:
        raise DimensionError.mismatch("conv2d", xv.shape, wv.shape)
    win = _windows(xv, k)
    value = np.tensordot(win, wv, axes=([3, 4, 5], [2, 0, 1]))
    if b is not None:
        value = value + b.value
    w_flip = wv[::-1, ::-1]

    def vjp(g):
        g_win = _windows(g, k)
        dx = np.tensordot(g_win, w_flip, axes=([3, 4, 5], [3, 0, 1]))
        dw = np.tensordot(win, g, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
        grads = [dx.astype(xv.dtype), dw.astype(wv.dtype)]
        if b is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return grads

    inputs = [x, w] + ([b] if b is not None else [])
    return x.tape.record("conv2d", inputs, value.astype(xv.dtype), vjp)


def depthwise_conv2d(x: Var, w: Var, b: Var | None = None) -> Var:
    """Depth-wise свёртка: x [B,H,W,C], w [k,k,C], b [C] → [B,H,W,C]."""
    xv, wv = x.value, w.value
    k = wv.shape[0]
    if xv.ndim != 4 or wv.ndim != 3 or wv.shape[1] != k or k % 2 == 0 or wv.shape[2] != xv.shape[-1]:
        raise DimensionError.mismatch("depthwise_conv2d", xv.shape, wv.shape)
    win = _windows(xv, k)
    value = np.einsum("bhwcuv,uvc->bhwc", win, wv)
    if b is not None:
        value = value + b.value
    w_flip = wv[::-1, ::-1]

    def vjp(g):
        dx = np.einsum("bhwcuv,uvc->bhwc", _windows(g, k), w_flip)
        dw = np.einsum("bhwcuv,bhwc->uvc", win, g)
        grads = [dx.astype(xv.dtype), dw.astype(wv.dtype)]
        if b is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return grads

    inputs = [x, w] + ([b] if b is not None else [])
    return x.tape.record("depthwise_conv2d", inputs, value.astype(xv.dtype), vjp)


__all__ = [
    "lift",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "gelu",
    "sin",
    "abs_",
    "sum_all",
    "mean_all",
    "matmul",
    "swap_last",
    "transpose",
    "reshape",
    "broadcast_to",
    "concat",
    "getitem",
    "pad",
    "gather_last",
    "softmax_rows",
    "layer_norm",
    "conv2d",
    "depthwise_conv2d",
]
