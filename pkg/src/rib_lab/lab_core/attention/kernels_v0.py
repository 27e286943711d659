"""Два взаимозаменяемых ядра оконного внимания.

attend_naive - эталон, материализует S и P (N×N), поддерживает аддитивный bias (RPB).
attend_streaming - онлайн-softmax по блокам ключей, состояние (m, l, acc) на строку,
                   буфер N×N не создаётся никогда. Bias должен уже сидеть в Q/K.

Q у обоих ядер приходит уже отмасштабированным (1/√D_head и 1/√R вшиты в Q).
Все тензоры: [..., N, d]; ведущие оси (окна, головы) обрабатываются пакетно.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from rib_lab.lab_core.autodiff import ops_v0 as ops
from rib_lab.lab_core.autodiff.tape_v0 import Var
from rib_lab.lab_core.bench.instrument_v0 import AllocationMeter
from rib_lab.lab_core.logging.logging_v1 import get_logger
from rib_lab.lab_core.tensor import tensor_v0 as T
from rib_lab.lab_core.tensor.errors_v0 import ConfigError, DimensionError, UnsupportedConfigurationError
from rib_lab.lab_core.tensor.tensor_v0 import Tensor


logger = get_logger("attention")

BIASES = ("none", "rpb", "rope", "rib")
KERNELS = ("naive", "streaming")
DEFAULT_TILE = 64


@dataclass(frozen=True)
class AttentionConfig:
    """Параметры оконного внимания одного слоя.

    tile / q_tile: размеры блоков ключей и запросов потокового ядра
    (None → min(N, 64)). threads: число потоков по оси окон.
    """

    heads: int
    D: int
    R: int = 0
    bias: str = "none"
    kernel: str = "streaming"
    tile: Optional[int] = None
    q_tile: Optional[int] = None
    threads: int = 1

    def __post_init__(self) -> None:
        if self.bias not in BIASES:
            raise ConfigError(f"Unknown attention bias: {self.bias!r}")
        if self.kernel not in KERNELS:
            raise ConfigError(f"Unknown attention kernel: {self.kernel!r}")
        if self.heads < 1 or self.D % self.heads != 0:
            raise ConfigError(f"D={self.D} must be divisible by heads={self.heads}")
        if self.tile is not None and self.tile < 1:
            raise ConfigError(f"tile must be >= 1, got {self.tile}")
        if self.q_tile is not None and self.q_tile < 1:
            raise ConfigError(f"q_tile must be >= 1, got {self.q_tile}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.bias == "rib" and self.R < 1:
            raise ConfigError("bias=rib requires rank R >= 1")
        if self.bias == "rpb" and self.kernel != "naive":
            raise UnsupportedConfigurationError(
                "bias=rpb needs the materialized score matrix; use kernel=naive"
            )

    @property
    def D_head(self) -> int:
        return self.D // self.heads

    @property
    def d_q(self) -> int:
        """Ширина Q/K, подаваемых в ядро."""
        return self.D_head + self.R if self.bias == "rib" else self.D_head

    def resolved_tile(self, N: int) -> int:
        return self.tile if self.tile is not None else min(N, DEFAULT_TILE)

    def resolved_q_tile(self, N: int) -> int:
        return self.q_tile if self.q_tile is not None else min(N, DEFAULT_TILE)


@dataclass
class AttentionStats:
    """Состояние онлайн-softmax и счётчики одного вызова ядра.

    m, l: итоговые running max и знаменатель на строку, [..., N].
    peak_aux_scalars: пик одновременно живых вспомогательных скаляров.
    score_scalars: крупнейший буфер логитов (h·N² у naive, h·q_tile·tile у streaming).
    flops: 2·N²·(d_q + d_v) на каждую голову/окно.
    """

    m: Tensor
    l: Tensor
    peak_aux_scalars: int
    score_scalars: int
    flops: int

    @property
    def logsumexp(self) -> Tensor:
        with np.errstate(divide="ignore"):
            return self.m + np.log(self.l)


def attention_flops(lead: int, N: int, d_q: int, d_v: int) -> int:
    return 2 * lead * N * N * (d_q + d_v)


def _check_qkv(Q: np.ndarray, K: np.ndarray, V: np.ndarray) -> None:
    if Q.ndim < 2 or Q.shape != K.shape:
        raise DimensionError.mismatch("attention Q/K", Q.shape, K.shape)
    if V.shape[:-1] != K.shape[:-1]:
        raise DimensionError.mismatch("attention K/V", K.shape, V.shape)
    T.check_finite_inputs("attention", Q, K, V)


def _key_mask(mask: Optional[np.ndarray], lead: Tuple[int, ...], N: int) -> Optional[np.ndarray]:
    """Маска допустимых ключей, приведённая к [..., N] (True: реальный токен).

    Для окон [nW, heads, N, d] маску окон [nW, N] передают как [nW, 1, N].
    """
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    try:
        return np.broadcast_to(mask, lead + (N,))
    except ValueError as exc:
        raise DimensionError.mismatch("attention mask", mask.shape, lead + (N,)) from exc


# ---------------------------------------------------------------------------
# Naive
# ---------------------------------------------------------------------------


def attend_naive(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    mask: Optional[np.ndarray] = None,
    bias: Optional[Tensor] = None,
) -> Tuple[Tensor, Tensor, Tensor, AttentionStats]:
    """Эталонное внимание: S = QKᵀ + B, P = softmax(S), O = PV.

    Замаскированные ключи получают логит −inf; строка без единого
    допустимого ключа даёт нулевой выход.

    Returns
    -------
    O, S, P, AttentionStats
    """
    _check_qkv(Q, K, V)
    N = Q.shape[-2]
    lead = Q.shape[:-2]
    meter = AllocationMeter()

    S = meter.track(T.matmul(Q, np.swapaxes(K, -1, -2)), tag="scores")
    if bias is not None:
        S = T.add(S, bias).astype(Q.dtype, copy=False)
    key_mask = _key_mask(mask, lead, N)
    if key_mask is not None:
        S = np.where(key_mask[..., None, :], S, -np.inf).astype(Q.dtype, copy=False)
    P = meter.track(T.softmax_rows(S), tag="probs")
    O = T.matmul(P, V)

    m = np.max(S, axis=-1)
    with np.errstate(invalid="ignore"):
        l = np.where(np.isfinite(m), np.sum(np.exp(S - np.where(np.isfinite(m), m, 0)[..., None]), axis=-1), 0.0)
    stats = AttentionStats(
        m=m,
        l=l.astype(Q.dtype),
        peak_aux_scalars=meter.peak,
        score_scalars=S.size,
        flops=attention_flops(int(np.prod(lead, dtype=np.int64)), N, Q.shape[-1], V.shape[-1]),
    )
    return O, S, P, stats


# ---------------------------------------------------------------------------
# Streaming (online softmax)
# ---------------------------------------------------------------------------


def _stream_rows(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    key_mask: Optional[np.ndarray],
    tile: int,
    q_tile: int,
    meter: AllocationMeter,
    out: np.ndarray,
    m_out: np.ndarray,
    l_out: np.ndarray,
) -> None:
    """Один проход по блокам ключей для каждого блока запросов; Q/K/V: [B, N, d]."""
    B, N, _ = Q.shape
    dv = V.shape[-1]
    dtype = Q.dtype

    for q0 in range(0, N, q_tile):
        q1 = min(q0 + q_tile, N)
        q = Q[:, q0:q1]
        m = meter.allocate((B, q1 - q0), dtype, tag="row_max", fill=-np.inf)
        l = meter.allocate((B, q1 - q0), dtype, tag="row_denom", fill=0.0)
        acc = meter.allocate((B, q1 - q0, dv), dtype, tag="accumulator", fill=0.0)

        for k0 in range(0, N, tile):
            k1 = min(k0 + tile, N)
            s = meter.track(np.matmul(q, np.swapaxes(K[:, k0:k1], -1, -2)), tag="score_tile")
            if key_mask is not None:
                s[~np.broadcast_to(key_mask[:, None, k0:k1], s.shape)] = -np.inf

            m_new = np.maximum(m, s.max(axis=-1))
            # строки, где пока нет ни одного допустимого ключа, сдвигаем на 0
            shift = np.where(np.isfinite(m_new), m_new, 0.0).astype(dtype)
            p = meter.track(np.exp(s - shift[..., None]), tag="prob_tile")
            alpha = np.exp(m - shift)

            l *= alpha
            l += p.sum(axis=-1)
            acc *= alpha[..., None]
            acc += np.matmul(p, V[:, k0:k1])
            m[...] = m_new
            meter.release(s, p)

        with np.errstate(invalid="ignore", divide="ignore"):
            out[:, q0:q1] = np.where(l[..., None] > 0, acc / l[..., None], 0.0)
        m_out[:, q0:q1] = m
        l_out[:, q0:q1] = l
        meter.release(m, l, acc)


def _streaming_forward(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    mask: Optional[np.ndarray],
    tile: int,
    q_tile: int,
    threads: int,
) -> Tuple[Tensor, AttentionStats]:
    _check_qkv(Q, K, V)
    lead = Q.shape[:-2]
    N, dq = Q.shape[-2:]
    dv = V.shape[-1]
    batch = int(np.prod(lead, dtype=np.int64))

    q = Q.reshape(batch, N, dq)
    k = K.reshape(batch, N, dq)
    v = V.reshape(batch, N, dv)
    key_mask = _key_mask(mask, lead, N)
    km = None if key_mask is None else key_mask.reshape(batch, N)

    meter = AllocationMeter()
    # состояние на строку живёт весь вызов: линейно по N
    out = meter.allocate((batch, N, dv), Q.dtype, tag="output", fill=0.0)
    m_out = meter.allocate((batch, N), Q.dtype, tag="row_max_out")
    l_out = meter.allocate((batch, N), Q.dtype, tag="row_denom_out")

    def run(sl: slice) -> None:
        _stream_rows(
            q[sl], k[sl], v[sl], None if km is None else km[sl], tile, q_tile, meter, out[sl], m_out[sl], l_out[sl]
        )

    if threads <= 1 or batch <= 1:
        run(slice(0, batch))
    else:
        # окна независимы: каждый поток пишет в свой непересекающийся срез
        bounds = np.linspace(0, batch, min(threads, batch) + 1).astype(int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]))

    stats = AttentionStats(
        m=m_out.reshape(lead + (N,)),
        l=l_out.reshape(lead + (N,)),
        peak_aux_scalars=meter.peak,
        score_scalars=meter.by_tag.get("score_tile", 0),
        flops=attention_flops(batch, N, dq, dv),
    )
    return out.reshape(lead + (N, dv)), stats


def attend_streaming(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    mask: Optional[np.ndarray] = None,
    cfg: Optional[AttentionConfig] = None,
) -> Tuple[Tensor, AttentionStats]:
    """Точное внимание без материализации N×N.

    Raises
    ------
    UnsupportedConfigurationError
        Для bias=rpb: аддитивную таблицу некуда вшить в Q/K.
    """
    N = Q.shape[-2]
    if cfg is None:
        tile = q_tile = min(N, DEFAULT_TILE)
        threads = 1
    else:
        if cfg.bias == "rpb":
            raise UnsupportedConfigurationError("streaming kernel does not support bias=rpb")
        tile, q_tile, threads = cfg.resolved_tile(N), cfg.resolved_q_tile(N), cfg.threads
    return _streaming_forward(Q, K, V, mask, tile, q_tile, threads)


# ---------------------------------------------------------------------------
# Дифференцируемые версии
# ---------------------------------------------------------------------------


def attend_naive_ad(
    q: Var, k: Var, v: Var, mask: Optional[np.ndarray] = None, bias: Optional[Var] = None
) -> Var:
    """Naive-ядро из примитивов ленты (градиент через softmax_rows)."""
    s = ops.matmul(q, ops.swap_last(k))
    if bias is not None:
        s = s + bias
    key_mask = _key_mask(mask, q.shape[:-2], q.shape[-2])
    if key_mask is not None:
        neg = np.where(key_mask[..., None, :], 0.0, -np.inf).astype(q.dtype)
        s = s + q.tape.constant(np.broadcast_to(neg, s.shape))
    return ops.matmul(ops.softmax_rows(s), v)


def _streaming_backward(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    O: np.ndarray,
    dO: np.ndarray,
    lse: np.ndarray,
    key_mask: Optional[np.ndarray],
    tile: int,
    q_tile: int,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Блочный обратный проход по сохранённому logsumexp; все тензоры [B, N, d]."""
    N = Q.shape[1]
    dQ = np.zeros_like(Q)
    dK = np.zeros_like(K)
    dV = np.zeros_like(V)
    delta = np.sum(dO * O, axis=-1)
    has_keys = np.isfinite(lse)
    lse_safe = np.where(has_keys, lse, 0.0)

    for q0 in range(0, N, q_tile):
        q1 = min(q0 + q_tile, N)
        q, do = Q[:, q0:q1], dO[:, q0:q1]
        for k0 in range(0, N, tile):
            k1 = min(k0 + tile, N)
            k, v = K[:, k0:k1], V[:, k0:k1]
            s = np.matmul(q, np.swapaxes(k, -1, -2))
            p = np.exp(s - lse_safe[:, q0:q1, None])
            p *= has_keys[:, q0:q1, None]
            if key_mask is not None:
                p *= key_mask[:, None, k0:k1]
            dV[:, k0:k1] += np.matmul(np.swapaxes(p, -1, -2), do)
            dp = np.matmul(do, np.swapaxes(v, -1, -2))
            ds = p * (dp - delta[:, q0:q1, None])
            dQ[:, q0:q1] += np.matmul(ds, k)
            dK[:, k0:k1] += np.matmul(np.swapaxes(ds, -1, -2), q)
    return dQ, dK, dV


def attend_streaming_ad(
    q: Var, k: Var, v: Var, mask: Optional[np.ndarray] = None, cfg: Optional[AttentionConfig] = None
) -> Var:
    """Потоковое ядро как одна операция ленты с собственным блочным backward."""
    O, stats = attend_streaming(q.value, k.value, v.value, mask, cfg)
    lead = q.shape[:-2]
    N, dq = q.shape[-2:]
    dv = v.shape[-1]
    batch = int(np.prod(lead, dtype=np.int64))
    tile = cfg.resolved_tile(N) if cfg is not None else min(N, DEFAULT_TILE)
    q_tile = cfg.resolved_q_tile(N) if cfg is not None else min(N, DEFAULT_TILE)
    key_mask = _key_mask(mask, lead, N)
    km = None if key_mask is None else key_mask.reshape(batch, N)
    lse = stats.logsumexp.reshape(batch, N)
    qv, kv, vv = q.value, k.value, v.value

    def vjp(g):
        dQ, dK, dV = _streaming_backward(
            qv.reshape(batch, N, dq),
            kv.reshape(batch, N, dq),
            vv.reshape(batch, N, dv),
            O.reshape(batch, N, dv),
            g.reshape(batch, N, dv),
            lse,
            km,
            tile,
            q_tile,
        )
        return dQ.reshape(qv.shape), dK.reshape(kv.shape), dV.reshape(vv.shape)

    return q.tape.record("attend_streaming", [q, k, v], O, vjp)


def attend_ad(
    q: Var,
    k: Var,
    v: Var,
    cfg: AttentionConfig,
    mask: Optional[np.ndarray] = None,
    bias: Optional[Var] = None,
) -> Var:
    """Выбор ядра по cfg.kernel (bias только для naive)."""
    if cfg.kernel == "naive":
        return attend_naive_ad(q, k, v, mask, bias)
    if bias is not None:
        raise UnsupportedConfigurationError("streaming kernel does not accept an additive bias")
    return attend_streaming_ad(q, k, v, mask, cfg)


__all__ = [
    "BIASES",
    "KERNELS",
    "AttentionConfig",
    "AttentionStats",
    "attention_flops",
    "attend_naive",
    "attend_streaming",
    "attend_naive_ad",
    "attend_streaming_ad",
    "attend_ad",
]
