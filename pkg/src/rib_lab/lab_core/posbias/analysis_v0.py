"""Диагностика позиционных смещений.

- усреднение карты смещений по одинаковому 2D-сдвигу (таблица dy, dx, mean_bias);
- подгонка RIB под заданную матрицу смещений градиентным спуском;
- игрушечный пример на шахматной раскладке двух ортогональных векторов:
  RoPE портит контентный член, RIB оставляет его побитово прежним.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np
import pandas as pd

from rib_lab.lab_core.attention.augmented_v0 import QKVWeights, build_augmented_qk
from rib_lab.lab_core.attention.kernels_v0 import AttentionConfig, attend_naive
from rib_lab.lab_core.autodiff import ops_v0 as ops
from rib_lab.lab_core.autodiff.tape_v0 import Tape, backward
from rib_lab.lab_core.logging.logging_v1 import get_logger
from rib_lab.lab_core.posbias.geometry_v0 import WindowGeometry
from rib_lab.lab_core.posbias.rib_v0 import RIBParams, rib_positional_tokens, rib_tokens_on_tape
from rib_lab.lab_core.posbias.rope_v0 import RoPEConfig, rope_rotate
from rib_lab.lab_core.posbias.rpb_v0 import RPBTable, relative_position_index, rpb_bias_matrix, rpb_table_size
from rib_lab.lab_core.tensor.errors_v0 import DimensionError, NumericError
from rib_lab.lab_core.tensor.tensor_v0 import Tensor


logger = get_logger("posbias.analysis")


# ---------------------------------------------------------------------------
# Усреднение по смещению
# ---------------------------------------------------------------------------


def offset_group_sizes(M: int) -> np.ndarray:
    """Число пар токенов для каждого смещения: (M−|Δy|)(M−|Δx|), [(2M−1)²]."""
    d = np.arange(-(M - 1), M)
    per_axis = M - np.abs(d)
    return np.outer(per_axis, per_axis).ravel()


def bias_by_offset(S_p: Tensor, M: int) -> Tensor:
    """Среднее S_p[i, j] по группам с одинаковым (Δy, Δx).

    Parameters
    ----------
    S_p : Tensor[N, N]
        Карта смещений одной головы.
    M : int
        Сторона окна, N = M².

    Returns
    -------
    Tensor[(2M−1)²]
        Индексация совпадает с таблицей RPB.
    """
    N = M * M
    if S_p.shape != (N, N):
        raise DimensionError(f"bias_by_offset: expected [{N}, {N}], got {S_p.shape}")
    idx = relative_position_index(M).ravel()
    size = rpb_table_size(M)
    sums = np.bincount(idx, weights=np.asarray(S_p, dtype=np.float64).ravel(), minlength=size)
    counts = np.bincount(idx, minlength=size)
    return (sums / counts).astype(S_p.dtype)


def offset_table_frame(S_p: Tensor, M: int) -> pd.DataFrame:
    """Таблица dy, dx, mean_bias: одна строка на смещение."""
    means = bias_by_offset(S_p, M)
    k = np.arange(means.size)
    return pd.DataFrame(
        {
            "dy": k // (2 * M - 1) - (M - 1),
            "dx": k % (2 * M - 1) - (M - 1),
            "mean_bias": means.astype(np.float64),
        }
    )


def write_offset_table(S_p: Tensor, M: int, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    offset_table_frame(S_p, M).to_csv(path, index=False)
    logger.info("offset_table_written", extra={"event": "offset_table_written", "path": str(path), "M": M})
    return path


def rib_bias_map(geom: WindowGeometry, p: RIBParams) -> Tensor:
    """S_p = Q_p K_pᵀ / √R для каждой головы, [heads, N, N]."""
    q_p, k_p = rib_positional_tokens(geom, p)
    return np.matmul(q_p, np.swapaxes(k_p, -1, -2)) / math.sqrt(p.R)


# ---------------------------------------------------------------------------
# Подгонка RIB под матрицу смещений
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    params: RIBParams
    mse: float
    history: List[float] = field(default_factory=list)


def _fit_loss(tape: Tape, geom: WindowGeometry, p: RIBParams, target: np.ndarray):
    q_p, k_p = rib_tokens_on_tape(tape, geom, p, prefix="")
    s = ops.scale(ops.matmul(q_p, ops.swap_last(k_p)), 1.0 / math.sqrt(p.R))
    diff = s - tape.constant(target)
    return ops.mean_all(ops.mul(diff, diff))


def fit_rib_to_bias(
    target: Tensor,
    p0: RIBParams,
    geom: WindowGeometry,
    steps: int = 2000,
    lr: float = 1.0,
    log_every: int = 0,
) -> FitResult:
    """Градиентный спуск (без момента) на mean((Q_pK_pᵀ/√R − B)²).

    Raises
    ------
    DimensionError
        Если target не [heads, N, N] для данных p0 и geom.
    NumericError
        Если loss стал не конечным (с номером шага).
    """
    expected = (p0.heads, geom.N, geom.N)
    if target.shape != expected:
        raise DimensionError(f"fit target: expected {expected}, got {target.shape}")
    target = np.asarray(target, dtype=p0.dtype)
    coords = geom.coords.astype(p0.dtype)
    geom = WindowGeometry(M=geom.M, coords=coords, order=geom.order)

    logger.info(
        "fit_start",
        extra={"event": "fit_start", "M": geom.M, "R": p0.R, "heads": p0.heads, "steps": steps, "lr": lr},
    )
    p = p0
    history: List[float] = []
    for step in range(steps):
        tape = Tape()
        loss = _fit_loss(tape, geom, p, target)
        value = float(loss.value)
        if not np.isfinite(value):
            raise NumericError("fit_rib_to_bias: loss is not finite", step=step)
        history.append(value)
        grads = backward(tape, loss)
        p = p.replace(**{name: (arr - lr * grads[name]).astype(arr.dtype) for name, arr in p.to_dict().items()})
        if log_every and step % log_every == 0:
            logger.info("fit_step", extra={"event": "fit_step", "step": step, "mse": value})

    final = float(_fit_loss(Tape(), geom, p, target).value)
    if not np.isfinite(final):
        raise NumericError("fit_rib_to_bias: loss is not finite", step=steps)
    logger.info("fit_done", extra={"event": "fit_done", "mse": final, "R": p.R})
    return FitResult(params=p, mse=final, history=history)


def fit_rib_to_rpb(
    target: RPBTable, p0: RIBParams, steps: int = 2000, lr: float = 1.0, dtype: str | np.dtype | None = None
) -> Tuple[RIBParams, float]:
    """Подогнать RIB под таблицу RPB; M и число голов обязаны совпадать."""
    if target.heads != p0.heads:
        raise DimensionError(f"fit_rib_to_rpb: heads {target.heads} != {p0.heads}")
    geom = WindowGeometry.square(target.M, dtype or p0.dtype)
    result = fit_rib_to_bias(rpb_bias_matrix(target), p0, geom, steps=steps, lr=lr)
    return result.params, result.mse


def gaussian_bump_bias(M: int, heads: int = 1, sigma: float = 1.5, dtype: str | np.dtype = "f64") -> Tensor:
    """Гладкое локальное смещение exp(−(Δy²+Δx²)/(2σ²)), σ в токенах, [heads, N, N]."""
    geom = WindowGeometry.square(M, dtype)
    dy, dx = geom.relative_offsets()
    bump = np.exp(-(dy**2 + dx**2) / (2.0 * sigma**2)).astype(geom.coords.dtype)
    return np.broadcast_to(bump, (heads,) + bump.shape).copy()


# ---------------------------------------------------------------------------
# Шахматная раскладка: RoPE и RIB
# ---------------------------------------------------------------------------


def checkerboard_tokens(M: int = 32, dim: int = 32, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Два случайных ортонормированных вектора, разложенные шахматкой по M×M.

    Returns
    -------
    tokens : ndarray[N, dim]
    labels : ndarray[N]
        номер вектора (0 или 1) у каждого токена
    """
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((dim, 2)))
    rows, cols = np.divmod(np.arange(M * M), M)
    labels = (rows + cols) % 2
    return basis.T[labels], labels


def rope_toy_logits(M: int = 32, dim: int = 32, seed: int = 0, use_rope: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Логиты S = QKᵀ при Q = K из шахматной раскладки, с RoPE или без."""
    tokens, labels = checkerboard_tokens(M, dim, seed)
    geom = WindowGeometry.square(M, "f64")
    q = tokens[None]
    if use_rope:
        q = rope_rotate(q, geom, RoPEConfig(D_head=dim))
    return (q @ np.swapaxes(q, -1, -2))[0], labels


@dataclass
class RIBToy:
    """Разложение логитов RIB на шахматной раскладке.

    S = content + bias; content посчитан без позиционных членов,
    bias = S − content. content_unchanged: контентные столбцы слитных Q/K
    побитово равны Q/K варианта без смещения.
    """

    S: np.ndarray
    content: np.ndarray
    bias: np.ndarray
    S_p: np.ndarray
    labels: np.ndarray
    content_unchanged: bool


def rib_toy_logits(
    M: int = 32,
    dim: int = 32,
    seed: int = 0,
    p: RIBParams | None = None,
    tokens: np.ndarray | None = None,
) -> RIBToy:
    """Логиты слитного RIB-внимания (одна голова, W_q = W_k = I) и их разложение.

    tokens: заменить шахматную раскладку своими токенами [M², dim]
    (метки остаются шахматными).
    """
    board, labels = checkerboard_tokens(M, dim, seed)
    X = board if tokens is None else np.asarray(tokens, dtype=np.float64)
    if X.shape != board.shape:
        raise DimensionError(f"rib toy tokens: expected {board.shape}, got {X.shape}")
    geom = WindowGeometry.square(M, "f64")
    p = p or RIBParams.init(4, 16, 8, 1, np.random.default_rng(seed + 1), "f64")
    eye = np.eye(dim)
    weights = QKVWeights(eye, eye, eye)

    plain_cfg = AttentionConfig(heads=1, D=dim, bias="none", kernel="naive")
    rib_cfg = AttentionConfig(heads=1, D=dim, R=p.R, bias="rib", kernel="naive")
    q0, k0, v = build_augmented_qk(X, weights, geom, plain_cfg)
    q, k, _ = build_augmented_qk(X, weights, geom, rib_cfg, pos=rib_positional_tokens(geom, p))

    content_unchanged = bool(np.array_equal(q[..., :dim], q0) and np.array_equal(k[..., :dim], k0))
    content = attend_naive(q0, k0, v)[1][0]
    S = attend_naive(q, k, v)[1][0]
    return RIBToy(
        S=S,
        content=content,
        bias=S - content,
        S_p=rib_bias_map(geom, p)[0],
        labels=labels,
        content_unchanged=content_unchanged,
    )


def same_content_logit_variance(S: np.ndarray, labels: np.ndarray) -> float:
    same = labels[:, None] == labels[None, :]
    return float(np.var(S[same]))


def logits_along_row(S: np.ndarray, M: int, step: int = 2) -> np.ndarray:
    """Логиты токена (0, 0) с токенами (0, k·step): одинаковый контент при чётном шаге."""
    return S[0, np.arange(0, M, step)]


def is_non_monotonic(values: np.ndarray, atol: float = 1e-9) -> bool:
    diffs = np.diff(np.asarray(values, dtype=np.float64))
    diffs = diffs[np.abs(diffs) > atol]
    return bool(np.any(diffs > 0) and np.any(diffs < 0))


__all__ = [
    "offset_group_sizes",
    "bias_by_offset",
    "offset_table_frame",
    "write_offset_table",
    "rib_bias_map",
    "FitResult",
    "fit_rib_to_bias",
    "fit_rib_to_rpb",
    "gaussian_bump_bias",
    "checkerboard_tokens",
    "rope_toy_logits",
    "RIBToy",
    "rib_toy_logits",
    "same_content_logit_variance",
    "logits_along_row",
    "is_non_monotonic",
]
