"""Сборка Q/K/V для ядра внимания с учётом варианта позиционного смещения.

rib: Q = [Q_c/√D_head, Q_p/√R], K = [K_c, K_p], смещение Q_pK_pᵀ/√R
     появляется в том же скалярном произведении, что и контентный член;
rope: поворот Q_c, K_c по координатам окна;
none / rpb: обычные проекции (rpb добавляется в naive-ядре как B).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from rib_lab.lab_core.attention.kernels_v0 import AttentionConfig
from rib_lab.lab_core.autodiff import ops_v0 as ops
from rib_lab.lab_core.autodiff.tape_v0 import Var
from rib_lab.lab_core.logging.logging_v1 import get_logger
from rib_lab.lab_core.posbias.geometry_v0 import WindowGeometry
from rib_lab.lab_core.posbias.rope_v0 import RoPEConfig, rope_rotate, rope_rotate_ad
from rib_lab.lab_core.tensor import tensor_v0 as T
from rib_lab.lab_core.tensor.errors_v0 import DimensionError
from rib_lab.lab_core.tensor.tensor_v0 import Tensor, resolve_dtype


logger = get_logger("attention")


def augmented_width_aligned(D_head: int, R: int, multiple: int = 8) -> bool:
    """Ширина D_head + R кратна 8: правило выбора R для всех пресетов."""
    return (D_head + R) % multiple == 0


@dataclass(frozen=True, eq=False)
class QKVWeights:
    """Проекции W_q, W_k, W_v [D, D] (без смещений)."""

    W_q: Tensor
    W_k: Tensor
    W_v: Tensor

    @classmethod
    def init(cls, D: int, rng: np.random.Generator, dtype: str | np.dtype = "f32") -> "QKVWeights":
        dt = resolve_dtype(dtype)
        a = 1.0 / math.sqrt(D)
        return cls(*(rng.uniform(-a, a, size=(D, D)).astype(dt) for _ in range(3)))

    def to_dict(self, prefix: str = "") -> Dict[str, Tensor]:
        return {f"{prefix}W_q": self.W_q, f"{prefix}W_k": self.W_k, f"{prefix}W_v": self.W_v}


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., N, D] → [..., heads, N, D/heads]."""
    *lead, N, D = x.shape
    return np.swapaxes(x.reshape(*lead, N, heads, D // heads), -2, -3)


def merge_heads(x: Tensor) -> Tensor:
    """[..., heads, N, D_head] → [..., N, heads·D_head]."""
    *lead, h, N, d = x.shape
    return np.swapaxes(x, -2, -3).reshape(*lead, N, h * d)


def split_heads_ad(x: Var, heads: int) -> Var:
    *lead, N, D = x.shape
    y = ops.reshape(x, (*lead, N, heads, D // heads))
    axes = list(range(y.ndim))
    axes[-2], axes[-3] = axes[-3], axes[-2]
    return ops.transpose(y, axes)


def merge_heads_ad(x: Var) -> Var:
    *lead, h, N, d = x.shape
    axes = list(range(x.ndim))
    axes[-2], axes[-3] = axes[-3], axes[-2]
    return ops.reshape(ops.transpose(x, axes), (*lead, N, h * d))


def _check_pos(pos: Optional[Tuple], cfg: AttentionConfig, N: int) -> None:
    if pos is None:
        raise DimensionError("bias=rib requires positional tokens (Q_p, K_p)")
    expected = (cfg.heads, N, cfg.R)
    for name, t in zip(("Q_p", "K_p"), pos):
        if tuple(t.shape[-3:]) != expected:
            raise DimensionError(f"{name}: expected trailing shape {expected}, got {tuple(t.shape)}")


def build_augmented_qk(
    X: Tensor,
    weights: QKVWeights,
    geom: WindowGeometry,
    cfg: AttentionConfig,
    pos: Optional[Tuple[Tensor, Tensor]] = None,
    rope: Optional[RoPEConfig] = None,
    positional_scale: Optional[float] = None,
) -> Tuple[Tensor, Tensor, Tensor]:
    """Q, K, V [..., heads, N, d] для ядра; Q уже отмасштабирован.

    Parameters
    ----------
    X : Tensor[..., N, D]
        Токены окна (после нормировки).
    pos : (Q_p, K_p) | None
        Позиционные токены [heads, N, R] для bias=rib.
    positional_scale : float | None
        Масштаб позиционной половины Q; по умолчанию 1/√R.
    """
    N = X.shape[-2]
    if N != geom.N:
        raise DimensionError(f"tokens N={N} != geometry N={geom.N}")
    if X.shape[-1] != cfg.D:
        raise DimensionError(f"token width {X.shape[-1]} != D={cfg.D}")

    q_c = split_heads(T.matmul(X, weights.W_q), cfg.heads)
    k_c = split_heads(T.matmul(X, weights.W_k), cfg.heads)
    v = split_heads(T.matmul(X, weights.W_v), cfg.heads)
    content_scale = 1.0 / math.sqrt(cfg.D_head)

    if cfg.bias == "rib":
        _check_pos(pos, cfg, N)
        q_p, k_p = pos
        ps = 1.0 / math.sqrt(cfg.R) if positional_scale is None else positional_scale
        lead = q_c.shape[:-1]
        q = np.concatenate([q_c * content_scale, np.broadcast_to(q_p * ps, lead + (cfg.R,))], axis=-1)
        k = np.concatenate([k_c, np.broadcast_to(k_p, lead + (cfg.R,))], axis=-1)
        return q.astype(X.dtype, copy=False), k.astype(X.dtype, copy=False), v

    if cfg.bias == "rope":
        rope = rope or RoPEConfig(D_head=cfg.D_head)
        q_c = rope_rotate(q_c, geom, rope)
        k_c = rope_rotate(k_c, geom, rope)

    return (q_c * content_scale).astype(X.dtype, copy=False), k_c, v


def build_augmented_qk_ad(
    x: Var,
    W_q: Var,
    W_k: Var,
    W_v: Var,
    geom: WindowGeometry,
    cfg: AttentionConfig,
    pos: Optional[Tuple[Var, Var]] = None,
    rope: Optional[RoPEConfig] = None,
) -> Tuple[Var, Var, Var]:
    """Дифференцируемая версия build_augmented_qk (градиент течёт и в Q_p/K_p)."""
    N = x.shape[-2]
    if N != geom.N:
        raise DimensionError(f"tokens N={N} != geometry N={geom.N}")

    q_c = split_heads_ad(ops.matmul(x, W_q), cfg.heads)
    k_c = split_heads_ad(ops.matmul(x, W_k), cfg.heads)
    v = split_heads_ad(ops.matmul(x, W_v), cfg.heads)
    content_scale = 1.0 / math.sqrt(cfg.D_head)

    if cfg.bias == "rib":
        _check_pos(pos, cfg, N)
        q_p, k_p = pos
        lead = q_c.shape[:-1]
        q_p = ops.broadcast_to(ops.scale(q_p, 1.0 / math.sqrt(cfg.R)), lead + (cfg.R,))
        k_p = ops.broadcast_to(k_p, lead + (cfg.R,))
        q = ops.concat([ops.scale(q_c, content_scale), q_p], axis=-1)
        k = ops.concat([k_c, k_p], axis=-1)
        return q, k, v

    if cfg.bias == "rope":
        rope = rope or RoPEConfig(D_head=cfg.D_head)
        q_c = rope_rotate_ad(q_c, geom, rope)
        k_c = rope_rotate_ad(k_c, geom, rope)

    return ops.scale(q_c, content_scale), k_c, v


def fused_split_gap(
    Q_c: Tensor,
    K_c: Tensor,
    Q_p: Tensor,
    K_p: Tensor,
    positional_scale: Optional[float] = None,
) -> float:
    """max |[Q_c/√D, Q_p·s][K_c, K_p]ᵀ − (Q_cK_cᵀ/√D + Q_pK_pᵀ/√R)|.

    Слитный путь против раздельного; при s = 1/√R это алгебраическое тождество.
    """
    D_head = Q_c.shape[-1]
    R = Q_p.shape[-1]
    ps = 1.0 / math.sqrt(R) if positional_scale is None else positional_scale
    cs = 1.0 / math.sqrt(D_head)

    q = np.concatenate([Q_c * cs, Q_p * ps], axis=-1).astype(Q_c.dtype, copy=False)
    k = np.concatenate([K_c, K_p], axis=-1)
    fused = np.matmul(q, np.swapaxes(k, -1, -2))

    content = np.matmul(Q_c, np.swapaxes(K_c, -1, -2)) * cs
    bias = np.matmul(Q_p, np.swapaxes(K_p, -1, -2)) / math.sqrt(R)
    return float(np.max(np.abs(fused - (content + bias)), initial=0.0))


__all__ = [
    "augmented_width_aligned",
    "QKVWeights",
    "split_heads",
    "merge_heads",
    "split_heads_ad",
    "merge_heads_ad",
    "build_augmented_qk",
    "build_augmented_qk_ad",
    "fused_split_gap",
]
