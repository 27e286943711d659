"""Строительные блоки слоя: пара токены ↔ карта, CLA-гейт, ConvFFN.

Параметры живут в плоском словаре name → массив; функции *_ad берут
словарь Var с ленты и префикс слоя.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional

import numpy as np

from rib_lab.lab_core.autodiff import ops_v0 as ops
from rib_lab.lab_core.autodiff.tape_v0 import Tape, Var
from rib_lab.lab_core.tensor.errors_v0 import ConfigError, DimensionError
from rib_lab.lab_core.tensor.tensor_v0 import Tensor, resolve_dtype


# ---------------------------------------------------------------------------
# FeatureMap: F и F⁻¹
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Карта признаков [B, H, W, D]; (H, W) переживают переход в токены."""

    tensor: Tensor

    def __post_init__(self) -> None:
        if self.tensor.ndim != 4:
            raise DimensionError(f"FeatureMap expects [B, H, W, D], got {self.tensor.shape}")

    @property
    def B(self) -> int:
        return self.tensor.shape[0]

    @property
    def H(self) -> int:
        return self.tensor.shape[1]

    @property
    def W(self) -> int:
        return self.tensor.shape[2]

    @property
    def D(self) -> int:
        return self.tensor.shape[3]

    def token_form(self) -> Tensor:
        """F: [B, H, W, D] → [B, N, D]."""
        return self.tensor.reshape(self.B, self.H * self.W, self.D)

    @classmethod
    def from_tokens(cls, tokens: Tensor, H: int, W: int) -> "FeatureMap":
        """F⁻¹: [B, N, D] → [B, H, W, D]; N обязан равняться H·W."""
        if tokens.ndim != 3 or tokens.shape[1] != H * W:
            raise DimensionError(f"tokens {tokens.shape} do not match map {H}x{W}")
        return cls(tokens.reshape(tokens.shape[0], H, W, tokens.shape[2]))


def to_tokens_ad(x: Var) -> Var:
    B, H, W, D = x.shape
    return ops.reshape(x, (B, H * W, D))


def to_map_ad(t: Var, H: int, W: int) -> Var:
    B, N, D = t.shape
    if N != H * W:
        raise DimensionError(f"tokens N={N} do not match map {H}x{W}")
    return ops.reshape(t, (B, H, W, D))


# ---------------------------------------------------------------------------
# Инициализация
# ---------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    a = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-a, a, size=shape).astype(dtype)


def init_linear(rng: np.random.Generator, d_in: int, d_out: int, dtype, prefix: str) -> Dict[str, Tensor]:
    return {f"{prefix}W": _uniform(rng, (d_in, d_out), d_in, dtype), f"{prefix}b": np.zeros(d_out, dtype=dtype)}


def init_layer_norm(D: int, dtype, prefix: str) -> Dict[str, Tensor]:
    return {f"{prefix}gamma": np.ones(D, dtype=dtype), f"{prefix}beta": np.zeros(D, dtype=dtype)}


def init_cla(rng: np.random.Generator, D: int, dtype: str | np.dtype = "f32", prefix: str = "") -> Dict[str, Tensor]:
    """CLAParams: DW 3×3 [3,3,D], PW [D,D] и их смещения."""
    dt = resolve_dtype(dtype)
    return {
        f"{prefix}dw": _uniform(rng, (3, 3, D), 9, dt),
        f"{prefix}dw_b": np.zeros(D, dtype=dt),
        f"{prefix}pw": _uniform(rng, (D, D), D, dt),
        f"{prefix}pw_b": np.zeros(D, dtype=dt),
    }


def ffn_hidden_width(D: int, expansion: float) -> int:
    return int(math.floor(expansion * D))


def init_conv_ffn(
    rng: np.random.Generator, D: int, expansion: float, dtype: str | np.dtype = "f32", prefix: str = ""
) -> Dict[str, Tensor]:
    dt = resolve_dtype(dtype)
    hidden = ffn_hidden_width(D, expansion)
    if hidden < 1:
        raise ConfigError(f"ConvFFN hidden width must be >= 1 (D={D}, expansion={expansion})")
    params = init_linear(rng, D, hidden, dt, f"{prefix}fc1.")
    params[f"{prefix}dw"] = _uniform(rng, (3, 3, hidden), 9, dt)
    params[f"{prefix}dw_b"] = np.zeros(hidden, dtype=dt)
    params.update(init_linear(rng, hidden, D, dt, f"{prefix}fc2."))
    return params


# ---------------------------------------------------------------------------
# CLA
# ---------------------------------------------------------------------------


def gate_ad(x: Var, H: int, W: int, P: Mapping[str, Var], prefix: str, variant: str = "cla") -> Optional[Var]:
    """Карта гейта G ∈ (0, 1) в токенной форме [B, N, D]; None для variant="none".

    cla: σ(PW(DW3×3(F⁻¹(X))));  pw: σ(PW(X)).
    """
    if variant == "none":
        return None
    if variant == "cla":
        xm = ops.depthwise_conv2d(to_map_ad(x, H, W), P[f"{prefix}dw"], P[f"{prefix}dw_b"])
        x = to_tokens_ad(xm)
    elif variant != "pw":
        raise ConfigError(f"Unknown gate variant: {variant!r}")
    return ops.sigmoid(ops.matmul(x, P[f"{prefix}pw"]) + P[f"{prefix}pw_b"])


def cla_gate_ad(
    x: Var,
    o: Var,
    H: int,
    W: int,
    P: Mapping[str, Var],
    gate_prefix: str,
    proj_prefix: str,
    variant: str = "cla",
) -> Var:
    """Y = (O ⊙ G) W_o + b_o; x: нормированные токены всей карты, o: выход внимания."""
    if x.shape != o.shape:
        raise DimensionError.mismatch("cla_gate", x.shape, o.shape)
    g = gate_ad(x, H, W, P, gate_prefix, variant)
    gated = o if g is None else ops.mul(o, g)
    return ops.matmul(gated, P[f"{proj_prefix}W"]) + P[f"{proj_prefix}b"]


def _constants(tape: Tape, params: Mapping[str, Tensor]) -> Dict[str, Var]:
    return {name: tape.constant(value) for name, value in params.items()}


def gate_values(X: Tensor, H: int, W: int, params: Mapping[str, Tensor], variant: str = "cla") -> Tensor:
    """G без градиентов (единицы для variant="none")."""
    if X.ndim != 3 or X.shape[1] != H * W:
        raise DimensionError(f"tokens {X.shape} do not match map {H}x{W}")
    tape = Tape()
    g = gate_ad(tape.constant(X), H, W, _constants(tape, params), "", variant)
    return np.ones_like(X) if g is None else g.value


def cla_gate(
    X: Tensor,
    O: Tensor,
    H: int,
    W: int,
    params: Mapping[str, Tensor],
    W_o: Tensor,
    b_o: Tensor,
    variant: str = "cla",
) -> Tensor:
    """Y = (O ⊙ G) W_o + b_o без градиентов; params: ключи dw, dw_b, pw, pw_b."""
    if X.ndim != 3 or X.shape[1] != H * W:
        raise DimensionError(f"tokens {X.shape} do not match map {H}x{W}")
    tape = Tape()
    P = _constants(tape, params)
    P["proj.W"] = tape.constant(W_o)
    P["proj.b"] = tape.constant(b_o)
    return cla_gate_ad(tape.constant(X), tape.constant(O), H, W, P, "", "proj.", variant).value


# ---------------------------------------------------------------------------
# ConvFFN
# ---------------------------------------------------------------------------


def conv_ffn_ad(x: Var, H: int, W: int, P: Mapping[str, Var], prefix: str) -> Var:
    """expand (PW) → DW 3×3 → GELU → project (PW); токены [B, N, D] → [B, N, D]."""
    h = ops.matmul(x, P[f"{prefix}fc1.W"]) + P[f"{prefix}fc1.b"]
    hm = ops.depthwise_conv2d(to_map_ad(h, H, W), P[f"{prefix}dw"], P[f"{prefix}dw_b"])
    h = ops.gelu(to_tokens_ad(hm))
    return ops.matmul(h, P[f"{prefix}fc2.W"]) + P[f"{prefix}fc2.b"]


def conv_ffn(X: Tensor, H: int, W: int, params: Mapping[str, Tensor]) -> Tensor:
    if X.ndim != 3 or X.shape[1] != H * W:
        raise DimensionError(f"tokens {X.shape} do not match map {H}x{W}")
    tape = Tape()
    return conv_ffn_ad(tape.constant(X), H, W, _constants(tape, params), "").value


def layer_norm_ad(x: Var, P: Mapping[str, Var], prefix: str) -> Var:
    return ops.layer_norm(x, P[f"{prefix}gamma"], P[f"{prefix}beta"], eps=1e-6)


__all__ = [
    "FeatureMap",
    "to_tokens_ad",
    "to_map_ad",
    "init_linear",
    "init_layer_norm",
    "init_cla",
    "ffn_hidden_width",
    "init_conv_ffn",
    "gate_ad",
    "cla_gate_ad",
    "gate_values",
    "cla_gate",
    "conv_ffn_ad",
    "conv_ffn",
    "layer_norm_ad",
]
