"""SST-micro: E_s (3×3 conv) → блоки → +F_s → 3×3 conv в r²·3 каналов → pixel shuffle
→ + nearest-neighbor(I_LR).

Слой (pre-norm):  X ← X + (O ⊙ G) W_o,  O = WindowAttention(LN(X)),  G = CLA(LN(X))
                  X ← X + ConvFFN(LN(X))
Блок:             `layers` слоёв + 3×3 conv + остаточная связь блока.
Сдвинутых окон нет: размер окна слоя берётся из циклического расписания.
"""
from __future__ import annotations

import math
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from rib_lab.lab_core.attention.augmented_v0 import build_augmented_qk_ad, merge_heads_ad
from rib_lab.lab_core.attention.kernels_v0 import attend_ad
from rib_lab.lab_core.attention.window_v0 import window_partition_ad, window_reverse_ad
from rib_lab.lab_core.autodiff import ops_v0 as ops
from rib_lab.lab_core.autodiff.tape_v0 import Tape, Var
from rib_lab.lab_core.blocks.layers_v0 import (
    cla_gate_ad,
    conv_ffn_ad,
    init_cla,
    init_conv_ffn,
    init_layer_norm,
    init_linear,
    layer_norm_ad,
    to_map_ad,
    to_tokens_ad,
)
from rib_lab.lab_core.config.config_v0 import SSTConfig
from rib_lab.lab_core.logging.logging_v1 import get_logger
from rib_lab.lab_core.posbias.geometry_v0 import WindowGeometry
from rib_lab.lab_core.posbias.rib_v0 import PosTokenCache, RIBParams, fourier_embed, rib_tokens_ad
from rib_lab.lab_core.posbias.rope_v0 import RoPEConfig
from rib_lab.lab_core.posbias.rpb_v0 import RPBTable, rpb_bias_ad
from rib_lab.lab_core.tensor.errors_v0 import ConfigError, DimensionError
from rib_lab.lab_core.tensor.tensor_v0 import Tensor, resolve_dtype


logger = get_logger("blocks")

Params = Dict[str, Tensor]


def layer_prefix(block: int, layer: int) -> str:
    return f"blocks.{block}.layers.{layer}."


# ---------------------------------------------------------------------------
# Инициализация
# ---------------------------------------------------------------------------


def _init_conv(rng: np.random.Generator, c_in: int, c_out: int, dtype, prefix: str) -> Params:
    a = 1.0 / math.sqrt(9 * c_in)
    return {
        f"{prefix}W": rng.uniform(-a, a, size=(3, 3, c_in, c_out)).astype(dtype),
        f"{prefix}b": np.zeros(c_out, dtype=dtype),
    }


def init_layer_params(
    cfg: SSTConfig, layer: int, rng: np.random.Generator, dtype: str | np.dtype = "f32", prefix: str = ""
) -> Params:
    dt = resolve_dtype(dtype)
    D = cfg.D
    params: Params = {}
    params.update(init_layer_norm(D, dt, f"{prefix}norm1."))
    a = 1.0 / math.sqrt(D)
    for name in ("W_q", "W_k", "W_v"):
        params[f"{prefix}attn.{name}"] = rng.uniform(-a, a, size=(D, D)).astype(dt)
    if cfg.bias == "rib":
        rib = RIBParams.init(cfg.L, cfg.d_h, cfg.rank_for(layer), cfg.heads, rng, dt, cfg.rib_activation)
        params.update(rib.to_dict(f"{prefix}rib."))
    elif cfg.bias == "rpb":
        table = RPBTable.init(cfg.window_for(layer), cfg.heads, rng, dt)
        params[f"{prefix}rpb.table"] = table.values
    if cfg.gate != "none":
        params.update(init_cla(rng, D, dt, f"{prefix}gate."))
    params.update(init_linear(rng, D, D, dt, f"{prefix}proj."))
    params.update(init_layer_norm(D, dt, f"{prefix}norm2."))
    params.update(init_conv_ffn(rng, D, cfg.ffn_expansion, dt, f"{prefix}ffn."))
    return params


def init_sst_params(cfg: SSTConfig, rng: np.random.Generator, dtype: str | np.dtype = "f32") -> Params:
    """Все параметры модели в плоском словаре (порядок ключей детерминирован)."""
    dt = resolve_dtype(dtype)
    params: Params = {}
    params.update(_init_conv(rng, cfg.in_channels, cfg.D, dt, "head."))
    for b in range(cfg.blocks):
        for i in range(cfg.layers):
            params.update(init_layer_params(cfg, i, rng, dt, layer_prefix(b, i)))
        params.update(_init_conv(rng, cfg.D, cfg.D, dt, f"blocks.{b}.conv."))
    params.update(_init_conv(rng, cfg.D, cfg.scale**2 * cfg.in_channels, dt, "up."))
    return params


def param_count(params: Mapping[str, Tensor]) -> int:
    return int(sum(v.size for v in params.values()))


# ---------------------------------------------------------------------------
# Пиксельные перестановки
# ---------------------------------------------------------------------------


def _check_shuffle(shape: Tuple[int, ...], r: int) -> int:
    if len(shape) != 4 or shape[-1] % (r * r) != 0:
        raise DimensionError(f"pixel_shuffle: channels of {shape} not divisible by r²={r * r}")
    return shape[-1] // (r * r)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """[B, H, W, C·r²] → [B, rH, rW, C]; канал c·r² + i·r + j → пиксель (h·r+i, w·r+j)."""
    C = _check_shuffle(x.shape, r)
    B, H, W, _ = x.shape
    y = x.reshape(B, H, W, C, r, r).transpose(0, 1, 4, 2, 5, 3)
    return y.reshape(B, H * r, W * r, C)


def pixel_shuffle_ad(x: Var, r: int) -> Var:
    C = _check_shuffle(x.shape, r)
    B, H, W, _ = x.shape
    y = ops.transpose(ops.reshape(x, (B, H, W, C, r, r)), (0, 1, 4, 2, 5, 3))
    return ops.reshape(y, (B, H * r, W * r, C))


def nearest_upscale(x: Tensor, r: int) -> Tensor:
    """Nearest-neighbor увеличение по осям H, W тензора [B, H, W, C]."""
    return np.repeat(np.repeat(x, r, axis=1), r, axis=2)


# ---------------------------------------------------------------------------
# Слой / блок / модель
# ---------------------------------------------------------------------------


def _positional_tokens(
    P: Mapping[str, Var], prefix: str, geom: WindowGeometry, cfg: SSTConfig, tape: Tape, cache: Optional[PosTokenCache]
) -> Tuple[Var, Var]:
    names = ("W_h", "b_h", "W_pq", "W_pk")
    if cache is not None:
        # инференс: токены из кэша, градиент не нужен
        rib = RIBParams.from_dict(
            {f"{prefix}rib.{n}": P[f"{prefix}rib.{n}"].value for n in names},
            cfg.L,
            prefix=f"{prefix}rib.",
            activation=cfg.rib_activation,
        )
        q_p, k_p = cache.get(geom, rib)
        return tape.constant(q_p), tape.constant(k_p)
    embed = tape.constant(fourier_embed(geom.coords, cfg.L))
    return rib_tokens_ad(embed, *(P[f"{prefix}rib.{n}"] for n in names), cfg.rib_activation)


def window_attention_ad(
    xn: Var,
    P: Mapping[str, Var],
    prefix: str,
    cfg: SSTConfig,
    layer: int,
    cache: Optional[PosTokenCache] = None,
) -> Var:
    """Многоголовое оконное внимание над картой [B, H, W, D]; выход в токенах [B, H·W, D]."""
    M = cfg.window_for(layer)
    att = cfg.attention_config(layer)
    windows, info = window_partition_ad(xn, M)
    geom = WindowGeometry.square(M, xn.dtype)

    pos = None
    bias = None
    rope = None
    if cfg.bias == "rib":
        pos = _positional_tokens(P, prefix, geom, cfg, xn.tape, cache)
    elif cfg.bias == "rpb":
        bias = rpb_bias_ad(P[f"{prefix}rpb.table"], M)
    elif cfg.bias == "rope":
        rope = RoPEConfig(D_head=cfg.D_head, base=cfg.rope_base)

    q, k, v = build_augmented_qk_ad(
        windows, P[f"{prefix}attn.W_q"], P[f"{prefix}attn.W_k"], P[f"{prefix}attn.W_v"], geom, att, pos, rope
    )
    mask = info.valid[:, None, :] if info.padded else None
    o = merge_heads_ad(attend_ad(q, k, v, att, mask, bias))
    return to_tokens_ad(window_reverse_ad(o, info))


def sst_layer_ad(
    x: Var, P: Mapping[str, Var], prefix: str, cfg: SSTConfig, layer: int, cache: Optional[PosTokenCache] = None
) -> Var:
    """Pre-norm слой: X + CLA-гейт(внимание(LN X)), затем X + ConvFFN(LN X)."""
    B, H, W, D = x.shape
    if D != cfg.D:
        raise DimensionError(f"layer input width {D} != D={cfg.D}")
    t = to_tokens_ad(x)

    xn = layer_norm_ad(t, P, f"{prefix}norm1.")
    o = window_attention_ad(to_map_ad(xn, H, W), P, prefix, cfg, layer, cache)
    t = t + cla_gate_ad(xn, o, H, W, P, f"{prefix}gate.", f"{prefix}proj.", cfg.gate)

    t = t + conv_ffn_ad(layer_norm_ad(t, P, f"{prefix}norm2."), H, W, P, f"{prefix}ffn.")
    return to_map_ad(t, H, W)


def sst_block_ad(
    x: Var, P: Mapping[str, Var], block: int, cfg: SSTConfig, cache: Optional[PosTokenCache] = None
) -> Var:
    y = x
    for i in range(cfg.layers):
        y = sst_layer_ad(y, P, layer_prefix(block, i), cfg, i, cache)
    y = ops.conv2d(y, P[f"blocks.{block}.conv.W"], P[f"blocks.{block}.conv.b"])
    return y + x


def sst_forward_ad(
    tape: Tape, P: Mapping[str, Var], lr: np.ndarray, cfg: SSTConfig, cache: Optional[PosTokenCache] = None
) -> Var:
    """I_SR [B, rH, rW, C] на ленте; lr: [B, H, W, C] со значениями в [0, 1]."""
    if lr.ndim != 4 or lr.shape[-1] != cfg.in_channels:
        raise DimensionError(f"sst_forward expects [B, H, W, {cfg.in_channels}], got {lr.shape}")
    if cfg.scale not in (2, 3, 4):
        raise ConfigError(f"Unsupported scale factor: {cfg.scale}")
    x = tape.constant(lr)
    f_s = ops.conv2d(x, P["head.W"], P["head.b"])
    f = f_s
    for b in range(cfg.blocks):
        f = sst_block_ad(f, P, b, cfg, cache)
    f = f + f_s
    up = pixel_shuffle_ad(ops.conv2d(f, P["up.W"], P["up.b"]), cfg.scale)
    return up + tape.constant(nearest_upscale(lr, cfg.scale))


def sst_forward(
    params: Mapping[str, Tensor], lr: Tensor, cfg: SSTConfig, cache: Optional[PosTokenCache] = None
) -> Tensor:
    """Инференс без градиентов; lr [H, W, C] или [B, H, W, C]."""
    single = lr.ndim == 3
    batch = lr[None] if single else lr
    dtype = next(iter(params.values())).dtype
    tape = Tape()
    P = {name: tape.constant(value) for name, value in params.items()}
    out = sst_forward_ad(tape, P, np.asarray(batch, dtype=dtype), cfg, cache).value
    return out[0] if single else out


__all__ = [
    "layer_prefix",
    "init_layer_params",
    "init_sst_params",
    "param_count",
    "pixel_shuffle",
    "pixel_shuffle_ad",
    "nearest_upscale",
    "window_attention_ad",
    "sst_layer_ad",
    "sst_block_ad",
    "sst_forward_ad",
    "sst_forward",
]
