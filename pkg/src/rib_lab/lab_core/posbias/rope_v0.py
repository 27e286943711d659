from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from rib_lab.lab_core.autodiff.tape_v0 import Var
from rib_lab.lab_core.posbias.geometry_v0 import WindowGeometry
from rib_lab.lab_core.tensor.errors_v0 import ConfigError, DimensionError
from rib_lab.lab_core.tensor.tensor_v0 import Tensor


@dataclass(frozen=True)
class RoPEConfig:
    """Осевой 2D RoPE: первая половина каналов вращается по y, вторая по x.

    θ_t = base^{−2t/(D_head/2)}, t = 0 … D_head/4 − 1.
    """

    D_head: int
    base: float = 100.0

    def __post_init__(self) -> None:
        if self.D_head <= 0 or self.D_head % 4 != 0:
            raise ConfigError(f"RoPE requires head dim divisible by 4, got {self.D_head}")

    @property
    def quarter(self) -> int:
        return self.D_head // 4

    @property
    def theta(self) -> np.ndarray:
        t = np.arange(self.quarter, dtype=np.float64)
        return self.base ** (-2.0 * t / (self.D_head / 2))


def rope_angles(geom: WindowGeometry, cfg: RoPEConfig) -> Tuple[np.ndarray, np.ndarray]:
    """cos и sin углов поворота, каждый [N, 2, D_head/4] (ось 1: y, x).

    Позиции: координаты окна в единицах токенов: x·(M−1)/2.
    """
    positions = geom.coords.astype(np.float64) * (geom.M - 1) / 2.0
    angles = positions[:, :, None] * cfg.theta[None, None, :]
    return np.cos(angles), np.sin(angles)


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    lead = x.shape[:-1]
    xr = x.reshape(lead + (2, 2, cos.shape[-1]))
    x0 = xr[..., 0, :]
    x1 = xr[..., 1, :]
    out = np.stack([x0 * cos - x1 * sin, x0 * sin + x1 * cos], axis=-2)
    return out.reshape(x.shape).astype(x.dtype, copy=False)


def _check(shape: Tuple[int, ...], geom: WindowGeometry, cfg: RoPEConfig) -> None:
    if len(shape) < 2 or shape[-1] != cfg.D_head or shape[-2] != geom.N:
        raise DimensionError(f"rope_rotate: expected [..., {geom.N}, {cfg.D_head}], got {shape}")


def rope_rotate(x: Tensor, geom: WindowGeometry, cfg: RoPEConfig) -> Tensor:
    """Повернуть q или k [heads, N, D_head]; норма каждого вектора сохраняется."""
    _check(x.shape, geom, cfg)
    cos, sin = rope_angles(geom, cfg)
    return _rotate(x, cos, sin)


def rope_rotate_ad(x: Var, geom: WindowGeometry, cfg: RoPEConfig) -> Var:
    _check(x.shape, geom, cfg)
    cos, sin = rope_angles(geom, cfg)
    # обратный проход: поворот на −угол
    return x.tape.record("rope", [x], _rotate(x.value, cos, sin), lambda g: (_rotate(g, cos, -sin),))


__all__ = ["RoPEConfig", "rope_angles", "rope_rotate", "rope_rotate_ad"]
