"""Окна для оконного внимания.

Циклическое расписание размеров окон по слоям, пресеты стратегий для
абляции и разбиение карты [B, H, W, C] на окна M×M с дополнением нулями.
Маска valid помечает настоящие (не дополненные) токены; window_reverse
отрезает дополнение и восстанавливает исходную карту побитово.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np

from rib_lab.lab_core.autodiff import ops_v0 as ops
from rib_lab.lab_core.autodiff.tape_v0 import Var
from rib_lab.lab_core.tensor.errors_v0 import ConfigError, DimensionError
from rib_lab.lab_core.tensor.tensor_v0 import Tensor


# Размеры окон по слоям блока
SST_WINDOW_SIZES: Tuple[int, ...] = (16, 32, 64, 16, 32, 64)
SST_PLUS_WINDOW_SIZES: Tuple[int, ...] = (16, 32, 48, 32, 48, 96)

# Абляция стратегии окон (6 слоёв на блок)
WINDOW_STRATEGIES: Dict[str, Tuple[int, ...]] = {
    "cyclic": SST_WINDOW_SIZES,
    "ascending": (4, 8, 16, 32, 64, 64),
    "descending": (64, 64, 32, 16, 8, 4),
    "fixed": (64,) * 6,
}


def cyclic_schedule(sizes: Sequence[int], layer_index: int) -> int:
    """Размер окна слоя: sizes[i mod len(sizes)]."""
    if len(sizes) == 0:
        raise ConfigError("Window size list must not be empty")
    return int(sizes[layer_index % len(sizes)])


@dataclass(frozen=True)
class PadInfo:
    """Как карта B×H×W была дополнена и нарезана на окна M×M.

    ``valid``: маска реальных (не дополненных) токенов, [B·nW, N].
    """

    B: int
    H: int
    W: int
    M: int
    Hp: int
    Wp: int
    valid: np.ndarray

    @property
    def n_windows(self) -> int:
        return (self.Hp // self.M) * (self.Wp // self.M)

    @property
    def padded(self) -> bool:
        return self.Hp != self.H or self.Wp != self.W


def _pad_info(B: int, H: int, W: int, M: int) -> PadInfo:
    if H < 1 or W < 1:
        raise DimensionError(f"window_partition: empty map {H}x{W}")
    if M < 1:
        raise ConfigError(f"Window side must be >= 1, got {M}")
    Hp = -(-H // M) * M
    Wp = -(-W // M) * M
    mask = np.zeros((Hp, Wp), dtype=bool)
    mask[:H, :W] = True
    windows = mask.reshape(Hp // M, M, Wp // M, M).transpose(0, 2, 1, 3).reshape(-1, M * M)
    valid = np.tile(windows, (B, 1))
    valid.setflags(write=False)
    return PadInfo(B=B, H=H, W=W, M=M, Hp=Hp, Wp=Wp, valid=valid)


def _check_map(shape: Tuple[int, ...]) -> None:
    if len(shape) != 4:
        raise DimensionError(f"window_partition expects [B, H, W, D], got {shape}")


def window_partition(x: Tensor, M: int) -> Tuple[Tensor, PadInfo]:
    """[B, H, W, D] → окна [B·nW, M², D] (дополнение нулями справа/снизу)."""
    _check_map(x.shape)
    B, H, W, D = x.shape
    info = _pad_info(B, H, W, M)
    xp = np.pad(x, ((0, 0), (0, info.Hp - H), (0, info.Wp - W), (0, 0)))
    win = xp.reshape(B, info.Hp // M, M, info.Wp // M, M, D).transpose(0, 1, 3, 2, 4, 5)
    return win.reshape(-1, M * M, D), info


def window_reverse(windows: Tensor, info: PadInfo) -> Tensor:
    """Обратная сборка окон в карту [B, H, W, D] с обрезкой дополнения."""
    M = info.M
    D = windows.shape[-1]
    x = windows.reshape(info.B, info.Hp // M, info.Wp // M, M, M, D).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(info.B, info.Hp, info.Wp, D)[:, : info.H, : info.W, :]


def window_partition_ad(x: Var, M: int) -> Tuple[Var, PadInfo]:
    _check_map(x.shape)
    B, H, W, D = x.shape
    info = _pad_info(B, H, W, M)
    if info.padded:
        x = ops.pad(x, ((0, 0), (0, info.Hp - H), (0, info.Wp - W), (0, 0)))
    win = ops.reshape(x, (B, info.Hp // M, M, info.Wp // M, M, D))
    win = ops.transpose(win, (0, 1, 3, 2, 4, 5))
    return ops.reshape(win, (-1, M * M, D)), info


def window_reverse_ad(windows: Var, info: PadInfo) -> Var:
    M = info.M
    D = windows.shape[-1]
    x = ops.reshape(windows, (info.B, info.Hp // M, info.Wp // M, M, M, D))
    x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
    x = ops.reshape(x, (info.B, info.Hp, info.Wp, D))
    if info.padded:
        x = ops.getitem(x, (slice(None), slice(0, info.H), slice(0, info.W), slice(None)))
    return x


__all__ = [
    "SST_WINDOW_SIZES",
    "SST_PLUS_WINDOW_SIZES",
    "WINDOW_STRATEGIES",
    "cyclic_schedule",
    "PadInfo",
    "window_partition",
    "window_reverse",
    "window_partition_ad",
    "window_reverse_ad",
]
