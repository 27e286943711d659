from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence, Tuple

import numpy as np

from rib_lab.lab_core.tensor.errors_v0 import DimensionError
from rib_lab.lab_core.tensor.tensor_v0 import Tensor, resolve_dtype


def axis_coords(M: int) -> np.ndarray:
    """M равномерно распределённых значений на [−1, 1] включительно (для M=1: 0)."""
    if M < 1:
        raise DimensionError(f"Window side must be >= 1, got {M}")
    if M == 1:
        return np.zeros(1, dtype=np.float64)
    return np.linspace(-1.0, 1.0, M, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class WindowGeometry:
    """Геометрия окна M×M: нормированные координаты токенов.

    Порядок токенов row-major (y внешний, x внутренний); столбцы coords: (y, x).
    ``order``: перестановка токенов относительно канонического порядка
    (None для канонической геометрии).
    """

    M: int
    coords: Tensor
    order: Tuple[int, ...] | None = None

    @classmethod
    def square(cls, M: int, dtype: str | np.dtype = "f32") -> "WindowGeometry":
        axis = axis_coords(M)
        yy, xx = np.meshgrid(axis, axis, indexing="ij")
        coords = np.stack([yy.ravel(), xx.ravel()], axis=-1).astype(resolve_dtype(dtype))
        coords.setflags(write=False)
        return cls(M=M, coords=coords)

    @property
    def N(self) -> int:
        return self.M * self.M

    @property
    def canonical(self) -> bool:
        return self.order is None

    @cached_property
    def grid(self) -> np.ndarray:
        """Целочисленные позиции (row, col) токенов, [N, 2]."""
        rows, cols = np.divmod(np.arange(self.N), self.M)
        grid = np.stack([rows, cols], axis=-1)
        if self.order is not None:
            grid = grid[list(self.order)]
        return grid

    def permuted(self, perm: Sequence[int]) -> "WindowGeometry":
        """Та же геометрия с переставленными токенами (для тестов эквивариантности)."""
        perm = tuple(int(p) for p in perm)
        if sorted(perm) != list(range(self.N)):
            raise DimensionError(f"Not a permutation of {self.N} tokens")
        base = self.order if self.order is not None else tuple(range(self.N))
        coords = self.coords[list(perm)]
        coords.setflags(write=False)
        return WindowGeometry(M=self.M, coords=coords, order=tuple(base[p] for p in perm))

    def relative_offsets(self) -> Tuple[np.ndarray, np.ndarray]:
        """(Δy, Δx) между токенами i и j, каждая матрица [N, N]: pos_i − pos_j."""
        g = self.grid
        return g[:, None, 0] - g[None, :, 0], g[:, None, 1] - g[None, :, 1]


__all__ = ["axis_coords", "WindowGeometry"]
