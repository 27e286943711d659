from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from rib_lab.lab_core.autodiff import ops_v0 as ops
from rib_lab.lab_core.autodiff.tape_v0 import Var
from rib_lab.lab_core.posbias.geometry_v0 import WindowGeometry
from rib_lab.lab_core.tensor.errors_v0 import DimensionError, InternalError
from rib_lab.lab_core.tensor.tensor_v0 import Tensor, resolve_dtype


def rpb_table_size(M: int) -> int:
    return (2 * M - 1) ** 2


def rpb_param_count(M: int, heads: int) -> int:
    """heads · (2M−1)²: растёт квадратично с размером окна."""
    return heads * rpb_table_size(M)


@lru_cache(maxsize=32)
def _canonical_index(M: int) -> np.ndarray:
    g = WindowGeometry.square(M).grid
    dy = g[:, None, 0] - g[None, :, 0] + (M - 1)
    dx = g[:, None, 1] - g[None, :, 1] + (M - 1)
    idx = dy * (2 * M - 1) + dx
    idx.setflags(write=False)
    return idx


def relative_position_index(M: int, geom: WindowGeometry | None = None) -> np.ndarray:
    """Индекс относительного смещения idx[i, j] ∈ [0, (2M−1)²), [N, N].

    Сдвигаем (Δy, Δx) в неотрицательный диапазон и линеаризуем по строкам
    таблицы (2M−1)×(2M−1).
    """
    if geom is None or geom.canonical:
        return _canonical_index(M)
    if geom.M != M:
        raise DimensionError(f"geometry M={geom.M} != table M={M}")
    dy, dx = geom.relative_offsets()
    return (dy + M - 1) * (2 * M - 1) + (dx + M - 1)


@dataclass(frozen=True, eq=False)
class RPBTable:
    """Обучаемая таблица смещений RPB: values [heads, (2M−1)²]."""

    M: int
    values: Tensor

    def __post_init__(self) -> None:
        if self.values.ndim != 2 or self.values.shape[1] != rpb_table_size(self.M):
            raise DimensionError(
                f"RPBTable: expected shape [heads, {rpb_table_size(self.M)}], got {self.values.shape}"
            )

    @classmethod
    def init(
        cls, M: int, heads: int, rng: np.random.Generator | None = None, dtype: str | np.dtype = "f32", std: float = 0.02
    ) -> "RPBTable":
        """Нормальная инициализация (std 0.02); без rng: нулевая таблица."""
        dt = resolve_dtype(dtype)
        shape = (heads, rpb_table_size(M))
        if rng is None:
            return cls(M=M, values=np.zeros(shape, dtype=dt))
        return cls(M=M, values=(rng.standard_normal(shape) * std).astype(dt))

    @property
    def heads(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.M * self.M

    @property
    def idx(self) -> np.ndarray:
        return relative_position_index(self.M)

    @property
    def param_count(self) -> int:
        return self.values.size


def _checked_index(table_size: int, idx: np.ndarray) -> np.ndarray:
    if idx.size and (idx.min() < 0 or idx.max() >= table_size):
        raise InternalError(
            f"RPB index out of range: [{int(idx.min())}, {int(idx.max())}] for table of size {table_size}"
        )
    return idx


def rpb_bias_matrix(table: RPBTable, geom: WindowGeometry | None = None) -> Tensor:
    """B[h, i, j] = table[h, idx[i, j]], [heads, N, N]."""
    idx = _checked_index(table.values.shape[1], relative_position_index(table.M, geom))
    return table.values[:, idx]


def rpb_bias_ad(values: Var, M: int, geom: WindowGeometry | None = None) -> Var:
    """Дифференцируемый поиск в таблице; градиент суммируется по парам с одним смещением."""
    idx = _checked_index(values.shape[-1], relative_position_index(M, geom))
    return ops.gather_last(values, idx)


__all__ = [
    "rpb_table_size",
    "rpb_param_count",
    "relative_position_index",
    "RPBTable",
    "rpb_bias_matrix",
    "rpb_bias_ad",
]
