from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from statistics import median
from typing import Callable, Dict, List, Sequence

import numpy as np


@dataclass
class AllocationMeter:
    """Счётчик скаляров, выделенных внутри ядра внимания.

    Буферы ядра создаются через ``allocate`` и возвращаются через ``release``;
    ``peak``: максимум одновременно живых скаляров, ``by_tag``: пик по метке.
    Безопасен для параллельных окон (общий замок).
    """

    current: int = 0
    peak: int = 0
    total: int = 0
    by_tag: Dict[str, int] = field(default_factory=dict)
    _live: Dict[int, tuple] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def allocate(self, shape: Sequence[int] | int, dtype: np.dtype, tag: str = "aux", fill: float | None = None) -> np.ndarray:
        if fill is None:
            arr = np.empty(shape, dtype=dtype)
        else:
            arr = np.full(shape, fill, dtype=dtype)
        self.track(arr, tag)
        return arr

    def track(self, arr: np.ndarray, tag: str = "aux") -> np.ndarray:
        """Учесть уже созданный буфер (результат matmul, exp и т.п.)."""
        with self._lock:
            self.current += arr.size
            self.total += arr.size
            self._live[id(arr)] = (arr.size, tag)
            self.peak = max(self.peak, self.current)
            self.by_tag[tag] = max(self.by_tag.get(tag, 0), arr.size)
        return arr

    def release(self, *arrays: np.ndarray) -> None:
        with self._lock:
            for arr in arrays:
                entry = self._live.pop(id(arr), None)
                if entry is not None:
                    self.current -= entry[0]


def median_wall_ns(fn: Callable[[], object], runs: int = 5) -> int:
    """Медиана времени выполнения fn по ``runs`` запускам (не меньше 5), нс."""
    runs = max(runs, 5)
    samples: List[int] = []
    for _ in range(runs):
        start = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - start)
    return int(median(samples))


__all__ = ["AllocationMeter", "median_wall_ns"]
