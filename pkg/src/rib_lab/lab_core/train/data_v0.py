"""Синтетический набор для SR: гладкие текстуры + повторяющиеся полосы.

HR-картинки квантованы к 8 битам (кратны 1/255), LR получается
box-усреднением блоков r×r.
"""
from __future__ import annotations

import queue
import threading
from dataclasses import dataclass
from typing import Iterator, List, Tuple

import numpy as np

from rib_lab.lab_core.logging.logging_v1 import get_logger
from rib_lab.lab_core.tensor.errors_v0 import ConfigError, DimensionError
from rib_lab.lab_core.tensor.tensor_v0 import Tensor


logger = get_logger("train.data")

Batch = Tuple[Tensor, Tensor]


def quantize_8bit(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def synthetic_hr_image(rng: np.random.Generator, size: int, channels: int = 3) -> Tensor:
    """Гладкая текстура (сумма низких гармоник) плюс полосы со случайным периодом и углом."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    img = np.zeros((size, size, channels))
    for c in range(channels):
        for _ in range(3):
            fy, fx = rng.uniform(0.5, 3.0, size=2) * 2 * np.pi / size
            img[..., c] += rng.uniform(0.05, 0.15) * np.sin(fy * yy + fx * xx + rng.uniform(0, 2 * np.pi))

    period = rng.integers(3, 8)
    angle = rng.uniform(0, np.pi)
    phase = (np.cos(angle) * yy + np.sin(angle) * xx) * 2 * np.pi / period
    stripes = 0.5 + 0.5 * np.sign(np.sin(phase))
    color = rng.uniform(0.2, 0.8, size=channels)
    img += 0.3 * stripes[..., None] * color + 0.35
    return quantize_8bit(img)


def box_downsample(hr: Tensor, r: int) -> Tensor:
    """Усреднение блоков r×r: [.., H, W, C] → [.., H/r, W/r, C]."""
    *lead, H, W, C = hr.shape
    if H % r or W % r:
        raise DimensionError(f"box_downsample: {H}x{W} not divisible by r={r}")
    blocks = hr.reshape(*lead, H // r, r, W // r, r, C)
    return blocks.mean(axis=(-4, -2)).astype(hr.dtype)


def make_synthetic_pairs(n: int, hr_size: int, scale: int, seed: int = 0, channels: int = 3) -> Tuple[Tensor, Tensor]:
    """n пар (LR, HR): [n, hr/r, hr/r, C] и [n, hr, hr, C]."""
    if hr_size % scale:
        raise ConfigError(f"hr_size={hr_size} must be divisible by scale={scale}")
    rng = np.random.default_rng(seed)
    hr = np.stack([synthetic_hr_image(rng, hr_size, channels) for _ in range(n)])
    return box_downsample(hr, scale), hr


@dataclass
class PatchSampler:
    """Детерминированная выборка патчей с флипами.

    Последовательность батчей полностью задаётся seed.
    """

    lr: Tensor
    hr: Tensor
    patch: int
    scale: int
    batch: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr.shape[1] < self.patch or self.lr.shape[2] < self.patch:
            raise ConfigError(f"patch={self.patch} larger than LR images {self.lr.shape[1:3]}")
        self._rng = np.random.default_rng(self.seed)

    def sample(self) -> Batch:
        rng = self._rng
        p, r = self.patch, self.scale
        lr_out = np.empty((self.batch, p, p, self.lr.shape[-1]), dtype=self.lr.dtype)
        hr_out = np.empty((self.batch, p * r, p * r, self.hr.shape[-1]), dtype=self.hr.dtype)
        for i in range(self.batch):
            k = rng.integers(len(self.lr))
            y = rng.integers(self.lr.shape[1] - p + 1)
            x = rng.integers(self.lr.shape[2] - p + 1)
            lr_patch = self.lr[k, y : y + p, x : x + p]
            hr_patch = self.hr[k, y * r : (y + p) * r, x * r : (x + p) * r]
            if rng.random() < 0.5:
                lr_patch, hr_patch = lr_patch[:, ::-1], hr_patch[:, ::-1]
            if rng.random() < 0.5:
                lr_patch, hr_patch = lr_patch[::-1], hr_patch[::-1]
            lr_out[i] = lr_patch
            hr_out[i] = hr_patch
        return lr_out, hr_out

    def __iter__(self) -> Iterator[Batch]:
        while True:
            yield self.sample()


_DONE = object()


def prefetch(batches: Iterator[Batch], count: int, depth: int = 2) -> Iterator[Batch]:
    """Первые ``count`` батчей из ``batches`` через ограниченную очередь в фоне.

    Порядок сохраняется; depth=0: без фонового потока.
    """
    if depth <= 0:
        for _ in range(count):
            yield next(batches)
        return

    q: "queue.Queue[object]" = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def producer() -> None:
        try:
            for _ in range(count):
                if stop.is_set():
                    return
                q.put(next(batches))
        except Exception as exc:  # пробрасываем в потребителя
            q.put(exc)
            return
        q.put(_DONE)

    worker = threading.Thread(target=producer, name="rib-prefetch", daemon=True)
    worker.start()
    try:
        while True:
            item = q.get()
            if item is _DONE:
                break
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop.set()
        # разблокировать производителя, если он ждёт место в очереди
        while worker.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                worker.join(timeout=0.01)


def split_pairs(lr: Tensor, hr: Tensor) -> List[Batch]:
    return [(lr[i], hr[i]) for i in range(len(lr))]


__all__ = [
    "quantize_8bit",
    "synthetic_hr_image",
    "box_downsample",
    "make_synthetic_pairs",
    "PatchSampler",
    "prefetch",
    "split_pairs",
]
