from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

from rib_lab.lab_core.tensor.errors_v0 import ImageFormatError
from rib_lab.lab_core.tensor.tensor_v0 import Tensor


# magic, width, height, maxval; между ними пробелы и комментарии '#'
_HEADER = re.compile(rb"\A(P[56])(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)\s")


def _check_header(blob: bytes, path: Path) -> str:
    match = _HEADER.match(blob)
    if match is None:
        raise ImageFormatError(f"{path}: not a binary P5/P6 image")
    magic, width, height, maxval = match.group(1).decode(), *(int(g) for g in match.groups()[1:])
    if maxval != 255:
        raise ImageFormatError(f"{path}: unsupported maxval {maxval} (only 255)")
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: empty image {width}x{height}")
    channels = 3 if magic == "P6" else 1
    if len(blob) - match.end() < width * height * channels:
        raise ImageFormatError(f"{path}: truncated pixel data")
    return magic


def load_ppm(path: str | Path) -> Tensor:
    """P6 → [H, W, 3], P5 → [H, W, 1]; f32 в [0, 1]."""
    path = Path(path)
    blob = path.read_bytes()
    magic = _check_header(blob, path)
    with Image.open(path) as im:
        pixels = np.asarray(im, dtype=np.uint8)
    if magic == "P5":
        pixels = pixels[..., None]
    return (pixels.astype(np.float32) / 255.0)


def save_ppm(path: str | Path, img: Tensor) -> Path:
    """[H, W, 3] → P6, [H, W, 1] или [H, W] → P5; значения обрезаются в [0, 1]."""
    path = Path(path)
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[-1] != 3):
        raise ImageFormatError(f"save_ppm: unsupported image shape {np.shape(img)}")
    pixels = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    # uint8 [H, W, 3] → RGB (P6), [H, W] → L (P5)
    Image.fromarray(pixels).save(path, format="PPM")
    return path


__all__ = ["load_ppm", "save_ppm"]
