"""PSNR / SSIM по Y-каналу с обрезкой границы на scale пикселей."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from rib_lab.lab_core.tensor.errors_v0 import DimensionError
from rib_lab.lab_core.tensor.tensor_v0 import Tensor


MAX_VALUE = 255.0
# BT.601, полный диапазон
_Y_WEIGHTS = np.array([0.299, 0.587, 0.114])
SSIM_SIGMA = 1.5


def rgb_to_y(img: Tensor) -> np.ndarray:
    """[H, W, 3] (или [H, W, 1]) в [0, 1] → яркость Y [H, W] в шкале 0…255 (f64)."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[-1] not in (1, 3):
        raise DimensionError(f"expected [H, W, 3] or [H, W, 1], got {arr.shape}")
    if arr.shape[-1] == 1:
        return arr[..., 0] * MAX_VALUE
    return (arr @ _Y_WEIGHTS) * MAX_VALUE


def _crop_y(sr: Tensor, hr: Tensor, border: int) -> Tuple[np.ndarray, np.ndarray]:
    if np.shape(sr) != np.shape(hr):
        raise DimensionError.mismatch("metrics", np.shape(sr), np.shape(hr))
    y_sr, y_hr = rgb_to_y(sr), rgb_to_y(hr)
    if border > 0:
        y_sr = y_sr[border:-border, border:-border]
        y_hr = y_hr[border:-border, border:-border]
    if y_sr.size == 0:
        raise DimensionError(f"border={border} crops away the whole image {np.shape(sr)}")
    return y_sr, y_hr


def psnr_y(sr: Tensor, hr: Tensor, border: int = 0) -> float:
    """10·log10(255² / MSE) на Y; при MSE = 0: +inf."""
    y_sr, y_hr = _crop_y(sr, hr, border)
    if np.mean((y_sr - y_hr) ** 2) == 0:
        return float("inf")
    return float(peak_signal_noise_ratio(y_hr, y_sr, data_range=MAX_VALUE))


def ssim_y(sr: Tensor, hr: Tensor, border: int = 0) -> float:
    """SSIM на Y: гауссово окно 11×11, σ = 1.5, K1 = 0.01, K2 = 0.03."""
    y_sr, y_hr = _crop_y(sr, hr, border)
    if min(y_sr.shape) < 11:
        raise DimensionError(f"SSIM needs at least 11x11 pixels after cropping, got {y_sr.shape}")
    return float(
        structural_similarity(
            y_hr,
            y_sr,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
            data_range=MAX_VALUE,
            K1=0.01,
            K2=0.03,
        )
    )


@dataclass
class EvalResult:
    """Средние PSNR (дБ) / SSIM и значения по картинкам."""

    psnr: float
    ssim: float
    per_image: List[Tuple[float, float]] = field(default_factory=list)


def evaluate(sr: Tensor, hr: Tensor, border: int = 0) -> EvalResult:
    p, s = psnr_y(sr, hr, border), ssim_y(sr, hr, border)
    return EvalResult(psnr=p, ssim=s, per_image=[(p, s)])


def evaluate_pairs(pairs: Sequence[Tuple[Tensor, Tensor]], border: int = 0) -> EvalResult:
    """Среднее по парам (sr, hr); +inf в любой паре даёт +inf в среднем PSNR."""
    if not pairs:
        raise DimensionError("evaluate_pairs: no image pairs")
    per_image = [(psnr_y(sr, hr, border), ssim_y(sr, hr, border)) for sr, hr in pairs]
    psnrs = np.array([p for p, _ in per_image])
    ssims = np.array([s for _, s in per_image])
    return EvalResult(psnr=float(np.mean(psnrs)), ssim=float(np.mean(ssims)), per_image=per_image)


__all__ = ["MAX_VALUE", "rgb_to_y", "psnr_y", "ssim_y", "EvalResult", "evaluate", "evaluate_pairs"]
