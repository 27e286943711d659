import numpy as np
import pytest

from rib_lab.lab_core.tensor.errors_v0 import DimensionError
from rib_lab.lab_core.train.metrics_v0 import evaluate, evaluate_pairs, psnr_y, rgb_to_y, ssim_y


def _img(shape=(24, 24, 3), seed=0):
    return np.random.default_rng(seed).integers(0, 250, size=shape).astype(np.float64) / 255.0


def test_rgb_to_y_bt601_full_range():
    white = np.ones((1, 1, 3))
    red = np.zeros((1, 1, 3))
    red[..., 0] = 1.0

    assert rgb_to_y(white)[0, 0] == pytest.approx(255.0)
    assert rgb_to_y(red)[0, 0] == pytest.approx(0.299 * 255.0)
    assert rgb_to_y(np.full((2, 2, 1), 0.5))[0, 0] == pytest.approx(127.5)


def test_psnr_of_one_level_difference():
    hr = _img()

    # разница в 1/255 по всем каналам → разница 1 по Y, MSE = 1
    assert psnr_y(hr + 1.0 / 255.0, hr) == pytest.approx(48.1308, abs=1e-3)


def test_identical_images():
    hr = _img(seed=1)

    assert psnr_y(hr, hr) == float("inf")
    assert ssim_y(hr, hr) == pytest.approx(1.0)


def test_ssim_drops_with_noise():
    hr = _img(seed=2)
    noise = np.random.default_rng(3).normal(0, 1, hr.shape)
    mild = np.clip(hr + 0.05 * noise, 0, 1)
    strong = np.clip(hr + 0.25 * noise, 0, 1)

    assert ssim_y(strong, hr) < ssim_y(mild, hr) < 1.0


def test_border_crop_ignores_edges():
    hr = _img(seed=4)
    sr = hr.copy()
    sr[:2] = 0.0
    sr[:, -2:] = 1.0

    assert psnr_y(sr, hr, border=2) == float("inf")
    assert psnr_y(sr, hr, border=0) < 40


def test_shape_errors():
    hr = _img((12, 12, 3))
    with pytest.raises(DimensionError):
        psnr_y(hr, hr[:-1])
    with pytest.raises(DimensionError):
        psnr_y(hr, hr, border=6)
    with pytest.raises(DimensionError):
        ssim_y(hr, hr, border=1)
    with pytest.raises(DimensionError):
        rgb_to_y(np.zeros((4, 4, 2)))


def test_evaluate_pairs_averages():
    hr = _img(seed=5)
    sr = hr + 1.0 / 255.0

    single = evaluate(sr, hr)
    both = evaluate_pairs([(sr, hr), (sr, hr)])

    assert both.psnr == pytest.approx(single.psnr)
    assert len(both.per_image) == 2
    with pytest.raises(DimensionError):
        evaluate_pairs([])
