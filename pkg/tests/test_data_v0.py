import itertools

import numpy as np
import pytest

from rib_lab.lab_core.tensor.errors_v0 import ConfigError, DimensionError
from rib_lab.lab_core.train.data_v0 import (
    PatchSampler,
    box_downsample,
    make_synthetic_pairs,
    prefetch,
    quantize_8bit,
)


# =============================================================================
# ТЕСТ 1. Синтетические пары
# =============================================================================

def test_synthetic_pairs_shapes_and_quantization():
    lr, hr = make_synthetic_pairs(3, 12, 3, seed=1)

    assert lr.shape == (3, 4, 4, 3) and hr.shape == (3, 12, 12, 3)
    assert hr.min() >= 0.0 and hr.max() <= 1.0
    # HR кратны 1/255
    assert np.allclose(hr * 255.0, np.round(hr * 255.0), atol=1e-4)
    assert np.allclose(lr, box_downsample(hr, 3))


def test_synthetic_pairs_are_reproducible():
    a = make_synthetic_pairs(2, 8, 2, seed=5)[1]
    b = make_synthetic_pairs(2, 8, 2, seed=5)[1]
    c = make_synthetic_pairs(2, 8, 2, seed=6)[1]

    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_box_downsample_and_errors():
    hr = np.arange(16, dtype=np.float32).reshape(4, 4, 1)

    lr = box_downsample(hr, 2)

    assert lr[0, 0, 0] == pytest.approx((0 + 1 + 4 + 5) / 4)
    with pytest.raises(DimensionError):
        box_downsample(hr, 3)
    with pytest.raises(ConfigError):
        make_synthetic_pairs(1, 10, 3)


def test_quantize_clips():
    assert np.array_equal(quantize_8bit(np.array([-0.5, 2.0])), [0.0, 1.0])


# =============================================================================
# ТЕСТ 2. Патчи
# =============================================================================

def test_patch_sampler_alignment_and_determinism():
    lr, hr = make_synthetic_pairs(4, 16, 2, seed=0)
    sampler = PatchSampler(lr, hr, patch=4, scale=2, batch=5, seed=9)
    again = PatchSampler(lr, hr, patch=4, scale=2, batch=5, seed=9)

    lr_b, hr_b = sampler.sample()
    lr_b2, hr_b2 = again.sample()

    assert lr_b.shape == (5, 4, 4, 3) and hr_b.shape == (5, 8, 8, 3)
    assert np.array_equal(lr_b, lr_b2) and np.array_equal(hr_b, hr_b2)
    # флипы и обрезка согласованы: LR: box-усреднение HR-патча
    assert np.allclose(lr_b, box_downsample(hr_b, 2), atol=1e-6)


def test_patch_larger_than_image_is_rejected():
    lr, hr = make_synthetic_pairs(1, 8, 2)
    with pytest.raises(ConfigError):
        PatchSampler(lr, hr, patch=5, scale=2, batch=1)


# =============================================================================
# ТЕСТ 3. Фоновая подгрузка
# =============================================================================

@pytest.mark.parametrize("depth", [0, 1, 3])
def test_prefetch_preserves_order(depth):
    items = list(prefetch(iter(range(100)), 10, depth=depth))

    assert items == list(range(10))


def test_prefetch_propagates_producer_errors():
    def broken():
        yield 1
        raise RuntimeError("boom")

    got = []
    with pytest.raises(RuntimeError, match="boom"):
        for item in prefetch(broken(), 5, depth=2):
            got.append(item)
    assert got == [1]


def test_prefetch_early_stop_releases_producer():
    gen = prefetch(itertools.count(), 1000, depth=1)

    first = [next(gen) for _ in range(3)]
    gen.close()

    assert first == [0, 1, 2]
