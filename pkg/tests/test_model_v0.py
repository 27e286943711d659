import dataclasses

import numpy as np
import pytest
from scipy.special import expit

from rib_lab.lab_core.blocks.layers_v0 import (
    FeatureMap,
    cla_gate,
    conv_ffn,
    ffn_hidden_width,
    gate_values,
    init_cla,
    init_conv_ffn,
)
from rib_lab.lab_core.autodiff.tape_v0 import Tape
from rib_lab.lab_core.blocks.model_v0 import (
    init_layer_params,
    init_sst_params,
    nearest_upscale,
    param_count,
    pixel_shuffle,
    sst_forward,
    sst_layer_ad,
)
from rib_lab.lab_core.config.config_v0 import SST_PRESETS, SSTConfig
from rib_lab.lab_core.posbias.rib_v0 import PosTokenCache, rib_param_count_for
from rib_lab.lab_core.tensor.errors_v0 import DimensionError


MICRO = SST_PRESETS["sst-micro"]


def _tokens(H, W, D, seed=0):
    return np.random.default_rng(seed).standard_normal((2, H * W, D))


# =============================================================================
# ТЕСТ 1. Карта ↔ токены
# =============================================================================

def test_feature_map_token_roundtrip():
    x = np.arange(2 * 3 * 4 * 5, dtype=np.float64).reshape(2, 3, 4, 5)
    fm = FeatureMap(x)

    tokens = fm.token_form()

    assert tokens.shape == (2, 12, 5)
    # токен h·W + w
    assert np.array_equal(tokens[1, 2 * 4 + 3], x[1, 2, 3])
    assert np.array_equal(FeatureMap.from_tokens(tokens, 3, 4).tensor, x)
    with pytest.raises(DimensionError):
        FeatureMap.from_tokens(tokens, 4, 4)
    with pytest.raises(DimensionError):
        FeatureMap(tokens)


# =============================================================================
# ТЕСТ 2. Гейт
# =============================================================================

def test_cla_gate_values_in_unit_interval():
    H, W, D = 3, 4, 6
    X = _tokens(H, W, D)
    params = init_cla(np.random.default_rng(1), D, "f64")

    G = gate_values(X, H, W, params, "cla")

    assert G.shape == X.shape
    assert np.all((G > 0) & (G < 1))


def test_pw_gate_is_sigmoid_of_projection():
    H, W, D = 2, 2, 4
    X = _tokens(H, W, D, seed=2)
    params = init_cla(np.random.default_rng(3), D, "f64")

    G = gate_values(X, H, W, params, "pw")

    assert np.allclose(G, expit(X @ params["pw"] + params["pw_b"]))


def test_gate_none_is_plain_output_projection():
    H, W, D = 2, 3, 4
    rng = np.random.default_rng(4)
    X, O = _tokens(H, W, D, seed=5), _tokens(H, W, D, seed=6)
    W_o, b_o = rng.standard_normal((D, D)), rng.standard_normal(D)

    Y = cla_gate(X, O, H, W, {}, W_o, b_o, "none")

    assert np.allclose(Y, O @ W_o + b_o)
    assert np.array_equal(gate_values(X, H, W, {}, "none"), np.ones_like(X))


def test_cla_gate_multiplies_before_projection():
    H, W, D = 2, 2, 4
    rng = np.random.default_rng(7)
    X, O = _tokens(H, W, D, seed=8), _tokens(H, W, D, seed=9)
    params = init_cla(rng, D, "f64")
    W_o, b_o = rng.standard_normal((D, D)), np.zeros(D)

    Y = cla_gate(X, O, H, W, params, W_o, b_o, "cla")

    assert np.allclose(Y, (O * gate_values(X, H, W, params, "cla")) @ W_o)


# =============================================================================
# ТЕСТ 3. ConvFFN
# =============================================================================

def test_conv_ffn_hidden_width_and_zero_projection():
    H, W, D = 3, 3, 8
    params = init_conv_ffn(np.random.default_rng(10), D, 1.25, "f64")
    params["fc2.W"] = np.zeros_like(params["fc2.W"])
    params["fc2.b"] = np.arange(D, dtype=np.float64)

    Y = conv_ffn(_tokens(H, W, D), H, W, params)

    assert ffn_hidden_width(D, 1.25) == 10
    assert params["fc1.W"].shape == (8, 10)
    assert params["dw"].shape == (3, 3, 10)
    assert np.allclose(Y, np.broadcast_to(np.arange(D), Y.shape))


def test_conv_ffn_checks_token_count():
    params = init_conv_ffn(np.random.default_rng(0), 4, 2.0, "f64")
    with pytest.raises(DimensionError):
        conv_ffn(np.zeros((1, 5, 4)), 2, 2, params)


# =============================================================================
# ТЕСТ 4. Пиксельная перестановка и апскейл
# =============================================================================

def test_pixel_shuffle_channel_layout():
    r, C = 2, 3
    x = np.arange(2 * 2 * C * r * r, dtype=np.float64).reshape(1, 2, 2, C * r * r)

    y = pixel_shuffle(x, r)

    assert y.shape == (1, 4, 4, C)
    for h, w, c, i, j in [(0, 0, 0, 0, 0), (1, 0, 2, 1, 1), (0, 1, 1, 0, 1), (1, 1, 2, 1, 0)]:
        assert y[0, h * r + i, w * r + j, c] == x[0, h, w, c * r * r + i * r + j]

    with pytest.raises(DimensionError):
        pixel_shuffle(np.zeros((1, 2, 2, 5)), 2)


def test_nearest_upscale_repeats_pixels():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)

    y = nearest_upscale(x, 3)

    assert y.shape == (1, 6, 6, 1)
    assert np.all(y[0, :3, 3:, 0] == 2.0)
    assert np.all(y[0, 3:, :3, 0] == 3.0)


# =============================================================================
# ТЕСТ 5. Параметры модели
# =============================================================================

def test_rib_layer_params_do_not_depend_on_window():
    small = SSTConfig(window_sizes=(4, 8, 8))
    large = dataclasses.replace(small, window_sizes=(16, 32, 32))
    rng = np.random.default_rng

    layer = init_layer_params(small, 0, rng(0), "f64")
    rib_size = sum(v.size for k, v in layer.items() if k.startswith("rib."))

    assert rib_size == rib_param_count_for(small.L, small.d_h, 8, small.heads)
    assert param_count(init_sst_params(small, rng(0))) == param_count(init_sst_params(large, rng(0)))


def test_rpb_params_grow_with_window():
    small = SSTConfig(bias="rpb", kernel="naive", window_sizes=(4,))
    large = dataclasses.replace(small, window_sizes=(8,))
    rng = np.random.default_rng

    delta = param_count(init_sst_params(large, rng(0))) - param_count(init_sst_params(small, rng(0)))

    # 3 слоя × heads × ((2·8−1)² − (2·4−1)²)
    assert delta == 3 * 2 * (15**2 - 7**2)


def test_gate_none_has_no_gate_params():
    params = init_layer_params(SSTConfig(gate="none"), 0, np.random.default_rng(0))

    assert not any(k.startswith("gate.") for k in params)
    assert "proj.W" in params


# =============================================================================
# ТЕСТ 6. Прямой проход SST-micro
# =============================================================================

def test_zero_upsampler_returns_nearest_neighbor_upscale():
    params = init_sst_params(MICRO, np.random.default_rng(0), "f64")
    params["up.W"] = np.zeros_like(params["up.W"])
    params["up.b"] = np.zeros_like(params["up.b"])
    lr = np.random.default_rng(1).random((6, 5, 3))

    sr = sst_forward(params, lr, MICRO)

    assert sr.shape == (12, 10, 3)
    assert np.allclose(sr, nearest_upscale(lr[None], 2)[0])


@pytest.mark.parametrize("scale", [2, 3, 4])
def test_forward_shapes_for_batches(scale):
    cfg = dataclasses.replace(MICRO, scale=scale)
    params = init_sst_params(cfg, np.random.default_rng(0))
    lr = np.random.default_rng(2).random((2, 5, 7, 3)).astype(np.float32)

    sr = sst_forward(params, lr, cfg)

    assert sr.shape == (2, 5 * scale, 7 * scale, 3)
    assert sr.dtype == np.float32
    assert np.all(np.isfinite(sr))


def test_forward_with_pos_token_cache_matches_and_hits():
    params = init_sst_params(MICRO, np.random.default_rng(3), "f64")
    lr = np.random.default_rng(4).random((8, 8, 3))
    cache = PosTokenCache()

    plain = sst_forward(params, lr, MICRO)
    first = sst_forward(params, lr, MICRO, cache)
    second = sst_forward(params, lr, MICRO, cache)

    assert np.allclose(first, plain, atol=1e-12)
    assert np.array_equal(first, second)
    # по одной записи на слой
    assert len(cache) == MICRO.layers
    assert cache.hits == MICRO.layers


@pytest.mark.parametrize("bias", ["none", "rope"])
def test_forward_runs_with_baseline_biases(bias):
    cfg = dataclasses.replace(MICRO, bias=bias)
    params = init_sst_params(cfg, np.random.default_rng(5))

    sr = sst_forward(params, np.random.default_rng(6).random((4, 4, 3)), cfg)

    assert sr.shape == (8, 8, 3)


def test_forward_rejects_wrong_channel_count():
    params = init_sst_params(MICRO, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        sst_forward(params, np.zeros((4, 4, 1)), MICRO)


# =============================================================================
# ТЕСТ 7. Инварианты слоя и модели
# =============================================================================

SMALL = SSTConfig(D=8, heads=2, layers=1, window_sizes=(4,), L=2, d_h=8, R=(4,))


def _plain_window_attention(x, W_q, W_k, W_v, M, heads):
    """Окна M×M, softmax(QKᵀ/√d)V по головам, обратно в карту [B, H, W, D]."""
    B, H, W, D = x.shape
    d = D // heads
    win = x.reshape(B, H // M, M, W // M, M, D).transpose(0, 1, 3, 2, 4, 5).reshape(-1, M * M, D)

    def heads_first(t):
        return t.reshape(t.shape[0], M * M, heads, d).transpose(0, 2, 1, 3)

    q, k, v = (heads_first(win @ w) for w in (W_q, W_k, W_v))
    s = q @ k.transpose(0, 1, 3, 2) / np.sqrt(d)
    p = np.exp(s - s.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    o = (p @ v).transpose(0, 2, 1, 3).reshape(-1, M * M, D)
    return o.reshape(B, H // M, W // M, M, M, D).transpose(0, 1, 3, 2, 4, 5).reshape(B, H, W, D)


def test_layer_without_gate_and_position_is_plain_window_attention():
    cfg = dataclasses.replace(SMALL, gate="none")
    params = init_layer_params(cfg, 0, np.random.default_rng(11), "f64")
    for name in ("rib.W_pq", "rib.W_pk", "ffn.fc2.W", "ffn.fc2.b"):
        params[name] = np.zeros_like(params[name])
    x = np.random.default_rng(12).standard_normal((2, 8, 8, 8))

    tape = Tape()
    P = {name: tape.constant(value) for name, value in params.items()}
    y = sst_layer_ad(tape.constant(x), P, "", cfg, 0).value

    xn = (x - x.mean(axis=-1, keepdims=True)) / np.sqrt(x.var(axis=-1, keepdims=True) + 1e-6)
    o = _plain_window_attention(xn, params["attn.W_q"], params["attn.W_k"], params["attn.W_v"], 4, 2)
    expected = x + o @ params["proj.W"] + params["proj.b"]

    assert np.max(np.abs(y - expected)) <= 1e-6


def test_shift_by_window_shifts_output_by_scaled_window():
    params = init_sst_params(SMALL, np.random.default_rng(13), "f64")
    lr = np.random.default_rng(14).random((32, 32, 3))
    M, r = 4, SMALL.scale

    sr = sst_forward(params, lr, SMALL)
    sr_shifted = sst_forward(params, np.roll(lr, (M, M), axis=(0, 1)), SMALL)

    # нулевое дополнение свёрток портит края и шов; сравниваем середину
    inner = slice(12 * r, 24 * r)
    expected = np.roll(sr, (r * M, r * M), axis=(0, 1))
    assert np.allclose(sr_shifted[inner, inner], expected[inner, inner], atol=1e-10)
