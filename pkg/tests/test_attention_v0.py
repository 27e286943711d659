import math

import numpy as np
import pytest

from rib_lab.lab_core.attention import augmented_v0, kernels_v0, window_v0
from rib_lab.lab_core.attention.augmented_v0 import (
    QKVWeights,
    augmented_width_aligned,
    build_augmented_qk,
    fused_split_gap,
    merge_heads,
    split_heads,
)
from rib_lab.lab_core.attention.kernels_v0 import (
    AttentionConfig,
    attend_naive,
    attend_streaming,
    attention_flops,
)
from rib_lab.lab_core.attention.window_v0 import (
    SST_PLUS_WINDOW_SIZES,
    SST_WINDOW_SIZES,
    WINDOW_STRATEGIES,
    cyclic_schedule,
    window_partition,
    window_reverse,
)
from rib_lab.lab_core.posbias.geometry_v0 import WindowGeometry
from rib_lab.lab_core.posbias.rib_v0 import RIBParams, rib_positional_tokens
from rib_lab.lab_core.tensor.errors_v0 import ConfigError, NumericError, UnsupportedConfigurationError


def _qkv(shape, d_v=None, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    d_v = d_v or shape[-1]
    Q = rng.standard_normal(shape).astype(dtype)
    K = rng.standard_normal(shape).astype(dtype)
    V = rng.standard_normal(shape[:-1] + (d_v,)).astype(dtype)
    return Q, K, V


# =============================================================================
# ТЕСТ 1. Окна и расписание
# =============================================================================

def test_cyclic_schedule_matches_presets():
    assert [cyclic_schedule(SST_WINDOW_SIZES, i) for i in range(6)] == [16, 32, 64, 16, 32, 64]
    assert [cyclic_schedule(SST_PLUS_WINDOW_SIZES, i) for i in range(6)] == [16, 32, 48, 32, 48, 96]
    assert cyclic_schedule([8], 5) == 8
    assert cyclic_schedule([4, 8], 7) == 8
    assert set(WINDOW_STRATEGIES) == {"cyclic", "ascending", "descending", "fixed"}

    with pytest.raises(ConfigError):
        cyclic_schedule([], 0)


def test_attention_modules_are_documented():
    for module in (augmented_v0, kernels_v0, window_v0):
        assert module.__doc__ and module.__doc__.strip(), module.__name__


@pytest.mark.parametrize("H,W,M", [(8, 8, 4), (7, 5, 4), (3, 3, 8), (1, 1, 1)])
def test_window_partition_roundtrip(H, W, M):
    x = np.random.default_rng(0).standard_normal((2, H, W, 3))

    windows, info = window_partition(x, M)

    assert windows.shape == (2 * info.n_windows, M * M, 3)
    assert np.array_equal(window_reverse(windows, info), x)
    assert info.padded == (H % M != 0 or W % M != 0)


def test_window_partition_padding_mask():
    x = np.ones((1, 5, 3, 1))

    windows, info = window_partition(x, 4)

    # дополненные токены: нули, и только они помечены как невалидные
    assert info.valid.shape == (2, 16)
    assert np.array_equal(windows[..., 0] != 0, info.valid)
    assert info.valid.sum() == 15


# =============================================================================
# ТЕСТ 2. Конфигурация ядра
# =============================================================================

def test_attention_config_validation():
    with pytest.raises(UnsupportedConfigurationError):
        AttentionConfig(heads=2, D=8, bias="rpb", kernel="streaming")
    with pytest.raises(ConfigError):
        AttentionConfig(heads=3, D=8)
    with pytest.raises(ConfigError):
        AttentionConfig(heads=2, D=8, bias="rib", R=0)

    cfg = AttentionConfig(heads=2, D=16, R=8, bias="rib")
    assert cfg.D_head == 8 and cfg.d_q == 16
    assert cfg.resolved_tile(10) == 10 and cfg.resolved_tile(1000) == 64


def test_streaming_rejects_rpb_config_object():
    Q, K, V = _qkv((1, 4, 2))
    cfg = AttentionConfig(heads=1, D=2, bias="rpb", kernel="naive")

    with pytest.raises(UnsupportedConfigurationError):
        attend_streaming(Q, K, V, cfg=cfg)


# =============================================================================
# ТЕСТ 3. Streaming ≡ naive
# =============================================================================

@pytest.mark.parametrize("N,tile,q_tile", [(1, 1, 1), (17, 3, 5), (64, 64, 64), (100, 16, 7), (65, 64, 64)])
def test_streaming_matches_naive(N, tile, q_tile):
    Q, K, V = _qkv((2, 3, N, 5), d_v=4, seed=N)
    cfg = AttentionConfig(heads=3, D=15, tile=tile, q_tile=q_tile)

    O_ref, _, P, ref_stats = attend_naive(Q, K, V)
    O, stats = attend_streaming(Q, K, V, cfg=cfg)

    assert np.allclose(O, O_ref, atol=1e-12)
    assert np.allclose(P.sum(axis=-1), 1.0)
    assert np.allclose(stats.logsumexp, ref_stats.logsumexp, atol=1e-12)


def test_streaming_with_masks_and_fully_masked_rows():
    Q, K, V = _qkv((3, 2, 20, 4), seed=1)
    mask = np.random.default_rng(2).random((3, 1, 20)) < 0.5
    mask[1] = False  # окно целиком из дополнения

    O_ref = attend_naive(Q, K, V, mask)[0]
    O = attend_streaming(Q, K, V, mask, AttentionConfig(heads=2, D=8, tile=3))[0]

    assert np.allclose(O, O_ref, atol=1e-12)
    assert np.array_equal(O[1], np.zeros_like(O[1]))


def test_streaming_f32_tolerance_and_threads_are_identical():
    Q, K, V = _qkv((8, 2, 49, 8), seed=3, dtype=np.float32)

    O_ref = attend_naive(Q, K, V)[0]
    O_one = attend_streaming(Q, K, V, cfg=AttentionConfig(heads=2, D=16, tile=16, threads=1))[0]
    O_many = attend_streaming(Q, K, V, cfg=AttentionConfig(heads=2, D=16, tile=16, threads=4))[0]

    assert O_one.dtype == np.float32
    assert np.max(np.abs(O_one - O_ref)) <= 1e-5
    assert np.array_equal(O_one, O_many)


def test_attention_rejects_nan():
    Q, K, V = _qkv((1, 4, 2))
    Q[0, 0, 0] = np.nan

    with pytest.raises(NumericError):
        attend_streaming(Q, K, V)
    with pytest.raises(NumericError):
        attend_naive(Q, K, V)


def test_naive_additive_bias():
    Q, K, V = _qkv((1, 6, 3), seed=4)
    B = np.random.default_rng(5).standard_normal((1, 6, 6))

    O, S, _, _ = attend_naive(Q, K, V, bias=B)
    P = np.exp(S - S.max(axis=-1, keepdims=True))
    P /= P.sum(axis=-1, keepdims=True)

    assert np.allclose(S, Q @ np.swapaxes(K, -1, -2) + B)
    assert np.allclose(O, P @ V)


# =============================================================================
# ТЕСТ 4. Память и FLOPs
# =============================================================================

def test_streaming_aux_memory_is_linear_and_naive_is_quadratic():
    aux, scores = {}, {}
    for N in (1024, 4096):
        Q, K, V = _qkv((1, N, 8), seed=N, dtype=np.float32)
        aux[N] = attend_streaming(Q, K, V, cfg=AttentionConfig(heads=1, D=8, tile=64))[1].peak_aux_scalars
        scores[N] = attend_naive(Q, K, V)[3].score_scalars

    assert aux[4096] / aux[1024] <= 4.2
    assert scores[4096] / scores[1024] == 16


def test_flops_closed_form():
    Q, K, V = _qkv((2, 3, 10, 4), d_v=6)

    flops = attend_streaming(Q, K, V)[1].flops

    assert flops == attention_flops(6, 10, 4, 6) == 2 * 6 * 10 * 10 * (4 + 6)
    assert attend_naive(Q, K, V)[3].flops == flops


# =============================================================================
# ТЕСТ 5. Слитный Q/K для RIB
# =============================================================================

def test_fused_split_identity_exact_in_f64_and_broken_scale_detected():
    rng = np.random.default_rng(6)
    Q_c, K_c = rng.uniform(-1, 1, (2, 12, 16))
    Q_p, K_p = rng.uniform(-1, 1, (2, 12, 8))

    assert fused_split_gap(Q_c, K_c, Q_p, K_p) <= 1e-12
    assert fused_split_gap(Q_c, K_c, Q_p, K_p, positional_scale=1.0 / 8) > 1e-3


def test_augmented_width_alignment():
    assert augmented_width_aligned(16, 16)
    assert augmented_width_aligned(32, 8)
    assert not augmented_width_aligned(16, 10)


def test_split_merge_heads_inverse():
    x = np.arange(2 * 5 * 12, dtype=np.float64).reshape(2, 5, 12)

    h = split_heads(x, 3)

    assert h.shape == (2, 3, 5, 4)
    assert np.array_equal(h[0, 1, 2], x[0, 2, 4:8])
    assert np.array_equal(merge_heads(h), x)


def _rib_setup(M=4, D=8, heads=2, R=4, seed=0):
    rng = np.random.default_rng(seed)
    geom = WindowGeometry.square(M, "f64")
    p = RIBParams.init(3, 8, R, heads, rng, "f64")
    weights = QKVWeights.init(D, rng, "f64")
    X = rng.standard_normal((3, geom.N, D))
    return geom, p, weights, X


def test_rib_streaming_equals_naive_with_explicit_bias():
    geom, p, weights, X = _rib_setup()
    cfg = AttentionConfig(heads=2, D=8, R=4, bias="rib", tile=5)
    q_p, k_p = rib_positional_tokens(geom, p)

    Q, K, V = build_augmented_qk(X, weights, geom, cfg, pos=(q_p, k_p))
    O = attend_streaming(Q, K, V, cfg=cfg)[0]

    plain = AttentionConfig(heads=2, D=8)
    Qc, Kc, Vc = build_augmented_qk(X, weights, geom, plain)
    S_p = q_p @ np.swapaxes(k_p, -1, -2) / math.sqrt(4)
    O_ref = attend_naive(Qc, Kc, Vc, bias=S_p)[0]

    assert Q.shape == (3, 2, geom.N, 8)
    assert np.allclose(O, O_ref, atol=1e-12)


def test_rib_attention_is_permutation_equivariant():
    geom, p, weights, X = _rib_setup(seed=1)
    cfg = AttentionConfig(heads=2, D=8, R=4, bias="rib")
    perm = np.random.default_rng(9).permutation(geom.N)
    geom_perm = geom.permuted(perm)

    O = attend_streaming(*build_augmented_qk(X, weights, geom, cfg, pos=rib_positional_tokens(geom, p)), cfg=cfg)[0]
    O_perm = attend_streaming(
        *build_augmented_qk(X[:, perm], weights, geom_perm, cfg, pos=rib_positional_tokens(geom_perm, p)), cfg=cfg
    )[0]

    assert np.allclose(O_perm, O[:, :, perm], atol=1e-12)


def test_rib_scores_separate_content_and_position():
    geom, p, weights, X = _rib_setup(seed=2)
    X2 = np.random.default_rng(5).standard_normal(X.shape)
    geom2 = geom.permuted(np.random.default_rng(6).permutation(geom.N))
    rib = AttentionConfig(heads=2, D=8, R=4, bias="rib", kernel="naive")
    plain = AttentionConfig(heads=2, D=8, kernel="naive")

    def scores(x, g, cfg):
        pos = rib_positional_tokens(g, p) if cfg.bias == "rib" else None
        return attend_naive(*build_augmented_qk(x, weights, g, cfg, pos=pos))[1]

    def bias_term(g):
        q_p, k_p = rib_positional_tokens(g, p)
        return q_p @ np.swapaxes(k_p, -1, -2) / math.sqrt(4)

    # другой X: меняется только контентный член
    dS = scores(X2, geom, rib) - scores(X, geom, rib)
    assert np.allclose(dS, scores(X2, geom, plain) - scores(X, geom, plain), atol=1e-12)

    # другая геометрия: контентный член побитово тот же, меняется только смещение
    assert np.array_equal(scores(X, geom2, plain), scores(X, geom, plain))
    dS = scores(X, geom2, rib) - scores(X, geom, rib)
    assert np.allclose(dS, bias_term(geom2) - bias_term(geom), atol=1e-12)
    assert not np.allclose(bias_term(geom2), bias_term(geom))


def test_rope_attention_depends_on_position_but_none_does_not():
    geom, _, weights, _ = _rib_setup(D=8, heads=2)
    # одинаковый контент во всех токенах
    X = np.broadcast_to(np.random.default_rng(3).standard_normal(8), (1, geom.N, 8))
    for bias, expect_uniform in (("none", True), ("rope", False)):
        cfg = AttentionConfig(heads=2, D=8, bias=bias)
        Q, K, _ = build_augmented_qk(X, weights, geom, cfg)
        S = Q @ np.swapaxes(K, -1, -2)
        uniform = np.allclose(S, S[..., :1, :1])
        assert uniform == expect_uniform, bias
