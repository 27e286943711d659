import threading

import numpy as np
import pytest

from rib_lab.lab_core.autodiff import ops_v0 as ops
from rib_lab.lab_core.autodiff.gradcheck_v0 import grad_check
from rib_lab.lab_core.autodiff.tape_v0 import Tape, backward
from rib_lab.lab_core.posbias.geometry_v0 import WindowGeometry, axis_coords
from rib_lab.lab_core.posbias.rib_v0 import (
    PosTokenCache,
    RIBParams,
    embed_width,
    fourier_embed,
    rib_param_count_for,
    rib_positional_tokens,
    rib_tokens_ad,
    rib_tokens_on_tape,
)
from rib_lab.lab_core.posbias.rope_v0 import RoPEConfig, rope_rotate, rope_rotate_ad
from rib_lab.lab_core.posbias.rpb_v0 import (
    RPBTable,
    relative_position_index,
    rpb_bias_ad,
    rpb_bias_matrix,
    rpb_param_count,
)
from rib_lab.lab_core.tensor.errors_v0 import ConfigError, DimensionError


def _rib(M=4, L=3, d_h=8, R=4, heads=2, seed=0, dtype="f64", activation="relu"):
    rng = np.random.default_rng(seed)
    return WindowGeometry.square(M, dtype), RIBParams.init(L, d_h, R, heads, rng, dtype, activation)


# =============================================================================
# ТЕСТ 1. Геометрия окна
# =============================================================================

def test_axis_coords_inclusive_endpoints():
    assert np.array_equal(axis_coords(1), [0.0])
    assert np.allclose(axis_coords(3), [-1.0, 0.0, 1.0])
    with pytest.raises(DimensionError):
        axis_coords(0)


def test_square_geometry_row_major_and_offsets():
    geom = WindowGeometry.square(3, "f64")

    assert geom.N == 9
    # токен 5 = (row 1, col 2)
    assert np.allclose(geom.coords[5], [0.0, 1.0])
    dy, dx = geom.relative_offsets()
    assert dy[5, 0] == 1 and dx[5, 0] == 2
    assert np.array_equal(dy, -dy.T)


# =============================================================================
# ТЕСТ 2. Фурье-признаки и MLP
# =============================================================================

def test_fourier_embed_layout():
    x = np.array([[0.5, -0.25]])

    e = fourier_embed(x, 2)

    assert e.shape == (1, embed_width(2)) == (1, 10)
    assert np.allclose(e[0, :2], x[0])
    assert np.allclose(e[0, 2:4], np.sin(x[0]))
    assert np.allclose(e[0, 8:10], np.cos(2.0 * x[0]))


def test_fourier_embed_rejects_bad_input():
    with pytest.raises(ConfigError):
        fourier_embed(np.zeros((1, 2)), -1)
    with pytest.raises(DimensionError):
        fourier_embed(np.zeros((1, 3)), 1)
    with pytest.raises(DimensionError):
        fourier_embed(np.array([[1.5, 0.0]]), 1)


def test_rib_param_count_is_independent_of_window():
    counts = {M: RIBParams.init(10, 32, 18, 6, np.random.default_rng(0)).param_count for M in (8, 64)}

    assert rib_param_count_for(10, 32, 18, 6) == 8288
    assert set(counts.values()) == {8288}


def test_rib_tokens_shapes_and_permutation_equivariance():
    geom, p = _rib()
    perm = np.random.default_rng(5).permutation(geom.N)

    q_p, k_p = rib_positional_tokens(geom, p)
    q_perm, k_perm = rib_positional_tokens(geom.permuted(perm), p)

    assert q_p.shape == k_p.shape == (2, geom.N, 4)
    assert np.allclose(q_perm, q_p[:, perm])
    assert np.allclose(k_perm, k_p[:, perm])


def test_rib_tokens_dtype_mismatch():
    _, p = _rib(dtype="f64")
    with pytest.raises(DimensionError):
        rib_positional_tokens(WindowGeometry.square(4, "f32"), p)


def test_rib_zero_band_and_sine_activation_still_work():
    geom, p = _rib(L=0, activation="sine")

    q_p, _ = rib_positional_tokens(geom, p)

    assert q_p.shape == (2, geom.N, 4)
    assert np.all(np.isfinite(q_p))


def test_rib_gradients_match_finite_differences():
    geom, p = _rib(seed=2)
    w = np.random.default_rng(3).standard_normal((2, geom.N, geom.N))

    # rib_tokens_on_tape регистрирует параметры с префиксом
    tape = Tape()
    q_p, k_p = rib_tokens_on_tape(tape, geom, p, prefix="rib.")
    grads = backward(tape, ops.sum_all(ops.matmul(q_p, ops.swap_last(k_p)) * w))
    assert set(grads) == {"rib.W_h", "rib.b_h", "rib.W_pq", "rib.W_pk"}

    def objective(tape, P):
        embed = tape.constant(fourier_embed(geom.coords, p.L))
        q, k = rib_tokens_ad(embed, P["W_h"], P["b_h"], P["W_pq"], P["W_pk"], p.activation)
        return ops.sum_all(ops.matmul(q, ops.swap_last(k)) * w)

    report = grad_check(objective, p.to_dict(), eps=1e-5, tol=1e-6)
    assert report.passed, report.summary


# =============================================================================
# ТЕСТ 3. Кэш позиционных токенов
# =============================================================================

def test_cache_hit_is_bitwise_identical_and_read_only():
    geom, p = _rib()
    cache = PosTokenCache()

    first = cache.get(geom, p)
    second = cache.get(geom, p)
    fresh = rib_positional_tokens(geom, p)

    assert cache.misses == 1 and cache.hits == 1 and len(cache) == 1
    assert first[0] is second[0]
    assert np.array_equal(first[0], fresh[0]) and np.array_equal(first[1], fresh[1])
    assert not first[0].flags.writeable


def test_cache_key_changes_with_params_and_skips_permuted_geometry():
    geom, p = _rib()
    cache = PosTokenCache()
    cache.get(geom, p)

    updated = p.replace(W_pq=p.W_pq + 1.0)
    cache.get(geom, updated)
    cache.get(geom.permuted(list(reversed(range(geom.N)))), p)

    assert updated.version != p.version
    assert len(cache) == 2


def test_cache_concurrent_readers_see_one_entry():
    geom, p = _rib(M=6)
    cache = PosTokenCache()
    results = []

    def worker():
        results.append(cache.get(geom, p)[0])

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    assert len(cache) == 1
    assert all(np.array_equal(r, results[0]) for r in results)


def test_cache_counters_are_exact_under_threads():
    geom, p = _rib(M=4)
    cache = PosTokenCache()
    cache.get(geom, p)
    barrier = threading.Barrier(8)

    def worker():
        barrier.wait()
        for _ in range(200):
            cache.get(geom, p)

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    assert cache.misses == 1
    assert cache.hits == 8 * 200


# =============================================================================
# ТЕСТ 4. RPB
# =============================================================================

def test_rpb_index_range_and_param_count():
    idx = relative_position_index(4)

    assert idx.shape == (16, 16)
    assert idx.min() == 0 and idx.max() == 7 * 7 - 1
    # нулевое смещение: центр таблицы
    assert np.all(np.diag(idx) == 3 * 7 + 3)
    assert rpb_param_count(64, 6) == 96774


def test_rpb_bias_shared_by_equal_offsets():
    table = RPBTable.init(3, 2, np.random.default_rng(0), "f64")
    geom = WindowGeometry.square(3, "f64")

    B = rpb_bias_matrix(table)
    dy, dx = geom.relative_offsets()

    same = (dy == dy[4, 0]) & (dx == dx[4, 0])
    assert B.shape == (2, 9, 9)
    assert np.allclose(B[:, same], B[:, 4, 0][:, None])


def test_rpb_permuted_geometry_and_gradient():
    table = RPBTable.init(3, 1, np.random.default_rng(1), "f64")
    perm = np.random.default_rng(2).permutation(9)
    geom = WindowGeometry.square(3, "f64").permuted(perm)

    B = rpb_bias_matrix(table)
    B_perm = rpb_bias_matrix(table, geom)
    assert np.allclose(B_perm, B[:, perm][:, :, perm])

    tape = Tape()
    values = tape.param("table", table.values)
    grads = backward(tape, ops.sum_all(rpb_bias_ad(values, 3)))
    # градиент ячейки = число пар с этим смещением
    assert grads["table"][0, 2 * 5 + 2] == 9
    assert grads["table"][0, 0] == 1


def test_rpb_zero_init_without_rng():
    assert not RPBTable.init(2, 3).values.any()


# =============================================================================
# ТЕСТ 5. RoPE
# =============================================================================

def test_rope_requires_dim_divisible_by_four():
    with pytest.raises(ConfigError):
        RoPEConfig(D_head=6)


def test_rope_preserves_norms_and_relative_positions():
    geom = WindowGeometry.square(5, "f64")
    cfg = RoPEConfig(D_head=8)
    rng = np.random.default_rng(4)
    q = np.broadcast_to(rng.standard_normal(8), (1, geom.N, 8))
    k = np.broadcast_to(rng.standard_normal(8), (1, geom.N, 8))

    qr, kr = rope_rotate(q, geom, cfg), rope_rotate(k, geom, cfg)
    S = (qr @ np.swapaxes(kr, -1, -2))[0]

    assert np.allclose(np.linalg.norm(qr, axis=-1), np.linalg.norm(q, axis=-1))
    # одинаковый контент + одинаковое смещение → одинаковый логит
    dy, dx = geom.relative_offsets()
    for i, j in [(6, 0), (12, 6), (24, 18)]:
        assert dy[i, j] == 1 and dx[i, j] == 1
        assert S[i, j] == pytest.approx(S[6, 0], abs=1e-5)


def test_rope_backward_is_inverse_rotation():
    geom = WindowGeometry.square(3, "f64")
    cfg = RoPEConfig(D_head=4)
    x = np.random.default_rng(0).standard_normal((2, 9, 4))
    w = np.random.default_rng(1).standard_normal((2, 9, 4))

    report = grad_check(lambda tape, P: ops.sum_all(rope_rotate_ad(P["x"], geom, cfg) * w), {"x": x}, eps=1e-5, tol=1e-8)

    assert report.passed, report.summary
