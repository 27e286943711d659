"""Наборы проверок для `rib-lab verify`.

Каждый набор возвращает SuiteResult; итог: таблица pass/fail
(Markdown через pandas) и строка-сводка для машин.
"""
from __future__ import annotations

import math
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from rib_lab.lab_core.attention.augmented_v0 import QKVWeights, build_augmented_qk, fused_split_gap
from rib_lab.lab_core.attention.kernels_v0 import (
    AttentionConfig,
    attend_naive,
    attend_naive_ad,
    attend_streaming,
    attend_streaming_ad,
)
from rib_lab.lab_core.attention.window_v0 import (
    SST_PLUS_WINDOW_SIZES,
    SST_WINDOW_SIZES,
    cyclic_schedule,
    window_partition,
    window_reverse,
)
from rib_lab.lab_core.autodiff import ops_v0 as ops
from rib_lab.lab_core.autodiff.gradcheck_v0 import grad_check
from rib_lab.lab_core.autodiff.tape_v0 import Tape, backward
from rib_lab.lab_core.blocks.layers_v0 import (
    cla_gate_ad,
    conv_ffn_ad,
    init_cla,
    init_conv_ffn,
    init_linear,
)
from rib_lab.lab_core.blocks.model_v0 import init_layer_params, sst_layer_ad
from rib_lab.lab_core.config.config_v0 import SST_PRESETS
from rib_lab.lab_core.logging.logging_v1 import get_logger
from rib_lab.lab_core.posbias.analysis_v0 import (
    bias_by_offset,
    is_non_monotonic,
    logits_along_row,
    offset_group_sizes,
    rib_bias_map,
    rib_toy_logits,
    rope_toy_logits,
    same_content_logit_variance,
    write_offset_table,
)
from rib_lab.lab_core.posbias.geometry_v0 import WindowGeometry
from rib_lab.lab_core.posbias.rib_v0 import (
    PosTokenCache,
    RIBParams,
    fourier_embed,
    rib_param_count_for,
    rib_positional_tokens,
    rib_tokens_ad,
)
from rib_lab.lab_core.posbias.rpb_v0 import relative_position_index, rpb_param_count
from rib_lab.lab_core.tensor.errors_v0 import ConfigError
from rib_lab.lab_core.tensor.tensor_v0 import resolve_dtype


logger = get_logger("verify")


@dataclass
class SuiteResult:
    suite: str
    passed: bool
    cases: int
    max_error: float
    tol: float
    detail: str = ""


@dataclass(frozen=True)
class VerifyOptions:
    dtype: str = "f32"
    seed: int = 0
    break_scaling: bool = False
    # куда писать CSV-артефакты (None: временный каталог)
    artifacts_dir: Optional[str] = None

    @property
    def f64(self) -> bool:
        return self.dtype == "f64"

    @property
    def tol(self) -> float:
        """Допуск для точных тождеств."""
        return 1e-12 if self.f64 else 1e-5


# ---------------------------------------------------------------------------
# Наборы
# ---------------------------------------------------------------------------


def suite_fused_split(opts: VerifyOptions, cases: int = 500) -> SuiteResult:
    """Слитное скалярное произведение ≡ контентный член + член смещения."""
    rng = np.random.default_rng(opts.seed)
    dt = resolve_dtype(opts.dtype)
    worst = 0.0
    worst_case = ""
    for _ in range(cases):
        D_head, R, N = int(rng.integers(1, 65)), int(rng.integers(1, 33)), int(rng.integers(1, 65))
        Q_c, K_c = (rng.uniform(-1, 1, (N, D_head)).astype(dt) for _ in range(2))
        Q_p, K_p = (rng.uniform(-1, 1, (N, R)).astype(dt) for _ in range(2))
        # негативный контроль: масштаб 1/R вместо 1/√R
        ps = 1.0 / R if opts.break_scaling else None
        gap = fused_split_gap(Q_c, K_c, Q_p, K_p, positional_scale=ps)
        if gap > worst:
            worst, worst_case = gap, f"D_head={D_head} R={R} N={N}"
    return SuiteResult("fused_split_identity", worst <= opts.tol, cases, worst, opts.tol, worst_case)


def _random_mask(rng: np.random.Generator, lead: int, N: int) -> Optional[np.ndarray]:
    kind = rng.integers(3)
    if kind == 0:
        return None
    if kind == 1:
        # хвост как у дополненного окна
        valid = int(rng.integers(1, N + 1))
        mask = np.zeros((lead, 1, N), dtype=bool)
        mask[..., :valid] = True
        return mask
    return rng.random((lead, 1, N)) < 0.7


def suite_streaming(opts: VerifyOptions, cases: int = 200) -> SuiteResult:
    """Потоковое ядро совпадает с naive, включая маски и N не кратные tile."""
    rng = np.random.default_rng(opts.seed + 1)
    dt = resolve_dtype(opts.dtype)
    worst = 0.0
    worst_case = ""
    for _ in range(cases):
        N = int(rng.integers(1, 258))
        tile = int(rng.choice([1, 3, 16, 64]))
        heads = int(rng.choice([1, 3]))
        lead = int(rng.integers(1, 3))
        d = int(rng.integers(1, 17))
        Q, K, V = (rng.standard_normal((lead, heads, N, d)).astype(dt) for _ in range(3))
        mask = _random_mask(rng, lead, N)
        cfg = AttentionConfig(heads=heads, D=heads * d, tile=tile)
        O_naive = attend_naive(Q, K, V, mask)[0]
        O_stream = attend_streaming(Q, K, V, mask, cfg)[0]
        err = float(np.max(np.abs(O_naive - O_stream)))
        if err > worst:
            worst, worst_case = err, f"N={N} tile={tile} heads={heads}"
    return SuiteResult("streaming_vs_naive", worst <= opts.tol, cases, worst, opts.tol, worst_case)


def suite_streaming_grad(opts: VerifyOptions, cases: int = 20) -> SuiteResult:
    """Градиенты потокового ядра совпадают с градиентами naive."""
    rng = np.random.default_rng(opts.seed + 2)
    dt = resolve_dtype(opts.dtype)
    worst = 0.0
    for _ in range(cases):
        N = int(rng.integers(1, 70))
        tile = int(rng.choice([1, 3, 16, 64]))
        d = int(rng.integers(1, 9))
        values = {name: rng.standard_normal((2, N, d)).astype(dt) for name in ("q", "k", "v")}
        weight = rng.standard_normal((2, N, d)).astype(dt)
        mask = _random_mask(rng, 1, N)
        mask = None if mask is None else mask[0]
        cfg = AttentionConfig(heads=2, D=2 * d, tile=tile)

        grads = []
        for kernel in ("naive", "streaming"):
            tape = Tape()
            P = tape.params(values)
            if kernel == "naive":
                out = attend_naive_ad(P["q"], P["k"], P["v"], mask)
            else:
                out = attend_streaming_ad(P["q"], P["k"], P["v"], mask, cfg)
            loss = ops.sum_all(out * weight)
            grads.append(backward(tape, loss))
        for name in values:
            worst = max(worst, float(np.max(np.abs(grads[0][name] - grads[1][name]))))
    return SuiteResult("streaming_grad", worst <= opts.tol, cases, worst, opts.tol)


def suite_memory(opts: VerifyOptions) -> SuiteResult:
    """Пик вспомогательной памяти потокового ядра линеен по N; буфер naive растёт ×16."""
    rng = np.random.default_rng(opts.seed + 3)
    dt = resolve_dtype(opts.dtype)
    aux = {}
    scores = {}
    for N in (1024, 4096):
        Q, K, V = (rng.standard_normal((1, N, 8)).astype(dt) for _ in range(3))
        aux[N] = attend_streaming(Q, K, V, cfg=AttentionConfig(heads=1, D=8, tile=64))[1].peak_aux_scalars
        scores[N] = attend_naive(Q, K, V)[3].score_scalars
    ratio = aux[4096] / aux[1024]
    naive_ratio = scores[4096] / scores[1024]
    passed = ratio <= 4.2 and naive_ratio == 16
    return SuiteResult(
        "non_materialization", passed, 2, ratio, 4.2, f"streaming x{ratio:.3f}, naive scores x{naive_ratio:.0f}"
    )


def suite_param_counts(opts: VerifyOptions) -> SuiteResult:
    counts = {M: rib_param_count_for(10, 32, 18, 6) for M in (8, 16, 32, 64, 96)}
    rib_ok = len(set(counts.values())) == 1 and counts[8] == 8288
    rpb_ok = rpb_param_count(64, 6) == 96774 and all(
        rpb_param_count(M, 6) == 6 * (2 * M - 1) ** 2 for M in (1, 8, 16, 32, 96)
    )
    return SuiteResult("param_counts", rib_ok and rpb_ok, 10, 0.0, 0.0, f"rib={counts[8]} rpb(M=64,h=6)=96774")


def suite_cache(opts: VerifyOptions) -> SuiteResult:
    """Токены из кэша побитово равны свежим и дают побитово тот же выход внимания."""
    rng = np.random.default_rng(opts.seed + 4)
    dt = resolve_dtype(opts.dtype)
    geom = WindowGeometry.square(8, dt)
    p = RIBParams.init(4, 16, 8, 2, rng, dt)
    cache = PosTokenCache()
    first = cache.get(geom, p)
    second = cache.get(geom, p)
    fresh = rib_positional_tokens(geom, p)
    same_tokens = all(np.array_equal(a, b) for a, b in zip(first, fresh)) and first[0] is second[0]

    cfg = AttentionConfig(heads=2, D=16, R=8, bias="rib")
    X = rng.standard_normal((geom.N, 16)).astype(dt)
    w = QKVWeights.init(16, rng, dt)
    O_cached = attend_streaming(*build_augmented_qk(X, w, geom, cfg, pos=first), cfg=cfg)[0]
    O_fresh = attend_streaming(*build_augmented_qk(X, w, geom, cfg, pos=fresh), cfg=cfg)[0]
    passed = same_tokens and np.array_equal(O_cached, O_fresh)
    return SuiteResult("pos_token_cache", bool(passed), 2, 0.0, 0.0, f"hits={cache.hits} misses={cache.misses}")


def _grad_suite(name: str, f, params, tol: float, eps: float, seed: int) -> SuiteResult:
    report = grad_check(f, params, eps=eps, tol=tol, coords_per_param=20, seed=seed)
    return SuiteResult(name, report.passed, report.checked, report.max_rel_error, tol, report.summary)


def suite_gradients(opts: VerifyOptions) -> List[SuiteResult]:
    """Аналитические градиенты против центральных разностей: RIB, CLA, ConvFFN, слой SST-micro."""
    dt = resolve_dtype(opts.dtype)
    tol, eps = (1e-6, 1e-5) if opts.f64 else (1e-3, 1e-3)
    rng = np.random.default_rng(opts.seed + 5)
    results = []

    geom = WindowGeometry.square(4, dt)
    rib = RIBParams.init(3, 8, 4, 2, rng, dt)
    embed = fourier_embed(geom.coords, 3)
    w_rib = rng.standard_normal((2, geom.N, geom.N)).astype(dt) / geom.N

    def rib_objective(tape, P):
        q_p, k_p = rib_tokens_ad(tape.constant(embed), P["W_h"], P["b_h"], P["W_pq"], P["W_pk"], rib.activation)
        s = ops.matmul(q_p, ops.swap_last(k_p)) * (1.0 / math.sqrt(rib.R))
        return ops.sum_all(s * w_rib)

    results.append(_grad_suite("grad_rib", rib_objective, rib.to_dict(), tol, eps, opts.seed))

    H = W = 4
    D = 8
    x = rng.standard_normal((1, H * W, D)).astype(dt)
    o = rng.standard_normal((1, H * W, D)).astype(dt)
    w_out = rng.standard_normal((1, H * W, D)).astype(dt) / (H * W)
    cla = init_cla(rng, D, dt, "gate.")
    cla.update(init_linear(rng, D, D, dt, "proj."))

    def cla_objective(tape, P):
        y = cla_gate_ad(tape.constant(x), tape.constant(o), H, W, P, "gate.", "proj.", "cla")
        return ops.sum_all(y * w_out)

    results.append(_grad_suite("grad_cla", cla_objective, cla, tol, eps, opts.seed))

    ffn = init_conv_ffn(rng, D, 2.0, dt, "ffn.")

    def ffn_objective(tape, P):
        return ops.sum_all(conv_ffn_ad(tape.constant(x), H, W, P, "ffn.") * w_out)

    results.append(_grad_suite("grad_conv_ffn", ffn_objective, ffn, tol, eps, opts.seed))

    cfg = SST_PRESETS["sst-micro"]
    layer_x = rng.standard_normal((1, 8, 8, cfg.D)).astype(dt)
    layer_w = rng.standard_normal((1, 8, 8, cfg.D)).astype(dt) / 64
    layer_params = init_layer_params(cfg, 1, rng, dt)

    def layer_objective(tape, P):
        return ops.sum_all(sst_layer_ad(tape.constant(layer_x), P, "", cfg, 1) * layer_w)

    layer_tol = tol if opts.f64 else 5e-3
    results.append(_grad_suite("grad_sst_layer", layer_objective, layer_params, layer_tol, eps, opts.seed))
    return results


def suite_schedules(opts: VerifyOptions) -> SuiteResult:
    sst = [cyclic_schedule(SST_WINDOW_SIZES, i) for i in range(6)]
    plus = [cyclic_schedule(SST_PLUS_WINDOW_SIZES, i) for i in range(6)]
    single = {cyclic_schedule([64], i) for i in range(10)}
    passed = sst == [16, 32, 64, 16, 32, 64] and plus == [16, 32, 48, 32, 48, 96] and single == {64}
    return SuiteResult("cyclic_schedule", passed, 3, 0.0, 0.0)


def suite_windows(opts: VerifyOptions, cases: int = 50) -> SuiteResult:
    rng = np.random.default_rng(opts.seed + 6)
    worst = 0.0
    for _ in range(cases):
        H, W, M = int(rng.integers(1, 40)), int(rng.integers(1, 40)), int(rng.integers(1, 17))
        x = rng.standard_normal((2, H, W, 3))
        windows, info = window_partition(x, M)
        worst = max(worst, float(np.max(np.abs(window_reverse(windows, info) - x))))
    return SuiteResult("window_roundtrip", worst == 0.0, cases, worst, 0.0)


def suite_offsets(opts: VerifyOptions, M: int = 8) -> SuiteResult:
    """Таблица средних смещений RIB по (Δy, Δx): размеры групп точные, CSV пишется и читается."""

    def counted(m: int) -> np.ndarray:
        return np.bincount(relative_position_index(m).ravel(), minlength=(2 * m - 1) ** 2)

    sizes_ok = all(np.array_equal(offset_group_sizes(m), counted(m)) for m in (1, 2, 4, M))
    geom = WindowGeometry.square(M, "f64")
    S_p = rib_bias_map(geom, RIBParams.init(4, 16, 8, 1, np.random.default_rng(opts.seed + 8), "f64"))[0]

    with tempfile.TemporaryDirectory() as tmp:
        out_dir = Path(opts.artifacts_dir or tmp)
        path = write_offset_table(S_p, M, out_dir / "bias_offsets.csv")
        df = pd.read_csv(path)
    gap = float(np.max(np.abs(df["mean_bias"].to_numpy() - bias_by_offset(S_p, M))))
    passed = sizes_ok and len(df) == (2 * M - 1) ** 2 and gap <= opts.tol
    return SuiteResult("offset_group_sizes", bool(passed), 5, gap, opts.tol, f"rows={len(df)} csv={path.name}")


def suite_rope_toy(opts: VerifyOptions) -> SuiteResult:
    """Без позиций одинаковый контент даёт одинаковые логиты; RoPE их различает."""
    S_plain, labels = rope_toy_logits(use_rope=False, seed=opts.seed)
    S_rope, _ = rope_toy_logits(use_rope=True, seed=opts.seed)
    var_plain = same_content_logit_variance(S_plain, labels)
    var_rope = same_content_logit_variance(S_rope, labels)
    non_monotonic = is_non_monotonic(logits_along_row(S_rope, math.isqrt(S_rope.shape[0])))
    passed = var_plain < 1e-20 and var_rope > 0 and non_monotonic
    return SuiteResult(
        "rope_toy",
        passed,
        2,
        var_plain,
        1e-20,
        f"var(plain)={var_plain:.2e} var(rope)={var_rope:.3e} non_monotonic={non_monotonic}",
    )


def suite_rib_toy(opts: VerifyOptions) -> SuiteResult:
    """RIB на той же раскладке: контентный член побитово прежний, различается только смещение."""
    toy = rib_toy_logits(seed=opts.seed)
    other = rib_toy_logits(
        seed=opts.seed,
        tokens=np.random.default_rng(opts.seed + 7).standard_normal(toy.content.shape[:1] + (32,)),
    )
    var_content = same_content_logit_variance(toy.content, toy.labels)
    var_bias = same_content_logit_variance(toy.bias, toy.labels)
    # смещение = Q_pK_pᵀ/√R и не зависит от контента
    gap = max(float(np.max(np.abs(toy.bias - toy.S_p))), float(np.max(np.abs(other.bias - toy.S_p))))
    unchanged = toy.content_unchanged and other.content_unchanged
    passed = unchanged and var_content < 1e-20 and var_bias > 0 and gap <= opts.tol
    return SuiteResult(
        "rib_toy",
        bool(passed),
        2,
        gap,
        opts.tol,
        f"content_unchanged={unchanged} var(content)={var_content:.2e} var(bias)={var_bias:.3e}",
    )


SUITES: Dict[str, Callable[[VerifyOptions], object]] = {
    "fused_split_identity": suite_fused_split,
    "streaming_vs_naive": suite_streaming,
    "streaming_grad": suite_streaming_grad,
    "non_materialization": suite_memory,
    "param_counts": suite_param_counts,
    "pos_token_cache": suite_cache,
    "gradients": suite_gradients,
    "cyclic_schedule": suite_schedules,
    "window_roundtrip": suite_windows,
    "offset_group_sizes": suite_offsets,
    "rope_toy": suite_rope_toy,
    "rib_toy": suite_rib_toy,
}


def run_verify(opts: VerifyOptions, only: Optional[List[str]] = None) -> List[SuiteResult]:
    unknown = sorted(set(only or ()) - set(SUITES))
    if unknown:
        raise ConfigError(f"Unknown verify suite(s): {unknown}; known: {sorted(SUITES)}")
    results: List[SuiteResult] = []
    for name, suite in SUITES.items():
        if only and name not in only:
            continue
        logger.info("suite_start", extra={"event": "suite_start", "suite": name, "dtype": opts.dtype})
        out = suite(opts)
        for result in out if isinstance(out, list) else [out]:
            results.append(result)
            log = logger.info if result.passed else logger.error
            log("suite_done", extra={"event": "suite_done", **asdict(result)})
    return results


def results_frame(results: List[SuiteResult]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in results], columns=["suite", "passed", "cases", "max_error", "tol", "detail"])


def render_verify_markdown(results: List[SuiteResult], opts: VerifyOptions) -> str:
    lines = [f"# Verify ({opts.dtype})\n"]
    lines.append(results_frame(results).to_markdown(index=False))
    failed = [r.suite for r in results if not r.passed]
    lines.append("")
    lines.append(summary_line(results))
    if failed:
        lines.append("")
        lines.append("Failed: " + ", ".join(failed))
        for r in results:
            if not r.passed:
                lines.append(f"- {r.suite}: max_error={r.max_error:.3e} tol={r.tol:.1e} case: {r.detail or '-'}")
    return "\n".join(lines) + "\n"


def summary_line(results: List[SuiteResult]) -> str:
    failed = [r.suite for r in results if not r.passed]
    status = "ok" if not failed else "fail"
    return f"verify status={status} passed={len(results) - len(failed)} failed={len(failed)}"


__all__ = [
    "SuiteResult",
    "VerifyOptions",
    "SUITES",
    "run_verify",
    "results_frame",
    "render_verify_markdown",
    "summary_line",
]
