import pandas as pd
import pytest

from rib_lab.lab_core.bench.verify_v0 import (
    SUITES,
    VerifyOptions,
    render_verify_markdown,
    run_verify,
    summary_line,
)
from rib_lab.lab_core.tensor.errors_v0 import ConfigError


CHEAP = [
    "fused_split_identity",
    "param_counts",
    "pos_token_cache",
    "cyclic_schedule",
    "window_roundtrip",
    "offset_group_sizes",
    "rope_toy",
    "rib_toy",
]


# =============================================================================
# ТЕСТ 1. Наборы проходят на исправном коде
# =============================================================================

@pytest.mark.parametrize("dtype", ["f32", "f64"])
def test_cheap_suites_pass(dtype):
    results = run_verify(VerifyOptions(dtype=dtype), only=CHEAP)

    assert [r.suite for r in results] == CHEAP
    assert all(r.passed for r in results), [r for r in results if not r.passed]


def test_kernel_suites_pass_in_f64():
    results = run_verify(VerifyOptions(dtype="f64"), only=["streaming_vs_naive", "streaming_grad", "non_materialization"])

    assert all(r.passed for r in results), [r for r in results if not r.passed]


def test_streaming_grad_uses_output_tolerance_in_f32():
    (result,) = run_verify(VerifyOptions(dtype="f32"), only=["streaming_grad"])

    assert result.tol == 1e-5
    assert result.passed, result


def test_gradient_suites_pass_in_f64():
    results = run_verify(VerifyOptions(dtype="f64"), only=["gradients"])

    assert [r.suite for r in results] == ["grad_rib", "grad_cla", "grad_conv_ffn", "grad_sst_layer"]
    assert all(r.passed for r in results), [r.detail for r in results if not r.passed]


# =============================================================================
# ТЕСТ 2. Игрушечная раскладка и таблица смещений
# =============================================================================

def test_rib_toy_keeps_content_term_bitwise():
    (result,) = run_verify(VerifyOptions(dtype="f64"), only=["rib_toy"])

    assert result.passed, result.detail
    assert "content_unchanged=True" in result.detail
    assert result.max_error <= 1e-12


def test_offset_suite_writes_csv(tmp_path):
    opts = VerifyOptions(dtype="f64", artifacts_dir=str(tmp_path / "art"))

    (result,) = run_verify(opts, only=["offset_group_sizes"])

    assert result.passed, result
    df = pd.read_csv(tmp_path / "art" / "bias_offsets.csv")
    assert len(df) == 15 * 15
    assert df.loc[(df.dy == 0) & (df.dx == 0)].shape[0] == 1


# =============================================================================
# ТЕСТ 3. Негативный контроль и отчёт
# =============================================================================

def test_broken_scaling_is_detected():
    results = run_verify(VerifyOptions(dtype="f64", break_scaling=True), only=["fused_split_identity"])

    assert not results[0].passed
    assert results[0].max_error > 1e-3
    assert results[0].detail.startswith("D_head=")


def test_unknown_suite_is_rejected():
    with pytest.raises(ConfigError):
        run_verify(VerifyOptions(), only=["nope"])
    assert "rope_toy" in SUITES
    assert "rib_toy" in SUITES


def test_markdown_report_lists_failures():
    opts = VerifyOptions(dtype="f64", break_scaling=True)
    results = run_verify(opts, only=["fused_split_identity", "cyclic_schedule"])

    text = render_verify_markdown(results, opts)

    assert text.startswith("# Verify (f64)")
    assert "| suite" in text
    assert "verify status=fail passed=1 failed=1" in text
    assert "Failed: fused_split_identity" in text
    assert f"case: {results[0].detail}" in text
    assert summary_line(results[1:]) == "verify status=ok passed=1 failed=0"
