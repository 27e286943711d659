import numpy as np
import pandas as pd
import pytest

from rib_lab.cli.cli_v0 import build_parser, run_cli
from rib_lab.lab_core.train.image_io_v0 import load_ppm, save_ppm


TINY_CONFIG = """\
# маленькая модель для тестов
D=8
heads=2
layers=1
window_sizes=4
L=2
d_h=8
R=4
steps=2
batch=1
patch=4
n_images=2
hr_size=8
log_every=0
"""

QUIET = ["--log-level", "ERROR"]


@pytest.fixture()
def trained_ckpt(tmp_path):
    config = tmp_path / "tiny.txt"
    config.write_text(TINY_CONFIG, encoding="utf-8")
    ckpt = tmp_path / "ckpt"

    assert run_cli(["train", "--config", str(config), "--out", str(ckpt), *QUIET]) == 0
    return ckpt


def _image(path, shape, seed=0):
    img = np.random.default_rng(seed).integers(0, 256, size=shape).astype(np.float32) / 255.0
    return save_ppm(path, img)


# =============================================================================
# ТЕСТ 1. Парсер
# =============================================================================

def test_parser_requires_subcommand():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_infer_input_flag_is_named_in():
    args = build_parser().parse_args(["infer", "--ckpt", "c", "--in", "a.ppm", "--scale", "2"])

    assert args.input == "a.ppm"
    assert args.out is None


# =============================================================================
# ТЕСТ 2. verify / bench / fit-rpb
# =============================================================================

def test_verify_exit_codes(tmp_path, capsys):
    out = tmp_path / "report.md"

    ok = run_cli(["verify", "--f64", "--suite", "fused_split_identity", "--out", str(out), *QUIET])
    assert ok == 0
    assert "verify status=ok passed=1 failed=0" in capsys.readouterr().out
    assert out.read_text(encoding="utf-8").startswith("# Verify (f64)")

    broken = run_cli(["verify", "--f64", "--break-eq6", "--suite", "fused_split_identity", *QUIET])
    assert broken == 1
    text = capsys.readouterr().out
    assert "Failed: fused_split_identity" in text
    # строка провала называет конкретный случай (D_head, R, N)
    assert "- fused_split_identity: max_error=" in text
    assert "case: D_head=" in text

    # старое имя флага остаётся синонимом
    assert run_cli(["verify", "--f64", "--break-scaling", "--suite", "fused_split_identity", *QUIET]) == 1

    assert run_cli(["verify", "--suite", "no_such_suite", *QUIET]) == 2


def test_verify_writes_offset_csv_next_to_report(tmp_path, capsys):
    out = tmp_path / "reports" / "verify.md"

    code = run_cli(["verify", "--suite", "offset_group_sizes", "--out", str(out), *QUIET])

    assert code == 0
    df = pd.read_csv(tmp_path / "reports" / "bias_offsets.csv")
    assert list(df.columns) == ["dy", "dx", "mean_bias"]
    assert len(df) == 15 * 15


def test_bench_prints_report(tmp_path, capsys):
    report = tmp_path / "bench.txt"

    code = run_cli(["bench", "--n", "16", "64", "--heads", "1", "--runs", "1", "--out", str(report), *QUIET])

    lines = capsys.readouterr().out.strip().splitlines()
    assert code == 0
    assert [line.split()[0] for line in lines] == ["case=rib-streaming-N16", "case=rib-streaming-N64"]
    assert report.read_text(encoding="utf-8").strip().splitlines() == lines


def test_bench_non_square_n_is_an_error():
    assert run_cli(["bench", "--n", "10", "--runs", "1", *QUIET]) == 2


def test_fit_rpb_prints_mse(capsys):
    code = run_cli(["fit-rpb", "--m", "3", "--rank", "2", "--steps", "5", "--bands", "2", "--hidden", "4", *QUIET])

    out = capsys.readouterr().out
    assert code == 0
    assert out.startswith("fit-rpb target=rpb M=3 R=2")
    assert "mse=" in out


# =============================================================================
# ТЕСТ 3. train → infer → viz-bias
# =============================================================================

def test_train_writes_checkpoint_and_curve(trained_ckpt, capsys):
    curve = pd.read_csv(trained_ckpt / "loss.csv")

    assert (trained_ckpt / "config.txt").exists()
    assert any((trained_ckpt / "params").glob("*.ribt"))
    assert list(curve.columns) == ["step", "loss", "lr"]
    assert len(curve) == 2


def test_infer_upscales_and_reports_metrics(trained_ckpt, tmp_path, capsys):
    lr_path = _image(tmp_path / "lr.ppm", (10, 10, 3))
    ref_path = _image(tmp_path / "hr.ppm", (20, 20, 3), seed=1)

    code = run_cli(["infer", "--ckpt", str(trained_ckpt), "--in", str(lr_path), "--scale", "2", "--ref", str(ref_path), *QUIET])

    out_path = tmp_path / "lr_x2.ppm"
    assert code == 0
    assert load_ppm(out_path).shape == (20, 20, 3)
    assert "infer psnr_y=" in capsys.readouterr().out


def test_infer_errors_write_nothing(trained_ckpt, tmp_path):
    lr_path = _image(tmp_path / "lr.ppm", (6, 6, 3))
    out_path = tmp_path / "sr.ppm"

    missing = run_cli(["infer", "--ckpt", str(tmp_path / "nope"), "--in", str(lr_path), "--scale", "2", "--out", str(out_path), *QUIET])
    wrong_scale = run_cli(["infer", "--ckpt", str(trained_ckpt), "--in", str(lr_path), "--scale", "3", "--out", str(out_path), *QUIET])

    assert missing == 2
    assert wrong_scale == 2
    assert not out_path.exists()


def test_viz_bias_writes_offset_table(trained_ckpt, tmp_path):
    out = tmp_path / "bias.csv"

    assert run_cli(["viz-bias", "--ckpt", str(trained_ckpt), "--layer", "0", "--head", "1", "--out", str(out), *QUIET]) == 0
    df = pd.read_csv(out)
    assert list(df.columns) == ["dy", "dx", "mean_bias"]
    assert len(df) == 7 * 7

    assert run_cli(["viz-bias", "--ckpt", str(trained_ckpt), "--layer", "1", "--out", str(out), *QUIET]) == 2
    assert run_cli(["viz-bias", "--ckpt", str(trained_ckpt), "--layer", "0", "--head", "2", "--out", str(out), *QUIET]) == 2
