from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from rib_lab.lab_core.bench.bench_v0 import format_report, run_bench, write_report
from rib_lab.lab_core.bench.verify_v0 import VerifyOptions, render_verify_markdown, run_verify
from rib_lab.lab_core.blocks.model_v0 import layer_prefix, sst_forward
from rib_lab.lab_core.config.config_v0 import load_config, resolve_seed
from rib_lab.lab_core.logging.logging_v1 import get_logger, setup_logging
from rib_lab.lab_core.posbias.analysis_v0 import (
    fit_rib_to_bias,
    fit_rib_to_rpb,
    gaussian_bump_bias,
    rib_bias_map,
    write_offset_table,
)
from rib_lab.lab_core.posbias.geometry_v0 import WindowGeometry
from rib_lab.lab_core.posbias.rib_v0 import PosTokenCache, RIBParams
from rib_lab.lab_core.posbias.rpb_v0 import RPBTable
from rib_lab.lab_core.tensor.errors_v0 import ConfigError, DimensionError, RibLabError
from rib_lab.lab_core.train.checkpoint_v0 import load_checkpoint, save_checkpoint
from rib_lab.lab_core.train.image_io_v0 import load_ppm, save_ppm
from rib_lab.lab_core.train.metrics_v0 import evaluate
from rib_lab.lab_core.train.train_v0 import save_curve, train_loop


logger = get_logger("cli")


def _out(line: str = "") -> None:
    # stdout только для таблиц и сводок; логи идут в stderr
    sys.stdout.write(line + "\n")


# ---------------------------------------------------------------------------
# Подкоманды
# ---------------------------------------------------------------------------


def cmd_verify(args: argparse.Namespace) -> int:
    opts = VerifyOptions(
        dtype="f64" if args.f64 else "f32",
        seed=resolve_seed(0),
        break_scaling=args.break_scaling,
        artifacts_dir=str(Path(args.out).parent) if args.out else None,
    )
    results = run_verify(opts, only=args.suite or None)
    report = render_verify_markdown(results, opts)
    _out(report)
    if args.out:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report, encoding="utf-8")
    return 0 if all(r.passed for r in results) else 1


def cmd_bench(args: argparse.Namespace) -> int:
    records = run_bench(
        args.n,
        bias=args.bias,
        kernel=args.kernel,
        heads=args.heads,
        tile=args.tile,
        runs=args.runs,
        seed=resolve_seed(0),
        threads=args.threads,
    )
    sys.stdout.write(format_report(records))
    if args.out:
        write_report(records, args.out)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    sst, train = load_config(args.config)
    train = dataclasses.replace(train, seed=resolve_seed(train.seed))
    if args.steps is not None:
        train = dataclasses.replace(train, steps=args.steps)
    result = train_loop(sst, train)
    out_dir = save_checkpoint(args.out, result.params, sst, train)
    save_curve(result.curve, out_dir / "loss.csv")
    _out(f"train steps={len(result.curve)} initial_loss={result.initial_loss:.6f} final_loss={result.final_loss:.6f}")
    return 0


def _default_sr_path(src: Path, scale: int) -> Path:
    return src.with_name(f"{src.stem}_x{scale}.ppm")


def cmd_infer(args: argparse.Namespace) -> int:
    # чекпоинт и картинки читаются до записи чего-либо
    params, sst = load_checkpoint(args.ckpt)
    if args.scale != sst.scale:
        raise ConfigError(f"--scale {args.scale} does not match checkpoint scale {sst.scale}")
    lr = load_ppm(args.input)
    ref = load_ppm(args.ref) if args.ref else None
    if lr.shape[-1] != sst.in_channels:
        raise DimensionError(f"image has {lr.shape[-1]} channels, checkpoint expects {sst.in_channels}")

    sr = sst_forward(params, lr, sst, cache=PosTokenCache())
    out = Path(args.out) if args.out else _default_sr_path(Path(args.input), sst.scale)
    save_ppm(out, sr)
    logger.info("infer_done", extra={"event": "infer_done", "input": str(args.input), "output": str(out)})

    if ref is not None:
        # метрики по 8-битной картинке, как она записана на диск
        result = evaluate(load_ppm(out), ref, border=sst.scale)
        _out(f"infer psnr_y={result.psnr:.4f} ssim_y={result.ssim:.6f} border={sst.scale}")
    return 0


def cmd_fit_rpb(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(resolve_seed(0))
    p0 = RIBParams.init(args.bands, args.hidden, args.rank, args.heads, rng, "f64", activation=args.activation)
    if args.target == "gaussian":
        geom = WindowGeometry.square(args.m, "f64")
        result = fit_rib_to_bias(gaussian_bump_bias(args.m, args.heads, args.sigma), p0, geom, args.steps, args.lr)
        mse = result.mse
    else:
        table = RPBTable.init(args.m, args.heads, rng, "f64")
        mse = fit_rib_to_rpb(table, p0, args.steps, args.lr)[1]
    _out(f"fit-rpb target={args.target} M={args.m} R={args.rank} heads={args.heads} steps={args.steps} mse={mse:.6e}")
    return 0


def cmd_viz_bias(args: argparse.Namespace) -> int:
    params, sst = load_checkpoint(args.ckpt)
    if sst.bias != "rib":
        raise ConfigError(f"viz-bias needs a checkpoint with bias=rib, got bias={sst.bias}")
    total = sst.blocks * sst.layers
    if not 0 <= args.layer < total:
        raise ConfigError(f"--layer must be in [0, {total}), got {args.layer}")
    block, layer = divmod(args.layer, sst.layers)
    p = RIBParams.from_dict(params, sst.L, prefix=f"{layer_prefix(block, layer)}rib.", activation=sst.rib_activation)
    if not 0 <= args.head < p.heads:
        raise ConfigError(f"--head must be in [0, {p.heads}), got {args.head}")

    M = sst.window_for(layer)
    S_p = rib_bias_map(WindowGeometry.square(M, p.dtype), p)[args.head]
    path = write_offset_table(S_p, M, args.out)
    _out(f"viz-bias layer={args.layer} head={args.head} M={M} out={path}")
    return 0


# ---------------------------------------------------------------------------
# Парсер
# ---------------------------------------------------------------------------


def _add_log_level(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--log-level",
        type=str,
        default="INFO",
        help="Уровень логирования: DEBUG, INFO, WARNING, ERROR, CRITICAL (по умолчанию INFO).",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rib-lab",
        description="RIB lab: оконное внимание с позиционными смещениями, бенчмарки ядер, SST-micro SR.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="Прогнать наборы проверок; exit 0 только если все прошли.")
    p.add_argument("--f64", action="store_true", help="Двойная точность и жёсткие допуски.")
    p.add_argument(
        "--break-eq6",
        "--break-scaling",
        dest="break_scaling",
        action="store_true",
        help="Негативный контроль: масштаб 1/R вместо 1/√R в слитном Q; verify обязан упасть.",
    )
    p.add_argument("--suite", action="append", help="Запустить только указанный набор (можно повторять).")
    p.add_argument(
        "--out",
        type=str,
        default=None,
        help="Куда дополнительно записать Markdown-отчёт; bias_offsets.csv ляжет рядом.",
    )
    _add_log_level(p)
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("bench", help="Замер ядер внимания: время, пик памяти, FLOPs.")
    p.add_argument("--n", type=int, nargs="+", required=True, help="Размеры окна N = M² (через пробел).")
    p.add_argument("--bias", choices=("none", "rib", "rpb", "rope"), default="rib")
    p.add_argument("--kernel", choices=("naive", "streaming"), default="streaming")
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--tile", type=int, default=None, help="Размер тайла по ключам (по умолчанию 64).")
    p.add_argument("--runs", type=int, default=5, help="Число прогонов для медианы (не меньше 5).")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", type=str, default=None, help="Файл отчёта key=value.")
    _add_log_level(p)
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("train", help="Обучить SR-модель и записать чекпоинт и loss.csv.")
    p.add_argument("--config", type=str, required=True)
    p.add_argument("--out", type=str, required=True, help="Каталог чекпоинта.")
    p.add_argument("--steps", type=int, default=None, help="Переопределить число шагов из конфига.")
    _add_log_level(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("infer", help="Увеличить PPM-картинку обученной моделью.")
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--in", dest="input", type=str, required=True)
    p.add_argument("--scale", type=int, required=True)
    p.add_argument("--ref", type=str, default=None, help="HR-эталон для PSNR/SSIM.")
    p.add_argument("--out", type=str, default=None, help="Выходной PPM (по умолчанию <in>_x<r>.ppm).")
    _add_log_level(p)
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser("fit-rpb", help="Подогнать RIB ранга R под таблицу RPB или гауссово смещение.")
    p.add_argument("--m", type=int, required=True, help="Сторона окна M.")
    p.add_argument("--rank", type=int, required=True, help="Ранг R.")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--bands", type=int, default=10, help="Число частотных полос L.")
    p.add_argument("--hidden", type=int, default=32, help="Ширина скрытого слоя d_h.")
    p.add_argument("--activation", choices=("relu", "sine"), default="relu")
    p.add_argument("--target", choices=("rpb", "gaussian"), default="rpb")
    p.add_argument("--sigma", type=float, default=1.5, help="σ гауссова смещения в токенах.")
    _add_log_level(p)
    p.set_defaults(handler=cmd_fit_rpb)

    p = sub.add_parser("viz-bias", help="Средний S_p по смещениям (dy, dx) в CSV.")
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--layer", type=int, required=True, help="Сквозной номер слоя по всем блокам.")
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--out", type=str, required=True)
    _add_log_level(p)
    p.set_defaults(handler=cmd_viz_bias)
    return parser


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    # -------------------- ЛОГИРОВАНИЕ --------------------
    setup_logging(level=args.log_level)
    logger.info("cli_start", extra={"event": "cli_start", "command": args.command})

    try:
        code = args.handler(args)
    except (RibLabError, FileNotFoundError) as exc:
        logger.error(
            "error",
            extra={"event": "error", "command": args.command, "error_type": type(exc).__name__, "error": str(exc)},
        )
        return 2

    logger.info("cli_finished", extra={"event": "cli_finished", "command": args.command, "exit_code": code})
    return code


__all__ = ["build_parser", "run_cli"]


if __name__ == "__main__":
    sys.exit(run_cli())
