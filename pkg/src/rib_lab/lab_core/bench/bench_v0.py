"""Замеры ядер внимания: время (медиана), пик вспомогательной памяти, FLOPs.

Отчёт: построчный key=value, одна запись на случай:

    case=rib-streaming-N1024 N=1024 M=32 heads=2 bias=rib kernel=streaming wall_ns=... peak_aux_scalars=... flops=...
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from rib_lab.lab_core.attention.augmented_v0 import QKVWeights, build_augmented_qk
from rib_lab.lab_core.attention.kernels_v0 import AttentionConfig, attend_naive, attend_streaming
from rib_lab.lab_core.bench.instrument_v0 import median_wall_ns
from rib_lab.lab_core.logging.logging_v1 import get_logger
from rib_lab.lab_core.posbias.geometry_v0 import WindowGeometry
from rib_lab.lab_core.posbias.rib_v0 import RIBParams, rib_positional_tokens
from rib_lab.lab_core.posbias.rpb_v0 import RPBTable, rpb_bias_matrix
from rib_lab.lab_core.tensor.errors_v0 import ConfigError, UnsupportedConfigurationError


logger = get_logger("bench")

# Выше этого N naive-ядро не запускается (буфер N×N на голову)
NAIVE_MAX_N = 4096
REPORT_FIELDS = (
    "case", "N", "M", "heads", "bias", "kernel", "wall_ns", "peak_aux_scalars", "score_scalars", "flops", "runs",
)


@dataclass
class BenchRecord:
    case: str
    N: int
    M: int
    heads: int
    bias: str
    kernel: str
    wall_ns: int
    peak_aux_scalars: int
    score_scalars: int
    flops: int
    runs: int

    def to_line(self) -> str:
        return " ".join(f"{key}={getattr(self, key)}" for key in REPORT_FIELDS)


def window_side(N: int) -> int:
    M = math.isqrt(N)
    if M * M != N:
        raise ConfigError(f"N={N} is not a square window size")
    return M


def bench_case(
    N: int,
    bias: str = "rib",
    kernel: str = "streaming",
    heads: int = 2,
    D_head: int = 16,
    R: int = 16,
    tile: Optional[int] = None,
    runs: int = 5,
    seed: int = 0,
    threads: int = 1,
    naive_max_n: int = NAIVE_MAX_N,
) -> Optional[BenchRecord]:
    """Один случай; None (с предупреждением в лог), если случай пропущен."""
    M = window_side(N)
    case = f"{bias}-{kernel}-N{N}"
    if kernel == "naive" and N > naive_max_n:
        logger.warning(
            "bench_case_skipped",
            extra={"event": "bench_case_skipped", "case": case, "reason": f"naive kernel with N > {naive_max_n}"},
        )
        return None
    try:
        cfg = AttentionConfig(
            heads=heads, D=heads * D_head, R=R if bias == "rib" else 0, bias=bias, kernel=kernel, tile=tile, threads=threads
        )
    except UnsupportedConfigurationError as exc:
        logger.warning("bench_case_skipped", extra={"event": "bench_case_skipped", "case": case, "reason": str(exc)})
        return None

    rng = np.random.default_rng(seed)
    geom = WindowGeometry.square(M, "f32")
    X = rng.standard_normal((N, cfg.D)).astype(np.float32)
    weights = QKVWeights.init(cfg.D, rng)
    pos = None
    if bias == "rib":
        pos = rib_positional_tokens(geom, RIBParams.init(10, 32, R, heads, rng))
    Q, K, V = build_augmented_qk(X, weights, geom, cfg, pos=pos)

    B = rpb_bias_matrix(RPBTable.init(M, heads, rng)) if bias == "rpb" else None

    def run():
        if kernel == "naive":
            return attend_naive(Q, K, V, bias=B)[3]
        return attend_streaming(Q, K, V, cfg=cfg)[1]

    stats = run()

    record = BenchRecord(
        case=case,
        N=N,
        M=M,
        heads=heads,
        bias=bias,
        kernel=kernel,
        wall_ns=median_wall_ns(run, runs),
        peak_aux_scalars=stats.peak_aux_scalars,
        score_scalars=stats.score_scalars,
        flops=stats.flops,
        runs=max(runs, 5),
    )
    logger.info("bench_case_done", extra={"event": "bench_case_done", **asdict(record)})
    return record


def run_bench(
    ns: Sequence[int],
    bias: str = "rib",
    kernel: str = "streaming",
    **kwargs,
) -> List[BenchRecord]:
    records = []
    for N in ns:
        record = bench_case(N, bias=bias, kernel=kernel, **kwargs)
        if record is not None:
            records.append(record)
    return records


def format_report(records: Sequence[BenchRecord]) -> str:
    return "".join(r.to_line() + "\n" for r in records)


def records_frame(records: Sequence[BenchRecord]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in records], columns=list(REPORT_FIELDS))


def write_report(records: Sequence[BenchRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_report(records), encoding="utf-8")
    return path


def parse_report(text: str) -> List[dict]:
    """Обратный разбор строк отчёта (значения остаются строками)."""
    rows = []
    for line in text.splitlines():
        if line.strip():
            rows.append(dict(pair.split("=", 1) for pair in line.split()))
    return rows


__all__ = [
    "NAIVE_MAX_N",
    "REPORT_FIELDS",
    "BenchRecord",
    "window_side",
    "bench_case",
    "run_bench",
    "format_report",
    "records_frame",
    "write_report",
    "parse_report",
]
