"""Конфигурация модели и обучения.

Формат файла: плоский key=value, по паре на строку:

    # комментарий
    preset=sst-micro
    window_sizes=4,8,8
    lr=2e-4

Ключи SSTConfig и TrainConfig можно смешивать в одном файле.
``preset=`` / ``train_preset=`` задают базу, остальные ключи её переопределяют.
Неизвестный ключ: ConfigError.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

from rib_lab.lab_core.attention.augmented_v0 import augmented_width_aligned
from rib_lab.lab_core.attention.kernels_v0 import BIASES, KERNELS, AttentionConfig
from rib_lab.lab_core.attention.window_v0 import (
    SST_PLUS_WINDOW_SIZES,
    SST_WINDOW_SIZES,
    WINDOW_STRATEGIES,
    cyclic_schedule,
)
from rib_lab.lab_core.logging.logging_v1 import get_logger
from rib_lab.lab_core.posbias.rib_v0 import ACTIVATIONS
from rib_lab.lab_core.tensor.errors_v0 import ConfigError, UnsupportedConfigurationError


logger = get_logger("config")

GATES = ("cla", "pw", "none")
SCALES = (2, 3, 4)
SEED_ENV = "RIB_SEED"


@dataclass(frozen=True)
class SSTConfig:
    """Схема сети: одна строка таблицы конфигураций.

    window_sizes и R: списки по позиции слоя в блоке (циклически).
    """

    D: int = 16
    blocks: int = 1
    layers: int = 3
    window_sizes: Tuple[int, ...] = (4, 8, 8)
    heads: int = 2
    L: int = 4
    d_h: int = 16
    R: Tuple[int, ...] = (8,)
    ffn_expansion: float = 2.0
    scale: int = 2
    bias: str = "rib"
    kernel: str = "streaming"
    gate: str = "cla"
    rib_activation: str = "relu"
    rope_base: float = 100.0
    tile: Optional[int] = None
    q_tile: Optional[int] = None
    threads: int = 1
    in_channels: int = 3

    def __post_init__(self) -> None:
        if self.scale not in SCALES:
            raise ConfigError(f"Unsupported scale factor: {self.scale} (expected one of {SCALES})")
        if min(self.D, self.blocks, self.layers, self.heads) < 1:
            raise ConfigError("D, blocks, layers and heads must be positive")
        if self.D % self.heads != 0:
            raise ConfigError(f"D={self.D} must be divisible by heads={self.heads}")
        if not self.window_sizes or min(self.window_sizes) < 1:
            raise ConfigError(f"Invalid window sizes: {self.window_sizes}")
        if not self.R or min(self.R) < 1:
            raise ConfigError(f"Invalid rank list: {self.R}")
        if not 0 <= self.L <= 20:
            raise ConfigError(f"L must be in [0, 20], got {self.L}")
        if self.ffn_expansion <= 0:
            raise ConfigError(f"ffn_expansion must be positive, got {self.ffn_expansion}")
        if self.bias not in BIASES:
            raise ConfigError(f"Unknown bias: {self.bias!r}")
        if self.kernel not in KERNELS:
            raise ConfigError(f"Unknown kernel: {self.kernel!r}")
        if self.gate not in GATES:
            raise ConfigError(f"Unknown gate: {self.gate!r}")
        if self.rib_activation not in ACTIVATIONS:
            raise ConfigError(f"Unknown RIB activation: {self.rib_activation!r}")
        if self.bias == "rpb" and self.kernel != "naive":
            raise UnsupportedConfigurationError("bias=rpb requires kernel=naive")
        if self.bias == "rope" and self.D_head % 4 != 0:
            raise ConfigError(f"bias=rope requires head dim divisible by 4, got {self.D_head}")

        if self.bias == "rib":
            for r in sorted(set(self.R)):
                if not augmented_width_aligned(self.D_head, r):
                    logger.warning(
                        "augmented_width_unaligned",
                        extra={
                            "event": "augmented_width_unaligned",
                            "D_head": self.D_head,
                            "R": r,
                            "reason": "D_head + R is not a multiple of 8",
                        },
                    )

    @property
    def D_head(self) -> int:
        return self.D // self.heads

    @property
    def ffn_hidden(self) -> int:
        return int(self.ffn_expansion * self.D)

    @property
    def max_window(self) -> int:
        return max(self.window_for(i) for i in range(self.layers))

    def window_for(self, layer: int) -> int:
        return cyclic_schedule(self.window_sizes, layer)

    def rank_for(self, layer: int) -> int:
        return cyclic_schedule(self.R, layer)

    def attention_config(self, layer: int) -> AttentionConfig:
        return AttentionConfig(
            heads=self.heads,
            D=self.D,
            R=self.rank_for(layer) if self.bias == "rib" else 0,
            bias=self.bias,
            kernel=self.kernel,
            tile=self.tile,
            q_tile=self.q_tile,
            threads=self.threads,
        )


@dataclass(frozen=True)
class TrainConfig:
    """Рецепт обучения. patch: сторона LR-патча."""

    patch: int = 16
    batch: int = 4
    steps: int = 300
    lr: float = 2e-4
    milestones: Tuple[int, ...] = ()
    gamma: float = 0.5
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    n_images: int = 200
    hr_size: int = 32
    log_every: int = 10
    prefetch_batches: int = 2
    init_from: Optional[str] = None

    def __post_init__(self) -> None:
        if self.optimizer not in ("adam", "adamw"):
            raise ConfigError(f"Unknown optimizer: {self.optimizer!r}")
        if self.steps < 0 or self.batch < 1 or self.patch < 1:
            raise ConfigError("steps must be >= 0, batch and patch >= 1")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError(f"milestones must be strictly increasing: {ms}")
        if ms and (ms[0] < 0 or ms[-1] >= self.steps):
            raise ConfigError(f"milestones must lie in [0, steps={self.steps}): {ms}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")


# ---------------------------------------------------------------------------
# Пресеты
# ---------------------------------------------------------------------------

SST_PRESETS: Dict[str, SSTConfig] = {
    "sst-micro": SSTConfig(),
    "sst-light": SSTConfig(
        D=48, blocks=5, layers=6, window_sizes=(8, 16, 32, 16, 32, 64), heads=3, L=10, d_h=32,
        R=(16, 16, 16, 24, 24, 24), ffn_expansion=1.5,
    ),
    "sst-light+": SSTConfig(
        D=48, blocks=5, layers=6, window_sizes=SST_PLUS_WINDOW_SIZES, heads=3, L=10, d_h=32,
        R=(16, 16, 16, 24, 24, 24), ffn_expansion=1.5,
    ),
    "sst": SSTConfig(
        D=180, blocks=6, layers=6, window_sizes=SST_WINDOW_SIZES, heads=6, L=10, d_h=32,
        R=(18, 18, 18, 34, 34, 34), ffn_expansion=1.25,
    ),
    "sst+": SSTConfig(
        D=180, blocks=6, layers=6, window_sizes=SST_PLUS_WINDOW_SIZES, heads=6, L=10, d_h=32,
        R=(18, 18, 18, 34, 34, 34), ffn_expansion=1.25,
    ),
    "sst-l": SSTConfig(
        D=192, blocks=8, layers=6, window_sizes=SST_WINDOW_SIZES, heads=6, L=10, d_h=32,
        R=(16, 16, 16, 32, 32, 32), ffn_expansion=2.0,
    ),
    "sst-l+": SSTConfig(
        D=192, blocks=8, layers=6, window_sizes=SST_PLUS_WINDOW_SIZES, heads=6, L=10, d_h=32,
        R=(16, 16, 16, 32, 32, 32), ffn_expansion=2.0,
    ),
}

_FULL_MILESTONES = (250000, 400000, 450000, 475000, 490000)

TRAIN_PRESETS: Dict[str, TrainConfig] = {
    "desk": TrainConfig(),
    "full": TrainConfig(
        patch=64, batch=32, steps=500000, lr=5e-4, milestones=_FULL_MILESTONES,
        optimizer="adamw", weight_decay=1e-4, log_every=1000,
    ),
    "full-light": TrainConfig(
        patch=64, batch=64, steps=500000, lr=5e-4, milestones=_FULL_MILESTONES,
        optimizer="adamw", weight_decay=1e-4, log_every=1000,
    ),
    "full+": TrainConfig(
        patch=96, batch=32, steps=500000, lr=5e-4, milestones=_FULL_MILESTONES,
        optimizer="adamw", weight_decay=1e-4, log_every=1000,
    ),
}


# ---------------------------------------------------------------------------
# Разбор key=value
# ---------------------------------------------------------------------------


def _int_list(raw: str) -> Tuple[int, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(int(part) for part in raw.split(","))


def _optional_int(raw: str) -> Optional[int]:
    return None if raw.strip().lower() in ("", "none") else int(raw)


def _optional_str(raw: str) -> Optional[str]:
    return None if raw.strip().lower() in ("", "none") else raw.strip()


_CONVERTERS: Dict[str, Callable[[str], Any]] = {
    "int": int,
    "float": float,
    "str": lambda raw: raw.strip(),
    "Tuple[int, ...]": _int_list,
    "Optional[int]": _optional_int,
    "Optional[str]": _optional_str,
}


def _field_types(cls: type) -> Dict[str, str]:
    # аннотации: строки (from __future__ import annotations)
    return {f.name: f.type for f in dataclasses.fields(cls)}


_SST_FIELDS = _field_types(SSTConfig)
_TRAIN_FIELDS = _field_types(TrainConfig)


def _convert(key: str, raw: str, type_name: str) -> Any:
    try:
        return _CONVERTERS[type_name](raw)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"Invalid value for {key!r}: {raw!r}") from exc


def parse_pairs(text: str) -> Dict[str, str]:
    """Строки key=value → словарь; '#' начинает комментарий."""
    pairs: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def configs_from_pairs(pairs: Dict[str, str]) -> Tuple[SSTConfig, TrainConfig]:
    pairs = dict(pairs)
    sst_name = pairs.pop("preset", "sst-micro")
    train_name = pairs.pop("train_preset", "desk")
    if sst_name not in SST_PRESETS:
        raise ConfigError(f"Unknown preset: {sst_name!r}")
    if train_name not in TRAIN_PRESETS:
        raise ConfigError(f"Unknown train preset: {train_name!r}")

    strategy = pairs.pop("window_strategy", None)
    sst_over: Dict[str, Any] = {}
    train_over: Dict[str, Any] = {}
    if strategy is not None:
        if strategy not in WINDOW_STRATEGIES:
            raise ConfigError(f"Unknown window strategy: {strategy!r}")
        sst_over["window_sizes"] = WINDOW_STRATEGIES[strategy]

    for key, raw in pairs.items():
        if key in _SST_FIELDS:
            sst_over[key] = _convert(key, raw, _SST_FIELDS[key])
        elif key in _TRAIN_FIELDS:
            train_over[key] = _convert(key, raw, _TRAIN_FIELDS[key])
        else:
            raise ConfigError(f"Unknown config key: {key!r}")

    sst = dataclasses.replace(SST_PRESETS[sst_name], **sst_over)
    train = dataclasses.replace(TRAIN_PRESETS[train_name], **train_over)
    return sst, train


def parse_config(text: str) -> Tuple[SSTConfig, TrainConfig]:
    return configs_from_pairs(parse_pairs(text))


def load_config(path: str | Path) -> Tuple[SSTConfig, TrainConfig]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    sst, train = parse_config(path.read_text(encoding="utf-8"))
    logger.info("config_loaded", extra={"event": "config_loaded", "path": str(path)})
    return sst, train


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def dump_config(sst: SSTConfig, train: Optional[TrainConfig] = None) -> str:
    """Полный (без пресетов) key=value текст; parse_config(dump_config(...)) восстанавливает значения."""
    lines = ["# SSTConfig"]
    lines += [f"{f.name}={_format_value(getattr(sst, f.name))}" for f in dataclasses.fields(sst)]
    if train is not None:
        lines.append("# TrainConfig")
        lines += [f"{f.name}={_format_value(getattr(train, f.name))}" for f in dataclasses.fields(train)]
    return "\n".join(lines) + "\n"


def save_config(path: str | Path, sst: SSTConfig, train: Optional[TrainConfig] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(sst, train), encoding="utf-8")
    return path


def resolve_seed(default: int) -> int:
    """Seed из RIB_SEED, если переменная задана, иначе default."""
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc


__all__ = [
    "GATES",
    "SCALES",
    "SEED_ENV",
    "SSTConfig",
    "TrainConfig",
    "SST_PRESETS",
    "TRAIN_PRESETS",
    "parse_pairs",
    "configs_from_pairs",
    "parse_config",
    "load_config",
    "dump_config",
    "save_config",
    "resolve_seed",
]
