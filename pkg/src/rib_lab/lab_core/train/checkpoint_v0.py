"""Чекпоинт = каталог: config.txt (key=value) + params/<имя>.ribt на каждый параметр."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from rib_lab.lab_core.config.config_v0 import SSTConfig, TrainConfig, load_config, save_config
from rib_lab.lab_core.logging.logging_v1 import get_logger
from rib_lab.lab_core.tensor.ribt_io_v0 import load_tensor, save_tensor
from rib_lab.lab_core.tensor.tensor_v0 import Tensor


logger = get_logger("train.checkpoint")

CONFIG_FILE = "config.txt"
PARAMS_DIR = "params"
SUFFIX = ".ribt"


def save_checkpoint(
    out_dir: str | Path,
    params: Mapping[str, Tensor],
    sst: SSTConfig,
    train: Optional[TrainConfig] = None,
) -> Path:
    out_dir = Path(out_dir)
    params_dir = out_dir / PARAMS_DIR
    params_dir.mkdir(parents=True, exist_ok=True)
    # в params/ остаются только тензоры этой модели
    stale = [path for path in params_dir.glob(f"*{SUFFIX}") if path.name[: -len(SUFFIX)] not in params]
    for path in stale:
        path.unlink()
    if stale:
        logger.warning(
            "checkpoint_stale_removed",
            extra={"event": "checkpoint_stale_removed", "path": str(out_dir), "removed": len(stale)},
        )
    for name, value in params.items():
        save_tensor(params_dir / f"{name}{SUFFIX}", np.ascontiguousarray(value))
    save_config(out_dir / CONFIG_FILE, sst, train)
    logger.info(
        "checkpoint_saved",
        extra={"event": "checkpoint_saved", "path": str(out_dir), "tensors": len(params)},
    )
    return out_dir


def load_checkpoint(ckpt_dir: str | Path) -> Tuple[Dict[str, Tensor], SSTConfig]:
    """Прочитать параметры и SSTConfig.

    Raises
    ------
    FileNotFoundError
        Если нет каталога, config.txt или ни одного тензора.
    """
    ckpt_dir = Path(ckpt_dir)
    config_path = ckpt_dir / CONFIG_FILE
    params_dir = ckpt_dir / PARAMS_DIR
    if not config_path.exists() or not params_dir.is_dir():
        raise FileNotFoundError(f"Checkpoint not found or incomplete: {ckpt_dir}")

    sst, _ = load_config(config_path)
    params = {
        path.name[: -len(SUFFIX)]: load_tensor(path)
        for path in sorted(params_dir.glob(f"*{SUFFIX}"))
    }
    if not params:
        raise FileNotFoundError(f"Checkpoint has no tensors: {params_dir}")
    logger.info("checkpoint_loaded", extra={"event": "checkpoint_loaded", "path": str(ckpt_dir), "tensors": len(params)})
    return params, sst


def warm_start(params: Mapping[str, Tensor], source: Mapping[str, Tensor]) -> Tuple[Dict[str, Tensor], int]:
    """Перенести из source параметры с совпадающими именем и формой.

    Returns
    -------
    (новые параметры, сколько перенесено)
    """
    merged: Dict[str, Tensor] = {}
    copied = 0
    for name, value in params.items():
        src = source.get(name)
        if src is not None and src.shape == value.shape:
            merged[name] = np.array(src, dtype=value.dtype)
            copied += 1
        else:
            merged[name] = value
    return merged, copied


def init_from_checkpoint(params: Mapping[str, Tensor], ckpt_dir: str | Path) -> Dict[str, Tensor]:
    source, _ = load_checkpoint(ckpt_dir)
    merged, copied = warm_start(params, source)
    logger.info(
        "warm_start",
        extra={"event": "warm_start", "path": str(ckpt_dir), "copied": copied, "total": len(params)},
    )
    return merged


__all__ = [
    "CONFIG_FILE",
    "save_checkpoint",
    "load_checkpoint",
    "warm_start",
    "init_from_checkpoint",
]
