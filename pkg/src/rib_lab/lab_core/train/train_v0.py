from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np
import pandas as pd

from rib_lab.lab_core.autodiff import ops_v0 as ops
from rib_lab.lab_core.autodiff.tape_v0 import Tape, Var, backward
from rib_lab.lab_core.blocks.model_v0 import init_sst_params, sst_forward_ad
from rib_lab.lab_core.config.config_v0 import SSTConfig, TrainConfig
from rib_lab.lab_core.logging.logging_v1 import get_logger
from rib_lab.lab_core.tensor.errors_v0 import DimensionError, NumericError
from rib_lab.lab_core.tensor.tensor_v0 import Tensor
from rib_lab.lab_core.train.checkpoint_v0 import init_from_checkpoint
from rib_lab.lab_core.train.data_v0 import Batch, PatchSampler, make_synthetic_pairs, prefetch
from rib_lab.lab_core.train.optim_v0 import Adam, lr_at


logger = get_logger("train")

Params = Dict[str, Tensor]


def l1_loss_ad(pred: Var, target: np.ndarray) -> Var:
    """mean |pred − target|; субградиент в нуле равен 0."""
    if pred.shape != target.shape:
        raise DimensionError.mismatch("l1_loss", pred.shape, target.shape)
    return ops.mean_all(ops.abs_(pred - pred.tape.constant(np.asarray(target, dtype=pred.dtype))))


def l1_loss(pred: Tensor, target: Tensor) -> float:
    if np.shape(pred) != np.shape(target):
        raise DimensionError.mismatch("l1_loss", np.shape(pred), np.shape(target))
    return float(np.mean(np.abs(np.asarray(pred) - np.asarray(target))))


def make_optimizer(cfg: TrainConfig) -> Adam:
    wd = cfg.weight_decay if cfg.optimizer == "adamw" else 0.0
    return Adam(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, weight_decay=wd)


def loss_and_grads(params: Mapping[str, Tensor], batch: Batch, cfg: SSTConfig) -> Tuple[float, Params]:
    lr_img, hr_img = batch
    tape = Tape()
    P = tape.params(dict(params))
    pred = sst_forward_ad(tape, P, np.asarray(lr_img, dtype=next(iter(params.values())).dtype), cfg)
    loss = l1_loss_ad(pred, hr_img)
    return float(loss.value), backward(tape, loss)


def train_step(
    params: Mapping[str, Tensor],
    opt: Adam,
    batch: Batch,
    cfg: SSTConfig,
    lr: float,
    step: int = 0,
) -> Tuple[Params, float]:
    """Один forward / backward / update.

    Raises
    ------
    NumericError
        Loss или градиенты не конечны (с номером шага).
    """
    loss, grads = loss_and_grads(params, batch, cfg)
    if not np.isfinite(loss):
        raise NumericError(f"training loss is not finite ({loss})", step=step)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"gradient of {name} is not finite", step=step)
    return opt.step(params, grads, lr), loss


@dataclass
class TrainResult:
    params: Params
    curve: pd.DataFrame

    @property
    def initial_loss(self) -> float:
        return float(self.curve["loss"].iloc[0]) if len(self.curve) else float("nan")

    @property
    def final_loss(self) -> float:
        return float(self.curve["loss"].iloc[-1]) if len(self.curve) else float("nan")


def default_batches(cfg: SSTConfig, tcfg: TrainConfig) -> Iterator[Batch]:
    lr_imgs, hr_imgs = make_synthetic_pairs(tcfg.n_images, tcfg.hr_size, cfg.scale, seed=tcfg.seed, channels=cfg.in_channels)
    return iter(PatchSampler(lr_imgs, hr_imgs, tcfg.patch, cfg.scale, tcfg.batch, seed=tcfg.seed))


def train_loop(
    cfg: SSTConfig,
    tcfg: TrainConfig,
    params: Optional[Mapping[str, Tensor]] = None,
    batches: Optional[Iterator[Batch]] = None,
    dtype: str = "f32",
) -> TrainResult:
    """Обучение на tcfg.steps шагов; кривая потерь: DataFrame step, loss, lr.

    На одном потоке при одинаковых (seed, config) результат побитово воспроизводим.
    """
    if params is None:
        params = init_sst_params(cfg, np.random.default_rng(tcfg.seed), dtype)
        if tcfg.init_from:
            params = init_from_checkpoint(params, Path(tcfg.init_from))
    params = dict(params)
    if batches is None:
        batches = default_batches(cfg, tcfg)

    opt = make_optimizer(tcfg)
    rows = []
    logger.info(
        "train_start",
        extra={"event": "train_start", "steps": tcfg.steps, "lr": tcfg.lr, "batch": tcfg.batch, "seed": tcfg.seed},
    )
    for step, batch in enumerate(prefetch(batches, tcfg.steps, tcfg.prefetch_batches)):
        lr = lr_at(step, tcfg.lr, tcfg.milestones, tcfg.gamma)
        params, loss = train_step(params, opt, batch, cfg, lr, step)
        rows.append({"step": step, "loss": loss, "lr": lr})
        if tcfg.log_every and step % tcfg.log_every == 0:
            logger.info("train_step", extra={"event": "train_step", "step": step, "loss": loss, "lr": lr})

    curve = pd.DataFrame(rows, columns=["step", "loss", "lr"])
    logger.info(
        "train_done",
        extra={
            "event": "train_done",
            "steps": len(rows),
            "final_loss": float(curve["loss"].iloc[-1]) if rows else None,
        },
    )
    return TrainResult(params=params, curve=curve)


def save_curve(curve: pd.DataFrame, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    curve.to_csv(path, index=False)
    return path


__all__ = [
    "l1_loss_ad",
    "l1_loss",
    "make_optimizer",
    "loss_and_grads",
    "train_step",
    "TrainResult",
    "default_batches",
    "train_loop",
    "save_curve",
]
