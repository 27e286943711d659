import numpy as np

from rib_lab.lab_core.blocks.model_v0 import nearest_upscale, sst_forward
from rib_lab.lab_core.config.config_v0 import SST_PRESETS, TRAIN_PRESETS
from rib_lab.lab_core.logging.logging_v1 import setup_logging
from rib_lab.lab_core.posbias.rib_v0 import PosTokenCache
from rib_lab.lab_core.train.data_v0 import make_synthetic_pairs
from rib_lab.lab_core.train.metrics_v0 import evaluate_pairs
from rib_lab.lab_core.train.train_v0 import train_loop

if __name__ == "__main__":
    setup_logging("INFO")

    sst = SST_PRESETS["sst-micro"]
    train = TRAIN_PRESETS["desk"]

    result = train_loop(sst, train)
    print(f"L1: {result.initial_loss:.5f} -> {result.final_loss:.5f}")

    # === Оценка на тех же картинках, что видела модель ===
    lr_imgs, hr_imgs = make_synthetic_pairs(8, train.hr_size, sst.scale, seed=train.seed)
    cache = PosTokenCache()
    sr = [sst_forward(result.params, lr, sst, cache) for lr in lr_imgs]
    nearest = [nearest_upscale(lr[None], sst.scale)[0] for lr in lr_imgs]

    model_eval = evaluate_pairs(list(zip(sr, hr_imgs)), border=sst.scale)
    nearest_eval = evaluate_pairs(list(zip(nearest, hr_imgs)), border=sst.scale)
    print(f"SST-micro: PSNR {model_eval.psnr:.3f} dB, SSIM {model_eval.ssim:.4f}")
    print(f"nearest:   PSNR {nearest_eval.psnr:.3f} dB, SSIM {nearest_eval.ssim:.4f}")
