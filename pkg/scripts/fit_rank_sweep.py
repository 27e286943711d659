import numpy as np
import pandas as pd

from rib_lab.lab_core.logging.logging_v1 import setup_logging
from rib_lab.lab_core.posbias.analysis_v0 import fit_rib_to_bias, gaussian_bump_bias
from rib_lab.lab_core.posbias.geometry_v0 import WindowGeometry
from rib_lab.lab_core.posbias.rib_v0 import RIBParams

if __name__ == "__main__":
    setup_logging("WARNING")

    M = 8
    geom = WindowGeometry.square(M, "f64")
    target = gaussian_bump_bias(M, heads=1, sigma=1.5)

    rows = []
    for R in (2, 8, 32):
        # одинаковый seed для всех рангов
        p0 = RIBParams.init(10, 32, R, 1, np.random.default_rng(0), "f64")
        result = fit_rib_to_bias(target, p0, geom, steps=2000, lr=1.0)
        rows.append({"R": R, "params": p0.param_count, "mse": result.mse})

    df = pd.DataFrame(rows)
    print(df.to_markdown(index=False))
