"""TV smoothing of a feature map with outliers: range, TV norm and 4-bit error per iteration.

    python3 scripts/tv_demo.py --out runs/tv.csv --eps 0.4 0.001
"""
from __future__ import annotations

import argparse
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from stablequant import tensor as T
from stablequant.quant import QuantParams, mse
from stablequant.tensor import Tensor
from stablequant.tv import tv_norm_raw, tv_smooth


@dataclass
class DemoConfig:
    size: int = 32
    outliers: int = 12
    outlier_value: float = 3.0
    plateaus: tuple = (-0.3, 0.1, 0.25, -0.1)
    gamma2: float = 0.1
    eps: list = field(default_factory=lambda: [0.4, 1e-3])
    iterations: int = 3
    bits: int = 4
    alpha: float = 0.5
    seed: int = 0


def feature_map(cfg: DemoConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    x = np.zeros((cfg.size, cfg.size))
    h = cfg.size // 2
    x[:h, :h], x[:h, h:], x[h:, :h], x[h:, h:] = cfg.plateaus
    idx = rng.choice(x.size, cfg.outliers, replace=False)
    x.flat[idx] = rng.choice([-cfg.outlier_value, cfg.outlier_value], cfg.outliers)
    return x


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--eps", type=float, nargs="+", default=None)
    ap.add_argument("--gamma2", type=float, default=None)
    ap.add_argument("--iterations", type=int, default=None)
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args(argv)
    cfg = DemoConfig()
    for key in ("eps", "gamma2", "iterations", "seed"):
        if getattr(args, key) is not None:
            setattr(cfg, key, getattr(args, key))

    q = QuantParams(bits=cfg.bits, signed=True, role="weight")
    q.set_alpha(cfg.alpha)
    x0 = feature_map(cfg)
    rows = []
    for eps in cfg.eps:
        x = x0
        for it in range(cfg.iterations + 1):
            if it:
                x = tv_smooth(Tensor(x), math.sqrt(cfg.gamma2), eps, warn=False).data
            with T.no_grad():
                err = mse(x, q(Tensor(x)).data)
            rows.append([eps, it, float(np.ptp(x)), tv_norm_raw(x), err])
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eps", "iteration", "range", "tv_norm", "quant_mse"])
        w.writerows(rows)
    for r in rows:
        print(f"eps {r[0]:g} it {r[1]}: range {r[2]:.3f} tv {r[3]:.1f} mse {r[4]:.4f}")


if __name__ == "__main__":
    main()
