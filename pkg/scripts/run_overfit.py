"""Overfit the tiny configuration on eight synthetic 96x64 pairs.

    python scripts/run_overfit.py --iters 2000 --every 100
"""
from __future__ import annotations

import argparse
import time

from adcpnet.data import SceneSpec, synthetic_set
from adcpnet.model import ModelConfig
from adcpnet.train import TrainHyper, evaluate, format_log, train


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--pairs", type=int, default=8)
    ap.add_argument("--every", type=int, default=100, help="training-set evaluation period")
    a = ap.parse_args(argv)

    data = synthetic_set(SceneSpec(height=64, width=96, n_layers=2, disp_range=(2, 32)), a.pairs)
    cfg = ModelConfig(C=2, C_3d=4, C_dop=8, N=5, D_max=64, scale_preset=None)
    hyper = TrainHyper(lr=a.lr, iters=a.iters, batch=a.batch, seed=a.seed, val_every=a.every)
    t0 = time.time()

    def log(rec):
        if "val_full.epe" in rec:
            print(f"{format_log(rec)}  ({time.time() - t0:.0f}s)", flush=True)

    ck = train(cfg, data, data, hyper=hyper, on_log=log)
    m = evaluate(ck.to_model(), data)
    print(f"final training EPE {m['full.epe']:.4f} after {ck.iteration} iterations, {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
