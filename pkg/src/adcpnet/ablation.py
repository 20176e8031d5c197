"""Candidate-generation / stage-2 aggregation ablations over the same data and seeds."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .conv import count_flops
from .data import SceneSpec, StereoSample, SyntheticStream, normalize, pad_to_multiple, synthetic_set
from .model import Model, ModelConfig, forward
from .tensor import Tensor, no_record
from .train import TrainHyper, evaluate, train

# name -> (offsets, stage2_agg)
VARIANTS = {
    "baseline": ("constant", "conv3d"),
    "const+dic": ("constant", "dic"),
    "dop+3dconv": ("dop", "conv3d"),
    "dop+dic": ("dop", "dic"),
}

# Thin bars (under 8 px wide) in front of one far layer and one mid rectangle.
THIN_BAR_SCENE = SceneSpec(height=64, width=96, n_layers=2, disp_range=(2, 32), n_bars=3, bar_width=6)
THIN_BAR_MODEL = ModelConfig(C=2, C_3d=4, C_dop=8, N=3, D_max=64, scale_preset=None)


def thin_bar_data(n_train: int, n_val: int = 32, scene: SceneSpec = THIN_BAR_SCENE):
    """Lazily generated training scenes plus a disjoint, fixed validation set.

    A few dozen fixed training pairs are simply memorized by these small
    models, so training draws each scene about once instead.
    """
    return SyntheticStream(scene, n_train, seed0=100_000), synthetic_set(scene, n_val, seed0=1000)


@dataclass
class AblationRow:
    variant: str
    N: int
    epe: float  # median over seeds
    d1: float
    stage2_flops: int
    total_flops: int
    per_seed_epe: tuple = ()


def variant_config(base: ModelConfig, variant: str, N: int) -> ModelConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    offsets, agg = VARIANTS[variant]
    return dataclasses.replace(base, N=N, offsets=offsets, stage2_agg=agg)


def measure_flops(model: Model, H: int, W: int) -> dict:
    """Forward flops per scope on one ``H x W`` pair (padded to multiples of 16)."""
    Hp, Wp = H + (-H) % 16, W + (-W) % 16
    dtype = model.parameters()[0].dtype
    z = Tensor(np.zeros((3, Hp, Wp), dtype))
    with no_record(), count_flops() as c:
        forward(model, z, z)
    return dict(c.totals)


def offset_range(model: Model, samples: Sequence[StereoSample], region: str = "bar") -> tuple[float, float]:
    """Min and max non-trivial offset (quarter-resolution pixels) inside ``region``.

    The region mask is sampled at the stage-2 grid; channel 0 (always zero) is
    excluded.
    """
    lo, hi = np.inf, -np.inf
    dtype = model.parameters()[0].dtype
    for s in samples:
        mask = s.regions.get(region)
        if mask is None or not mask.any():
            continue
        lp, _ = pad_to_multiple(normalize(s.left))
        rp, _ = pad_to_multiple(normalize(s.right))
        with no_record():
            out = forward(model, Tensor(lp.astype(dtype)), Tensor(rp.astype(dtype)))
        off = out.offsets.data[1:]
        mpad, _ = pad_to_multiple(mask.astype(np.uint8))
        m4 = mpad[::4, ::4].astype(bool)  # grid points of the stage-2 map
        if m4.any() and off.size:
            vals = off[:, m4]
            lo, hi = min(lo, float(vals.min())), max(hi, float(vals.max()))
    return lo, hi


def run_ablation(
    base: ModelConfig,
    variants: Sequence[str],
    Ns: Sequence[int],
    seeds: Sequence[int],
    train_set: Sequence[StereoSample],
    val_set: Sequence[StereoSample],
    hyper: TrainHyper,
    on_result: Optional[Callable[[str, int, int, dict, Model], None]] = None,
) -> list[AblationRow]:
    """Train every variant x N x seed on shared data; one row per variant and N.

    Every variant sees the same samples in the same order for a given seed,
    so differences come from the candidate generator and aggregator alone.
    """
    if not val_set:
        raise ValueError("ablation needs a validation set")
    H, W = val_set[0].shape
    rows = []
    for N in Ns:
        for v in variants:
            cfg = variant_config(base, v, N)
            epes, d1s, flops = [], [], None
            for seed in seeds:
                ck = train(cfg, train_set, hyper=dataclasses.replace(hyper, seed=seed))
                model = ck.to_model()
                m = evaluate(model, val_set)
                epes.append(m["full.epe"])
                d1s.append(m["full.d1"])
                if flops is None:
                    flops = measure_flops(model, H, W)
                if on_result is not None:
                    on_result(v, N, seed, m, model)
            rows.append(AblationRow(v, N, float(np.median(epes)), float(np.median(d1s)),
                                    flops.get("stage2", 0), sum(flops.values()), tuple(epes)))
    return rows


def format_table(rows: Sequence[AblationRow]) -> str:
    head = ("variant", "N", "EPE", "D1(%)", "stage2 MFLOP", "total MFLOP", "EPE per seed")
    body = [
        (r.variant, str(r.N), f"{r.epe:.4f}", f"{r.d1:.3f}", f"{r.stage2_flops / 1e6:.3f}",
         f"{r.total_flops / 1e6:.3f}", " ".join(f"{e:.4f}" for e in r.per_seed_epe))
        for r in rows
    ]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in [head] + body]
    return "\n".join(lines) + "\n"
