"""Soft-argmin regression, the multi-output smooth-L1 loss, and disparity metrics."""
from __future__ import annotations

import math
from dataclasses import astuple, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _expectation(costs: Tensor, values) -> Tensor:
    """``sum_k v_k e^{-c_k} / sum_k e^{-c_k}`` over axis -3, fused.

    Normalising after the weighted sum keeps uniform costs exact: the result
    is then the plain mean of ``values``.
    """
    c = costs.data
    v = values.data if isinstance(values, Tensor) else values
    e = np.exp(-(c - c.min(axis=-3, keepdims=True)))
    z = e.sum(axis=-3)
    out = (e * v).sum(axis=-3) / z

    def bw(g):
        p = e / z[..., None, :, :]
        gc = -p * (v - out[..., None, :, :]) * g[..., None, :, :]
        if isinstance(values, Tensor):
            return gc, p * g[..., None, :, :]
        return (gc,)

    parents = (costs, values) if isinstance(values, Tensor) else (costs,)
    return T._make(out, parents, bw)


def soft_argmin_full(costs: Tensor) -> Tensor:
    """Expected disparity ``sum_d d * softmax(-cost)_d`` over axis -3."""
    D = costs.shape[-3]
    levels = np.arange(D, dtype=costs.dtype)[:, None, None]
    return _expectation(costs, levels)


def soft_argmin_candidates(costs: Tensor, cands: Tensor) -> Tensor:
    """Expected disparity over per-pixel candidates ``cands[..., N, H, W]``."""
    if costs.shape != cands.shape:
        raise T.ShapeError("soft_argmin_candidates", costs.shape, cands.shape)
    return _expectation(costs, cands)


def smooth_l1(x: float) -> float:
    ax = abs(x)
    return 0.5 * x * x if ax < 1 else ax - 0.5


@dataclass
class LossWeights:
    l11: float = 0.25
    l12: float = 0.5
    l21: float = 0.5
    l22: float = 1.0

    def as_tuple(self) -> tuple:
        return astuple(self)


def total_loss(outputs: Sequence[Tensor], gt: np.ndarray, mask: np.ndarray, w: LossWeights | None = None) -> Tensor:
    """Weighted smooth-L1 over valid pixels for the four disparity outputs.

    Outputs coarser than ``gt`` are bilinearly upsampled with their values
    rescaled by the width ratio before differencing. ``gt``/``mask`` may
    carry a batch axis; P counts valid pixels across the whole batch.
    """
    w = w or LossWeights()
    mask = np.asarray(mask, dtype=bool)
    P = int(mask.sum())
    if P == 0:
        raise ValueError("loss needs at least one valid pixel")
    H, W = gt.shape[-2:]
    gt_c = np.where(mask, gt, 0).astype(outputs[0].dtype)
    m = mask.astype(outputs[0].dtype)
    total = None
    for lam, d in zip(w.as_tuple(), outputs):
        if lam == 0:
            continue
        if d.shape[-2:] != (H, W):
            d = T.upsample_disparity(d, H, W)
        err = T.mul(T.smooth_l1(T.sub(d, gt_c)), m)
        term = T.scale(T.tsum(err), lam / P)
        total = term if total is None else T.add(total, term)
    return total


# ---------------------------------------------------------------------------
# metrics


def _errors(pred, gt, mask) -> tuple[np.ndarray, np.ndarray]:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("metric needs a nonempty validity mask")
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    return np.abs(pred - gt)[mask], gt[mask]


def metric_epe(pred, gt, mask) -> float:
    err, _ = _errors(pred, gt, mask)
    return float(err.mean())


def metric_px(pred, gt, mask, t: float) -> float:
    """Percentage of valid pixels with error above ``t`` pixels."""
    err, _ = _errors(pred, gt, mask)
    return float(100.0 * (err > t).mean())


def metric_d1(pred, gt, mask) -> float:
    """Percentage of valid pixels whose error exceeds both 3 px and 5% of gt."""
    err, g = _errors(pred, gt, mask)
    return float(100.0 * ((err > 3) & (err > 0.05 * g)).mean())


def metric_a95(pred, gt, mask) -> float:
    """Largest error among the best 95% of valid pixels (nearest rank)."""
    err, _ = _errors(pred, gt, mask)
    err = np.sort(err)
    rank = max(math.ceil(0.95 * err.size), 1)
    return float(err[rank - 1])


def all_metrics(pred, gt, mask) -> dict[str, float]:
    return {
        "epe": metric_epe(pred, gt, mask),
        "d1": metric_d1(pred, gt, mask),
        "2px": metric_px(pred, gt, mask, 2),
        "3px": metric_px(pred, gt, mask, 3),
        "a95": metric_a95(pred, gt, mask),
    }


def format_report(record: dict) -> str:
    """Flat ``key=value`` lines, one metric per line."""
    lines = []
    for k, v in record.items():
        lines.append(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        k, _, v = line.partition("=")
        try:
            out[k] = float(v)
        except ValueError:
            out[k] = v
    return out
