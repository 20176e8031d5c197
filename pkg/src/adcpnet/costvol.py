"""Full-range and compact (candidate) concatenation cost volumes."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, _make, warp_right

__all__ = [
    "build_full_volume",
    "build_compact_volume",
    "warp_right",
    "full_volume_size",
    "compact_volume_size",
]


def build_full_volume(left: Tensor, right: Tensor, D: int) -> Tensor:
    """``[..., F, H, W]`` pair -> ``[..., 2F, D, H, W]``.

    Slice ``d`` holds ``concat(left, right shifted right by d)``; columns whose
    source ``x - d`` falls outside the frame are zero on the right half.
    """
    if left.shape != right.shape:
        raise T.ShapeError("full volume", left.shape, right.shape)
    W = left.shape[-1]
    if D < 1:
        raise ValueError(f"disparity levels must be >= 1, got {D}")
    if D > W:
        raise ValueError(f"disparity levels {D} exceed feature width {W}")
    ld, rd = left.data, right.data
    F = ld.shape[-3]
    lead = ld.shape[:-3]
    vol = np.zeros(lead + (2 * F, D) + ld.shape[-2:], dtype=ld.dtype)
    vol[..., :F, :, :, :] = ld[..., :, None, :, :]
    for d in range(D):
        vol[..., F:, d, :, d:] = rd[..., :, :, : W - d]

    def bw(g):
        gl = g[..., :F, :, :, :].sum(axis=-3)
        gr = np.zeros_like(rd)
        for d in range(D):
            gr[..., :, :, : W - d] += g[..., F:, d, :, d:]
        return gl, gr

    return _make(vol, (left, right), bw)


def build_compact_volume(left: Tensor, right: Tensor, cands: Tensor) -> Tensor:
    """``[..., F, H, W]`` features and ``[..., N, H, W]`` candidates -> ``[..., 2F, N, H, W]``."""
    if left.shape != right.shape:
        raise T.ShapeError("compact volume", left.shape, right.shape)
    N = cands.shape[-3]
    lead = left.shape[:-3]
    F = left.shape[-3]
    lexp = T.reshape(left, lead + (F, 1) + left.shape[-2:])
    lexp = T.broadcast_to(lexp, lead + (F, N) + left.shape[-2:])
    warped = T.warp_candidates(right, cands)
    return T.concat([lexp, warped], axis=-4)


def full_volume_size(F: int, D: int, H: int, W: int) -> int:
    return 2 * F * D * H * W


def compact_volume_size(F: int, N: int, H: int, W: int) -> int:
    return 2 * F * N * H * W
