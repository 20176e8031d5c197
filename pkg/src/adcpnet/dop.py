"""Disparity candidate generation: constant offsets or learned dynamic offsets."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .backbone import SLOPE, conv_param, init_residual_block, residual_block
from .conv import conv2d
from .tensor import Tensor


def constant_offsets(N: int) -> list[int]:
    """Offsets ``n - ceil(N/2)`` for ``n = 1..N``."""
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    return [n - math.ceil(N / 2) for n in range(1, N + 1)]


def _spread(N: int) -> list[int]:
    # constant offsets reordered so k = 0 comes first
    return sorted(constant_offsets(N), key=lambda k: (abs(k), k))


def constant_offset_field(N: int, shape, dtype=np.float32) -> Tensor:
    """Constant offsets laid out as ``[..., N, H, W]`` with the zero offset first.

    Channel 0 carries ``k = 0`` so that, like the learned field, the first
    candidate is always the coarse disparity itself.
    """
    ks = _spread(N)
    lead, (H, W) = tuple(shape[:-2]), tuple(shape[-2:])
    arr = np.broadcast_to(np.asarray(ks, dtype=dtype)[:, None, None], (N, H, W))
    return Tensor(np.ascontiguousarray(np.broadcast_to(arr, lead + (N, H, W))))


@dataclass
class DopParams:
    entry_w: Tensor
    entry_b: Tensor
    blocks: list = field(default_factory=list)
    head_w: Optional[Tensor] = None
    head_b: Optional[Tensor] = None


def init_dop(rng, C_dop: int, N: int, dtype=np.float32) -> DopParams:
    ew, eb = conv_param(rng, C_dop, 4, 3, 3, dtype=dtype)
    blocks = [init_residual_block(rng, C_dop, C_dop, 1, dtype) for _ in range(4)]
    p = DopParams(ew, eb, blocks)
    if N > 1:
        hw, hb = conv_param(rng, N - 1, C_dop, 3, 3, dtype=dtype)
        # Start from the constant candidate set. Candidates that all sit on the
        # coarse value get identical gradients and never spread apart.
        hw.data *= 0.1
        hb.data[:] = _spread(N)[1:]
        p.head_w, p.head_b = hw, hb
    return p


def predict_offsets(
    coarse_disp: Tensor,
    left_img: Tensor,
    p: DopParams,
    H_s: int,
    W_s: int,
    N: int,
    disp_norm: float = 1.0,
) -> Tensor:
    """Per-pixel offsets ``[..., N, H_s, W_s]`` from coarse disparity and left image.

    The coarse map is resized to ``(H_s, W_s)`` with its values rescaled to
    that resolution, then divided by ``disp_norm`` before entering the CNN.
    Channel 0 is structurally zero.
    """
    lead = coarse_disp.shape[:-2]
    disp = T.upsample_disparity(coarse_disp, H_s, W_s)
    disp = T.scale(T.reshape(disp, lead + (1, H_s, W_s)), 1.0 / disp_norm)
    img = T.bilinear_resize(left_img, H_s, W_s)
    x = T.concat([disp, img], axis=-3)
    x = T.leaky_relu(conv2d(x, p.entry_w, p.entry_b, pad=1), SLOPE)
    for b in p.blocks:
        x = residual_block(x, b, stride=1)
    zero = Tensor(np.zeros(lead + (1, H_s, W_s), dtype=left_img.dtype))
    if N == 1:
        return zero
    head = conv2d(x, p.head_w, p.head_b, pad=1)
    return T.concat([zero, head], axis=-3)


def make_candidates(coarse_up: Tensor, offsets: Tensor, D_range: int) -> Tensor:
    """``clamp(coarse_up + offsets[n], 0, D_range - 1)`` for every candidate.

    Clamped candidates still receive gradients that would pull them back into
    range, so offsets that overshoot early in training can recover.
    """
    lead = coarse_up.shape[:-2]
    base = T.reshape(coarse_up, lead + (1,) + coarse_up.shape[-2:])
    base = T.broadcast_to(base, offsets.shape)
    return T.clamp_recoverable(T.add(base, offsets), 0.0, float(D_range - 1))
