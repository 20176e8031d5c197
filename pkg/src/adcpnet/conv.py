"""2D/3D cross-correlation via im2col, plus a scoped multiply-accumulate counter."""
from __future__ import annotations

import contextlib
import itertools
from collections import defaultdict
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _make


class FlopCounter:
    """Accumulates forward-pass flops (2 per multiply-accumulate) per scope."""

    def __init__(self):
        self.totals: dict[str, int] = defaultdict(int)
        self._scopes: list[str] = []

    @property
    def scope(self) -> str:
        return self._scopes[-1] if self._scopes else "other"

    def add(self, flops: int) -> None:
        self.totals[self.scope] += int(flops)

    def total(self) -> int:
        return sum(self.totals.values())


_counters: list[FlopCounter] = []


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


@contextlib.contextmanager
def flop_scope(name: str):
    for c in _counters:
        c._scopes.append(name)
    try:
        yield
    finally:
        for c in _counters:
            c._scopes.pop()


def _record_flops(flops: int) -> None:
    for c in _counters:
        c.add(flops)


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    # The trailing remainder may only cover zero padding or samples that a
    # kernel narrower than its stride skips anyway.
    span = n + 2 * pad - k
    if span < 0 or span % stride > pad + max(stride - k, 0):
        raise ShapeError("conv: non-integer output extent", (n, k, stride, pad))
    return span // stride + 1


def _convnd(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int, pad: int, nsp: int) -> Tensor:
    unbatched = x.ndim == nsp + 1
    xd = x.data[None] if unbatched else x.data
    wd = weight.data
    if xd.ndim != nsp + 2 or wd.ndim != nsp + 2:
        raise ShapeError(f"conv{nsp}d", x.shape, weight.shape)
    B, C = xd.shape[:2]
    O, Ci = wd.shape[:2]
    ks = wd.shape[2:]
    if Ci != C:
        raise ShapeError(f"conv{nsp}d", x.shape, weight.shape)
    if any(k % 2 == 0 for k in ks):
        raise ShapeError(f"conv{nsp}d: even kernel", wd.shape)
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv{nsp}d: bias", bias.shape, (O,))
    sp = xd.shape[2:]
    outs = tuple(_out_extent(n, k, stride, pad) for n, k in zip(sp, ks))

    xp = np.pad(xd, [(0, 0), (0, 0)] + [(pad, pad)] * nsp) if pad else xd
    spatial_axes = tuple(range(2, 2 + nsp))
    win = sliding_window_view(xp, ks, axis=spatial_axes)
    win = win[(slice(None), slice(None)) + tuple(slice(None, None, stride) for _ in range(nsp))]
    # [B, *outs, C, *ks] -> 2D
    perm = (0,) + tuple(range(2, 2 + nsp)) + (1,) + tuple(range(2 + nsp, 2 + 2 * nsp))
    cols = np.ascontiguousarray(win.transpose(perm)).reshape(B * int(np.prod(outs)), -1)
    wmat = wd.reshape(O, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape((B,) + outs + (O,))
    out = np.moveaxis(out, -1, 1)
    out = np.ascontiguousarray(out)
    _record_flops(2 * cols.shape[0] * cols.shape[1] * O)

    def bw(g):
        g = g[None] if unbatched else g
        g2 = np.moveaxis(g, 1, -1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(wd.shape)
        gb = g2.sum(axis=0) if bias is not None else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape((B,) + outs + (C,) + ks)
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            for offs in itertools.product(*(range(k) for k in ks)):
                dst = (slice(None), slice(None)) + tuple(
                    slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offs, outs)
                )
                src = dcols[(slice(None),) + (slice(None),) * nsp + (slice(None),) + offs]
                gxp[dst] += np.moveaxis(src, -1, 1)
            core = (slice(None), slice(None)) + tuple(slice(pad, pad + n) for n in sp)
            gx = gxp[core]
            if unbatched:
                gx = gx[0]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out[0] if unbatched else out, parents, bw)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate ``x[(B,) F_in, H, W]`` with ``weight[F_out, F_in, kh, kw]``."""
    return _convnd(x, weight, bias, stride, pad, 2)


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate ``x[(B,) F_in, D, H, W]`` with ``weight[F_out, F_in, kd, kh, kw]``."""
    return _convnd(x, weight, bias, stride, pad, 3)
