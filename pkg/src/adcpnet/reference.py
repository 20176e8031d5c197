"""Slow scalar-loop reference implementations.

These are deliberately naive: they index every scalar explicitly and share no
code with the vectorized kernels they are compared against.
"""
from __future__ import annotations

import math

import numpy as np


def conv2d_loops(x, w, b, stride=1, pad=0):
    F_in, H, W = x.shape
    F_out, _, kh, kw = w.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((F_out, Ho, Wo))
    for o in range(F_out):
        for y in range(Ho):
            for x_ in range(Wo):
                acc = 0.0 if b is None else float(b[o])
                for c in range(F_in):
                    for i in range(kh):
                        for j in range(kw):
                            yy = y * stride + i - pad
                            xx = x_ * stride + j - pad
                            if 0 <= yy < H and 0 <= xx < W:
                                acc += float(x[c, yy, xx]) * float(w[o, c, i, j])
                out[o, y, x_] = acc
    return out


def conv3d_loops(x, w, b, stride=1, pad=0):
    F_in, D, H, W = x.shape
    F_out, _, kd, kh, kw = w.shape
    Do = (D + 2 * pad - kd) // stride + 1
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((F_out, Do, Ho, Wo))
    for o in range(F_out):
        for z in range(Do):
            for y in range(Ho):
                for x_ in range(Wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(F_in):
                        for l in range(kd):
                            zz = z * stride + l - pad
                            if not 0 <= zz < D:
                                continue
                            for i in range(kh):
                                yy = y * stride + i - pad
                                if not 0 <= yy < H:
                                    continue
                                for j in range(kw):
                                    xx = x_ * stride + j - pad
                                    if 0 <= xx < W:
                                        acc += float(x[c, zz, yy, xx]) * float(w[o, c, l, i, j])
                    out[o, z, y, x_] = acc
    return out


def full_volume_loops(left, right, D):
    F, H, W = left.shape
    vol = np.zeros((2 * F, D, H, W))
    for d in range(D):
        for y in range(H):
            for x in range(W):
                for f in range(F):
                    vol[f, d, y, x] = left[f, y, x]
                    if x - d >= 0:
                        vol[F + f, d, y, x] = right[f, y, x - d]
    return vol


def warp_pixel(row, pos):
    """Linearly interpolate a 1D row at real position ``pos``, zero outside."""
    x0 = math.floor(pos)
    t = pos - x0
    W = len(row)
    a = float(row[x0]) if 0 <= x0 < W else 0.0
    b = float(row[x0 + 1]) if 0 <= x0 + 1 < W else 0.0
    return (1 - t) * a + t * b


def compact_volume_loops(left, right, cands):
    F, H, W = left.shape
    N = cands.shape[0]
    vol = np.zeros((2 * F, N, H, W))
    for n in range(N):
        for y in range(H):
            for x in range(W):
                for f in range(F):
                    vol[f, n, y, x] = left[f, y, x]
                    vol[F + f, n, y, x] = warp_pixel(right[f, y], x - float(cands[n, y, x]))
    return vol


def dic_layer_loops(vol, kernels, biases):
    """One disparity-independent layer written directly over candidates.

    ``vol`` is ``[F_in, N_in, H, W]``. ``kernels[n_out][f_out]`` is a
    ``[F_in, N_in, 3, 3]`` array: a 3x3xN kernel spanning every input candidate,
    with its own weights for each output candidate. Returns
    ``[F_out, N_out, H, W]``.
    """
    F_in, N_in, H, W = vol.shape
    N_out = len(kernels)
    F_out = len(kernels[0])
    out = np.zeros((F_out, N_out, H, W))
    for n in range(N_out):
        for fo in range(F_out):
            k = kernels[n][fo]
            for y in range(H):
                for x in range(W):
                    acc = float(biases[n][fo])
                    for fi in range(F_in):
                        for m in range(N_in):
                            for i in range(3):
                                yy = y + i - 1
                                if not 0 <= yy < H:
                                    continue
                                for j in range(3):
                                    xx = x + j - 1
                                    if 0 <= xx < W:
                                        acc += float(k[fi, m, i, j]) * float(vol[fi, m, yy, xx])
                    out[fo, n, y, x] = acc
    return out


def metrics_loops(pred, gt, mask):
    errs = []
    gts = []
    H, W = gt.shape
    for y in range(H):
        for x in range(W):
            if mask[y, x]:
                errs.append(abs(float(pred[y, x]) - float(gt[y, x])))
                gts.append(float(gt[y, x]))
    n = len(errs)
    epe = sum(errs) / n
    bad2 = 100.0 * sum(1 for e in errs if e > 2) / n
    bad3 = 100.0 * sum(1 for e in errs if e > 3) / n
    d1 = 100.0 * sum(1 for e, g in zip(errs, gts) if e > 3 and e > 0.05 * g) / n
    ranked = sorted(errs)
    a95 = ranked[max(math.ceil(0.95 * n), 1) - 1]
    return {"epe": epe, "2px": bad2, "3px": bad3, "d1": d1, "a95": a95}
