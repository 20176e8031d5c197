"""Cost regularization: weight-shared 3D stacks and the disparity-independent stack.

The disparity-independent convolution (DIC) spans all N candidates with a
3x3xN kernel whose weights differ per output candidate. Folding the candidate
axis into channels turns it into an ordinary 2D convolution; ``dic_oracle``
evaluates the same stack directly over candidates with scalar loops.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import reference
from . import tensor as T
from .backbone import SLOPE, conv_param
from .conv import conv2d, conv3d
from .tensor import Tensor

N_LAYERS = 6


@dataclass
class Conv3dStackParams:
    """Six 3x3x3 layers of equal width plus two single-channel heads."""

    layers: list  # [(w, b)] * 6
    head_inter: tuple
    head_final: tuple


@dataclass
class DicParams:
    """Six 3x3 layers over candidate-flattened channels plus two N-channel heads."""

    layers: list
    head_inter: tuple
    head_final: tuple
    N: int


Stage1Params = Conv3dStackParams


def init_conv3d_stack(rng, c_in: int, width: int, dtype=np.float32) -> Conv3dStackParams:
    layers = []
    c = c_in
    for _ in range(N_LAYERS):
        layers.append(conv_param(rng, width, c, 3, 3, 3, dtype=dtype))
        c = width
    return Conv3dStackParams(
        layers,
        conv_param(rng, 1, width, 3, 3, 3, dtype=dtype),
        conv_param(rng, 1, width, 3, 3, 3, dtype=dtype),
    )


def init_dic(rng, c_in: int, N: int, width: int, dtype=np.float32) -> DicParams:
    layers = []
    c = c_in * N
    for _ in range(N_LAYERS):
        layers.append(conv_param(rng, width, c, 3, 3, dtype=dtype))
        c = width
    return DicParams(
        layers,
        conv_param(rng, N, width, 3, 3, dtype=dtype),
        conv_param(rng, N, width, 3, 3, dtype=dtype),
        N,
    )


def _squeeze_head(c: Tensor) -> Tensor:
    # [..., 1, D, H, W] -> [..., D, H, W]
    return T.reshape(c, c.shape[:-4] + c.shape[-3:])


def regularize_full(vol: Tensor, p: Conv3dStackParams) -> tuple[Tensor, Tensor]:
    """Costs ``[..., D, H, W]`` from the first-layer and last-layer heads."""
    x = vol
    inter = None
    for i, (w, b) in enumerate(p.layers):
        x = T.leaky_relu(conv3d(x, w, b, pad=1), SLOPE)
        if i == 0:
            inter = _squeeze_head(conv3d(x, *p.head_inter, pad=1))
    final = _squeeze_head(conv3d(x, *p.head_final, pad=1))
    return inter, final


# a weight-shared 3D stack over candidates has the same structure
regularize_compact_3d = regularize_full


def dic_forward(vol: Tensor, p: DicParams) -> tuple[Tensor, Tensor]:
    """``[..., 2F, N, H, W]`` -> two ``[..., N, H, W]`` cost maps via folded 2D convs."""
    lead = vol.shape[:-4]
    F2, N, H, W = vol.shape[-4:]
    if N != p.N:
        raise T.ShapeError("dic: candidate count", vol.shape, (p.N,))
    x = T.reshape(vol, lead + (F2 * N, H, W))
    inter = None
    for i, (w, b) in enumerate(p.layers):
        x = T.leaky_relu(conv2d(x, w, b, pad=1), SLOPE)
        if i == 0:
            inter = conv2d(x, *p.head_inter, pad=1)
    final = conv2d(x, *p.head_final, pad=1)
    return inter, final


def _leaky(a):
    return np.where(a > 0, a, SLOPE * a)


def dic_oracle(vol: np.ndarray, p: DicParams) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the DIC stack over an unbatched ``[2F, N, H, W]`` volume with loops.

    Weight-mapping contract: flattened channel ``f * N + m`` of a folded
    weight is input feature ``f`` at candidate ``m`` of the 3x3xN kernel.
    Hidden activations carry a single (merged) candidate slot; the heads emit
    one output candidate per kernel.
    """
    F2, N = vol.shape[:2]

    def as_kernels(w, b, f_in, n_in, per_candidate_out):
        w = np.asarray(w.data, dtype=np.float64)
        bb = np.asarray(b.data, dtype=np.float64)
        if per_candidate_out:
            return ([[w[n].reshape(f_in, n_in, 3, 3)] for n in range(w.shape[0])],
                    [[bb[n]] for n in range(w.shape[0])])
        return ([[w[o].reshape(f_in, n_in, 3, 3) for o in range(w.shape[0])]],
                [[bb[o] for o in range(w.shape[0])]])

    def head(x, wb):
        ks, bs = as_kernels(*wb, x.shape[0], 1, True)
        return reference.dic_layer_loops(x, ks, bs)[0]  # [N, H, W]

    x = np.asarray(vol, dtype=np.float64)
    f_in, n_in = F2, N
    inter = None
    for i, (w, b) in enumerate(p.layers):
        ks, bs = as_kernels(w, b, f_in, n_in, False)
        x = _leaky(reference.dic_layer_loops(x, ks, bs))  # [width, 1, H, W]
        f_in, n_in = x.shape[0], 1
        if i == 0:
            inter = head(x, p.head_inter)
    return inter, head(x, p.head_final)
