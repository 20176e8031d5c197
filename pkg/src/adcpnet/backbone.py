"""Shared-weight residual feature extractor producing a four-scale pyramid."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .conv import conv2d
from .tensor import Tensor

SLOPE = 0.1


def conv_param(rng, c_out: int, c_in: int, *ks: int, dtype=np.float32, name: str = "") -> tuple[Tensor, Tensor]:
    """He (fan-in) initialised weight and zero bias."""
    fan_in = c_in * int(np.prod(ks))
    std = np.sqrt(2.0 / ((1 + SLOPE**2) * fan_in))
    w = rng.normal(0.0, std, size=(c_out, c_in) + ks).astype(dtype)
    return Tensor(w, requires_grad=True, name=name + ".w"), Tensor(np.zeros(c_out, dtype), requires_grad=True, name=name + ".b")


@dataclass
class ResidualBlockParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    proj_w: Optional[Tensor] = None
    proj_b: Optional[Tensor] = None


def init_residual_block(rng, c_in: int, c_out: int, stride: int = 1, dtype=np.float32) -> ResidualBlockParams:
    w1, b1 = conv_param(rng, c_out, c_in, 3, 3, dtype=dtype)
    w2, b2 = conv_param(rng, c_out, c_out, 3, 3, dtype=dtype)
    p = ResidualBlockParams(w1, b1, w2, b2)
    if stride != 1 or c_in != c_out:
        p.proj_w, p.proj_b = conv_param(rng, c_out, c_in, 1, 1, dtype=dtype)
    return p


def residual_block(x: Tensor, p: ResidualBlockParams, stride: int = 1) -> Tensor:
    """leaky(conv(leaky(conv(x))) + skip(x)); halves H and W when stride is 2."""
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if stride == 2 and (x.shape[-1] % 2 or x.shape[-2] % 2):
        raise ValueError(f"stride-2 block needs even extents, got {x.shape[-2:]}")
    h = T.leaky_relu(conv2d(x, p.w1, p.b1, stride=stride, pad=1), SLOPE)
    h = conv2d(h, p.w2, p.b2, stride=1, pad=1)
    if p.proj_w is not None:
        skip = conv2d(x, p.proj_w, p.proj_b, stride=stride, pad=0)
    else:
        skip = x
    return T.leaky_relu(h + skip, SLOPE)


@dataclass
class BackboneParams:
    stem_w: Tensor
    stem_b: Tensor
    down: list = field(default_factory=list)  # four stride-2 ResidualBlockParams


@dataclass
class FeaturePyramid:
    f2: Tensor
    f4: Tensor
    f8: Tensor
    f16: Tensor


def pyramid_channels(C: int) -> tuple[int, int, int, int]:
    return (2 * C, 2 * C, 4 * C, 8 * C)


def init_backbone(rng, C: int, dtype=np.float32) -> BackboneParams:
    chans = pyramid_channels(C)
    stem_w, stem_b = conv_param(rng, chans[0], 3, 3, 3, dtype=dtype)
    down = []
    c_prev = chans[0]
    for c in chans:
        down.append(init_residual_block(rng, c_prev, c, stride=2, dtype=dtype))
        c_prev = c
    return BackboneParams(stem_w, stem_b, down)


def extract_features(img: Tensor, params: BackboneParams) -> FeaturePyramid:
    """Pyramid at 1/2, 1/4, 1/8 and 1/16 resolution with 2C, 2C, 4C, 8C channels."""
    H, W = img.shape[-2:]
    if H % 16 or W % 16:
        raise ValueError(f"image extents must be divisible by 16, got {(H, W)}")
    x = T.leaky_relu(conv2d(img, params.stem_w, params.stem_b, stride=1, pad=1), SLOPE)
    feats = []
    for p in params.down:
        x = residual_block(x, p, stride=2)
        feats.append(x)
    return FeaturePyramid(*feats)


def init_unary(rng, C: int, dtype=np.float32) -> list:
    c = 8 * C
    return [init_residual_block(rng, c, c, 1, dtype) for _ in range(2)]


def stage1_unary(f16: Tensor, params: list) -> Tensor:
    x = f16
    for p in params:
        x = residual_block(x, p, stride=1)
    return x
