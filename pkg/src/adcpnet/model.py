"""Two-stage coarse-to-fine network: configuration, parameters and forward pass."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .aggregation import dic_forward, init_conv3d_stack, init_dic, regularize_compact_3d, regularize_full
from .backbone import extract_features, init_backbone, init_unary, pyramid_channels, stage1_unary
from .conv import flop_scope
from .costvol import build_compact_volume, build_full_volume
from .dop import constant_offset_field, init_dop, make_candidates, predict_offsets
from .regression import soft_argmin_candidates, soft_argmin_full
from .tensor import Tensor

PRESETS = {
    "S": (2, 4, 8),
    "M": (4, 8, 16),
    "L": (8, 16, 32),
}

STAGE2_SCALE = 4


@dataclass
class ModelConfig:
    C: int = 4
    C_3d: int = 8
    C_dop: int = 16
    N: int = 7
    D_max: int = 192
    stage2_scale: int = STAGE2_SCALE
    scale_preset: Optional[str] = "M"
    # width of the folded 2D layers in the disparity-independent stack
    dic_width: Optional[int] = None
    offsets: str = "dop"  # "dop" | "constant"
    stage2_agg: str = "dic"  # "dic" | "conv3d"

    def __post_init__(self):
        for name in ("C", "C_3d", "C_dop", "N", "D_max"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive int, got {v!r}")
        if self.D_max % 16:
            raise ValueError(f"D_max must be a multiple of 16, got {self.D_max}")
        if self.stage2_scale != STAGE2_SCALE:
            raise ValueError("stage-2 scale is fixed at 4")
        if self.offsets not in ("dop", "constant"):
            raise ValueError(f"offsets must be 'dop' or 'constant', got {self.offsets!r}")
        if self.stage2_agg not in ("dic", "conv3d"):
            raise ValueError(f"stage2_agg must be 'dic' or 'conv3d', got {self.stage2_agg!r}")
        if self.dic_width is None:
            self.dic_width = 2 * self.C_3d

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        C, C3, Cd = PRESETS[name]
        return cls(C=C, C_3d=C3, C_dop=Cd, scale_preset=name, **overrides)

    @property
    def D_coarse(self) -> int:
        return self.D_max // 16

    @property
    def D_fine(self) -> int:
        return self.D_max // self.stage2_scale

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelParams:
    backbone: object
    unary: list
    stage1: object
    dop: object
    stage2: object


@dataclass
class Model:
    config: ModelConfig
    params: ModelParams

    def parameters(self) -> list[Tensor]:
        return [t for _, t in named_parameters(self.params)]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(named_parameters(self.params))


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses, lists and tuples yielding ``(dotted_name, tensor)``."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            yield from named_parameters(v, f"{prefix}.{i}")


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Random parameters. Each submodule draws from its own ``(seed, module)``
    stream, so variants that differ in one module share all the others."""

    def rng(k: int) -> np.random.Generator:
        return np.random.default_rng([seed, k])

    C = config.C
    f4_ch = pyramid_channels(C)[1]
    f16_ch = pyramid_channels(C)[3]
    backbone = init_backbone(rng(0), C, dtype)
    unary = init_unary(rng(1), C, dtype)
    stage1 = init_conv3d_stack(rng(2), 2 * f16_ch, config.C_3d, dtype)
    dop = init_dop(rng(3), config.C_dop, config.N, dtype) if config.offsets == "dop" else None
    if config.stage2_agg == "dic":
        stage2 = init_dic(rng(4), 2 * f4_ch, config.N, config.dic_width, dtype)
    else:
        stage2 = init_conv3d_stack(rng(4), 2 * f4_ch, config.C_3d, dtype)
    return Model(config, ModelParams(backbone, unary, stage1, dop, stage2))


def zero_model(config: ModelConfig, dtype=np.float64) -> Model:
    m = init_model(config, 0, dtype)
    for t in m.parameters():
        t.data[...] = 0
    return m


@dataclass
class ForwardOutput:
    d11: Tensor
    d12: Tensor
    d21: Tensor
    d22: Tensor
    offsets: Tensor
    candidates: Tensor
    full_res: Tensor
    extras: dict = field(default_factory=dict)

    @property
    def heads(self) -> tuple:
        return (self.d11, self.d12, self.d21, self.d22)


def forward(model: Model, left: Tensor, right: Tensor) -> ForwardOutput:
    """Full two-stage inference on ``[(B,) 3, H, W]`` images padded to multiples of 16."""
    cfg, p = model.config, model.params
    H, W = left.shape[-2:]
    if H % 16 or W % 16:
        raise ValueError(f"inputs must be padded to multiples of 16, got {(H, W)}")
    if left.shape != right.shape:
        raise T.ShapeError("forward", left.shape, right.shape)
    unbatched = left.ndim == 3
    if unbatched:
        left = T.reshape(left, (1,) + left.shape)
        right = T.reshape(right, (1,) + right.shape)
    B = left.shape[0]
    H4, W4 = H // 4, W // 4

    with flop_scope("backbone"):
        pyr = extract_features(T.concat([left, right], axis=0), p.backbone)

    with flop_scope("stage1"):
        u = stage1_unary(pyr.f16, p.unary)
        vol1 = build_full_volume(u[:B], u[B:], cfg.D_coarse)
        c11, c12 = regularize_full(vol1, p.stage1)
        d11 = soft_argmin_full(c11)
        d12 = soft_argmin_full(c12)

    with flop_scope("stage2"):
        coarse_up = T.upsample_disparity(d12, H4, W4)
        if p.dop is not None:
            offsets = predict_offsets(d12, left, p.dop, H4, W4, cfg.N, disp_norm=float(cfg.D_fine))
        else:
            offsets = constant_offset_field(cfg.N, (B, H4, W4), left.dtype)
        cands = make_candidates(coarse_up, offsets, cfg.D_fine)
        f4 = pyr.f4
        vol2 = build_compact_volume(f4[:B], f4[B:], cands)
        if cfg.stage2_agg == "dic":
            c21, c22 = dic_forward(vol2, p.stage2)
        else:
            c21, c22 = regularize_compact_3d(vol2, p.stage2)
        d21 = soft_argmin_candidates(c21, cands)
        d22 = soft_argmin_candidates(c22, cands)

    full = T.upsample_disparity(d22, H, W)
    out = ForwardOutput(d11, d12, d21, d22, offsets, cands, full, {"coarse_up": coarse_up})
    if unbatched:
        for f in ("d11", "d12", "d21", "d22", "offsets", "candidates", "full_res"):
            t = getattr(out, f)
            setattr(out, f, T.reshape(t, t.shape[1:]))
        out.extras["coarse_up"] = T.reshape(coarse_up, coarse_up.shape[1:])
    return out
