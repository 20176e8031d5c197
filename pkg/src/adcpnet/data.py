"""Synthetic stereo scenes, disparity file formats and preprocessing."""
from __future__ import annotations

import dataclasses
import re
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

NORM_MEAN = 0.5
NORM_STD = 0.5


class FormatError(ValueError):
    """Malformed or unsupported file content."""


@dataclass
class StereoSample:
    left: np.ndarray  # [3, H, W]
    right: np.ndarray
    gt_disp: np.ndarray  # [H, W]
    valid: np.ndarray  # [H, W] bool
    regions: dict = field(default_factory=dict)
    name: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        return self.gt_disp.shape


@dataclass
class SceneSpec:
    seed: int = 0
    height: int = 64
    width: int = 96
    n_layers: int = 3
    disp_range: tuple = (2, 32)
    n_bars: int = 0
    bar_width: int = 4
    texture_scale: int = 4
    slant: float = 0.0  # max |d disparity / d row| for rectangles


# ---------------------------------------------------------------------------
# synthetic scenes


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    pos = np.linspace(0, n_in - 1, n_out)
    i0 = np.minimum(np.floor(pos).astype(int), n_in - 2)
    w = pos - i0
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), i0] = 1 - w
    m[np.arange(n_out), i0 + 1] += w
    return m


def _texture(rng, H: int, W: int, scale: int) -> np.ndarray:
    """Multi-octave smooth colour noise plus fine grain, in [0, 1]; [H, W, 3].

    Octaves run from ``scale`` up to the image size so that both the coarse
    and the fine matching stages see structure.
    """
    octaves = []
    s = max(scale, 1)
    while s < 2 * max(H, W):
        gh, gw = H // s + 2, W // s + 2
        coarse = rng.uniform(-1.0, 1.0, size=(gh, gw, 3))
        ry, rx = _interp_matrix(gh, H), _interp_matrix(gw, W)
        octaves.append(np.einsum("yi,ijc,xj->yxc", ry, coarse, rx, optimize=True))
        s *= 2
    smooth = 0.35 * sum(octaves) / np.sqrt(len(octaves))
    base = 0.5
    grain = rng.uniform(-0.06, 0.06, size=(H, W, 3))
    return np.clip(base + smooth + grain, 0.0, 1.0)


def _row_disparity(rng, H: int, base: float, slant: float, lo: int, hi: int) -> np.ndarray:
    slope = rng.uniform(-slant, slant) if slant > 0 else 0.0
    d = np.round(base + slope * (np.arange(H) - H / 2))
    return np.clip(d, lo, hi).astype(np.int64)


def gen_synthetic(spec: SceneSpec) -> StereoSample:
    """Render a layered scene with exact integer ground truth.

    Layers are a full-frame background, textured rectangles and thin vertical
    bars, each at a per-row integer disparity. Both views are rendered from
    the same layer textures with nearer (larger-disparity) layers on top, so
    every non-occluded pixel satisfies ``left[y, x] == right[y, x - gt]``.
    """
    H, W = spec.height, spec.width
    lo, hi = spec.disp_range
    if H < 32 or W < 32:
        raise ValueError(f"image must be at least 32x32, got {(H, W)}")
    if not 0 <= lo <= hi:
        raise ValueError(f"bad disparity range {spec.disp_range}")
    if hi > W / 2:
        raise ValueError(f"max disparity {hi} exceeds half the width {W / 2}")
    rng = np.random.default_rng(spec.seed)
    We = W + hi + 1  # left-view coordinates reachable from the right view

    layers = []  # (mask [H, We], disp [H], tex [H, We, 3], kind)
    bg_hi = lo + max((hi - lo) // 4, 0)
    layers.append((np.ones((H, We), bool), _row_disparity(rng, H, rng.uniform(lo, bg_hi), spec.slant, lo, hi),
                   _texture(rng, H, We, spec.texture_scale), "background"))
    for _ in range(spec.n_layers):
        h = int(rng.integers(H // 4, H * 3 // 4))
        w = int(rng.integers(W // 6, W // 2))
        y0 = int(rng.integers(0, H - h + 1))
        x0 = int(rng.integers(0, We - w + 1))
        mask = np.zeros((H, We), bool)
        mask[y0:y0 + h, x0:x0 + w] = True
        d = _row_disparity(rng, H, rng.uniform(lo, hi), spec.slant, lo, hi)
        layers.append((mask, d, _texture(rng, H, We, spec.texture_scale), "rect"))
    for _ in range(spec.n_bars):
        bw = int(rng.integers(1, spec.bar_width + 1))
        y0 = int(rng.integers(0, H // 4))
        y1 = int(rng.integers(H * 3 // 4, H + 1))
        x0 = int(rng.integers(0, We - bw + 1))
        mask = np.zeros((H, We), bool)
        mask[y0:y1, x0:x0 + bw] = True
        d = np.full(H, int(rng.integers((lo + hi) // 2, hi + 1)), dtype=np.int64)
        layers.append((mask, d, _texture(rng, H, We, max(spec.texture_scale // 2, 1)), "bar"))

    n = len(layers)
    # depth-order key: disparity first, layer index breaks ties
    key = lambda i, d: d * (n + 1) + i  # noqa: E731

    xs = np.arange(W)
    best_l = np.full((H, W), -1)
    best_k = np.full((H, W), -1)
    best_r = np.full((H, W), -1)
    best_rk = np.full((H, W), -1)
    for i, (mask, d, _, _) in enumerate(layers):
        k = key(i, d)[:, None]
        cover_l = mask[:, :W]
        upd = cover_l & (k > best_k)
        best_l[upd] = i
        best_k = np.where(upd, k, best_k)
        src = xs[None, :] + d[:, None]  # right pixel xr sees left coord xr + d
        cover_r = np.take_along_axis(mask, src, axis=1)
        upd = cover_r & (k > best_rk)
        best_r[upd] = i
        best_rk = np.where(upd, k, best_rk)

    left = np.zeros((H, W, 3))
    right = np.zeros((H, W, 3))
    gt = np.zeros((H, W))
    rows = np.arange(H)[:, None]
    for i, (_, d, tex, _) in enumerate(layers):
        sel = best_l == i
        left[sel] = tex[:, :W][sel]
        gt[sel] = np.broadcast_to(d[:, None], (H, W))[sel]
        sel_r = best_r == i
        src = xs[None, :] + d[:, None]
        right[sel_r] = tex[rows, src][sel_r]

    xr = xs[None, :] - gt.astype(np.int64)
    inframe = xr >= 0
    owner = np.take_along_axis(best_r, np.clip(xr, 0, W - 1), axis=1)
    valid = inframe & (owner == best_l)
    bar_ids = [i for i, L in enumerate(layers) if L[3] == "bar"]
    regions = {"bar": np.isin(best_l, bar_ids), "occluded": ~valid}
    return StereoSample(
        left.transpose(2, 0, 1).astype(np.float32),
        right.transpose(2, 0, 1).astype(np.float32),
        gt.astype(np.float32),
        valid,
        regions,
        name=f"synthetic_{spec.seed}",
    )


def synthetic_set(base: SceneSpec, count: int, seed0: int = 0) -> list[StereoSample]:
    return list(SyntheticStream(base, count, seed0))


class SyntheticStream(Sequence):
    """Lazily generated scenes ``base`` with seeds ``seed0 .. seed0 + count - 1``.

    Behaves like a read-only list, so a trainer can draw from thousands of
    distinct scenes without holding them in memory.
    """

    def __init__(self, base: SceneSpec, count: int, seed0: int = 0):
        if count < 0:
            raise ValueError(f"count must be >= 0, got {count}")
        self.base, self.count, self.seed0 = base, count, seed0

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(self.count))]
        if not -self.count <= i < self.count:
            raise IndexError(i)
        i %= self.count
        return gen_synthetic(dataclasses.replace(self.base, seed=self.seed0 + i))


# ---------------------------------------------------------------------------
# file formats


def load_pfm(path) -> np.ndarray:
    """Read a single-channel PFM into a top-down ``[H, W]`` float32 array."""
    with open(path, "rb") as fh:
        header = fh.readline().rstrip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise FormatError(f"{path}: not a PFM file (header {header!r})")
        dims = fh.readline().decode("ascii", "replace")
        m = re.fullmatch(r"\s*(\d+)\s+(\d+)\s*", dims)
        if not m:
            raise FormatError(f"{path}: malformed dimension line {dims!r}")
        width, height = int(m.group(1)), int(m.group(2))
        try:
            scale = float(fh.readline())
        except ValueError:
            raise FormatError(f"{path}: malformed scale line") from None
        if scale == 0:
            raise FormatError(f"{path}: scale must be nonzero")
        dtype = "<f4" if scale < 0 else ">f4"
        count = width * height * channels
        payload = fh.read()
    if len(payload) < 4 * count:
        raise FormatError(f"{path}: truncated payload ({len(payload)} of {4 * count} bytes)")
    data = np.frombuffer(payload[: 4 * count], dtype=dtype).reshape(height, width, channels)
    data = np.flipud(data).astype(np.float32)
    return data[:, :, 0] if channels == 1 else data


def save_pfm(path, disp: np.ndarray) -> None:
    """Write ``[H, W]`` as little-endian single-channel PFM (bottom-up rows)."""
    disp = np.asarray(disp, dtype="<f4")
    if disp.ndim != 2:
        raise ValueError(f"expected a 2D map, got shape {disp.shape}")
    H, W = disp.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{W} {H}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.flipud(disp).tobytes())


def load_disp_png16(path) -> tuple[np.ndarray, np.ndarray]:
    """16-bit PNG disparity: value / 256, raw 0 marks an invalid pixel."""
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I"):
            raise FormatError(f"{path}: expected 16-bit grayscale, got mode {im.mode}")
        raw = np.array(im, dtype=np.int64)
    if raw.ndim != 2 or raw.min() < 0 or raw.max() > 65535:
        raise FormatError(f"{path}: values outside 16-bit range")
    return (raw / 256.0).astype(np.float32), raw > 0


def save_disp_png16(path, disp: np.ndarray, valid: Optional[np.ndarray] = None) -> None:
    raw = np.clip(np.round(np.asarray(disp, np.float64) * 256.0), 0, 65535).astype(np.uint16)
    if valid is not None:
        raw[~np.asarray(valid, bool)] = 0
    Image.fromarray(raw).save(path)


def export_gray(disp: np.ndarray, path, scale: float = 1.0) -> np.ndarray:
    """Write an 8-bit PGM with ``clamp(round(d * scale), 0, 255)``."""
    img = np.clip(np.round(np.asarray(disp, np.float64) * scale), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path, format="PPM")
    return img


def read_gray(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("L"))


def load_image(path) -> np.ndarray:
    """RGB image as ``[3, H, W]`` float32 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def save_image(path, img: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(img).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_disparity(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        d = load_pfm(path)
        return d, np.isfinite(d)
    return load_disp_png16(path)


def load_directory(root) -> list[StereoSample]:
    """Read ``root/{left,right,disp}`` with matching file stems."""
    root = Path(root)
    dirs = [root / n for n in ("left", "right", "disp")]
    for d in dirs:
        if not d.is_dir():
            raise FileNotFoundError(f"missing dataset directory {d}")
    stems = lambda d: {p.stem: p for p in d.iterdir() if p.is_file()}  # noqa: E731
    lefts, rights, disps = (stems(d) for d in dirs)
    names = sorted(set(lefts) & set(rights) & set(disps))
    if not names:
        raise FileNotFoundError(f"no matching left/right/disp stems under {root}")
    samples = []
    for n in names:
        gt, valid = load_disparity(disps[n])
        samples.append(StereoSample(load_image(lefts[n]), load_image(rights[n]), gt, valid & np.isfinite(gt), name=n))
    return samples


def save_directory(root, samples: list[StereoSample]) -> None:
    root = Path(root)
    for sub in ("left", "right", "disp"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        stem = s.name or f"{i:04d}"
        save_image(root / "left" / f"{stem}.png", s.left)
        save_image(root / "right" / f"{stem}.png", s.right)
        save_disp_png16(root / "disp" / f"{stem}.png", s.gt_disp, s.valid)


# ---------------------------------------------------------------------------
# preprocessing


def normalize(img: np.ndarray) -> np.ndarray:
    return ((img - NORM_MEAN) / NORM_STD).astype(np.float32)


def preprocess(sample: StereoSample, crop_h: int, crop_w: int, rng: np.random.Generator) -> StereoSample:
    """Random crop (same window for all maps) followed by colour normalisation."""
    H, W = sample.shape
    if crop_h > H or crop_w > W:
        raise ValueError(f"crop {(crop_h, crop_w)} larger than image {(H, W)}")
    y0 = int(rng.integers(0, H - crop_h + 1))
    x0 = int(rng.integers(0, W - crop_w + 1))
    win = (slice(y0, y0 + crop_h), slice(x0, x0 + crop_w))
    return StereoSample(
        normalize(sample.left[(slice(None),) + win]),
        normalize(sample.right[(slice(None),) + win]),
        sample.gt_disp[win].copy(),
        sample.valid[win].copy(),
        {k: v[win].copy() for k, v in sample.regions.items()},
        name=sample.name,
    )


def pad_to_multiple(img: np.ndarray, m: int = 16) -> tuple[np.ndarray, tuple[int, int]]:
    """Zero-pad the last two axes at the bottom/right up to multiples of ``m``."""
    H, W = img.shape[-2:]
    ph, pw = (-H) % m, (-W) % m
    widths = [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(img, widths), (H, W)


def unpad(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    H, W = size
    return arr[..., :H, :W]
