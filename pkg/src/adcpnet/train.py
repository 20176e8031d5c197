"""Adam training against the four-output loss, evaluation, and checkpoints."""
from __future__ import annotations

import json
import logging
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .data import StereoSample, normalize, pad_to_multiple, preprocess, unpad
from .model import Model, ModelConfig, forward, init_model
from .regression import LossWeights, all_metrics, total_loss
from .tensor import Tape, Tensor, backward, no_record

log = logging.getLogger(__name__)

MAGIC = b"ADCPCKPT"
FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainHyper:
    lr: float = 5e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch: int = 8
    iters: int = 2000
    lr_halving_period: Optional[int] = None
    crop: Optional[tuple] = None  # (h, w); None trains on full frames
    seed: int = 0
    val_every: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def lr_at(self, it: int) -> float:
        """Learning rate used for the update that finishes iteration ``it``."""
        if not self.lr_halving_period:
            return self.lr
        return self.lr * 0.5 ** (it // self.lr_halving_period)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr=5e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            step = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= step.astype(p.data.dtype)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict  # name -> ndarray
    moments: dict = field(default_factory=dict)  # "m/<name>", "v/<name>" -> ndarray
    iteration: int = 0
    rng_state: dict = field(default_factory=dict)

    def to_model(self) -> Model:
        model = init_model(self.config, 0)
        for name, t in model.named_parameters():
            if name not in self.params:
                raise CheckpointError(f"checkpoint lacks parameter {name}")
            arr = self.params[name]
            if arr.shape != t.shape:
                raise CheckpointError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(t.dtype).copy()
            t.grad = np.zeros_like(t.data)
        return model

    @classmethod
    def from_model(cls, model: Model, **kw) -> "Checkpoint":
        return cls(model.config, {n: t.data.copy() for n, t in model.named_parameters()}, **kw)


# ---------------------------------------------------------------------------
# binary container


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode()
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Versioned little-endian container with a trailing CRC32."""
    cfg = json.dumps(ckpt.config.to_dict(), sort_keys=True).encode()
    rng = json.dumps(ckpt.rng_state, sort_keys=True).encode()
    body = bytearray(MAGIC)
    body += struct.pack("<I", FORMAT_VERSION)
    body += struct.pack("<I", len(cfg)) + cfg
    body += struct.pack("<Q", ckpt.iteration)
    body += struct.pack("<I", len(rng)) + rng
    entries = [("param/" + k, v) for k, v in ckpt.params.items()]
    entries += [("moment/" + k, v) for k, v in ckpt.moments.items()]
    body += struct.pack("<I", len(entries))
    for name, arr in entries:
        body += _pack_tensor(name, arr)
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(bytes(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < len(MAGIC) + 8 or not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    r = _Reader(buf[:-4])
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (n,) = r.unpack("<I")
    config = ModelConfig.from_dict(json.loads(r.take(n)))
    (iteration,) = r.unpack("<Q")
    (n,) = r.unpack("<I")
    rng_state = json.loads(r.take(n))
    (count,) = r.unpack("<I")
    params, moments = {}, {}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        (nd,) = r.unpack("<B")
        shape = r.unpack(f"<{nd}I") if nd else ()
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        kind, _, key = name.partition("/")
        (params if kind == "param" else moments)[key] = arr
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: trailing bytes")
    return Checkpoint(config, params, moments, iteration, rng_state)


# ---------------------------------------------------------------------------
# training


def _batch(samples: Sequence[StereoSample]):
    left = np.stack([s.left for s in samples])
    right = np.stack([s.right for s in samples])
    gt = np.stack([s.gt_disp for s in samples])
    valid = np.stack([s.valid for s in samples])
    return left, right, gt, valid


def train(
    config: ModelConfig,
    train_set: Sequence[StereoSample],
    val_set: Sequence[StereoSample] = (),
    hyper: TrainHyper | None = None,
    resume: Optional[Checkpoint] = None,
    on_log: Optional[Callable[[dict], None]] = None,
    dtype=np.float32,
) -> Checkpoint:
    """Adam on the four-output smooth-L1 loss; deterministic given ``hyper.seed``.

    Each iteration draws ``hyper.batch`` samples (without replacement within
    an epoch), crops and normalises them, and takes one Adam step. Records
    ``{"iter", "loss", "lr"}`` (plus ``val_*`` every ``val_every`` steps) are
    passed to ``on_log``.
    """
    hyper = hyper or TrainHyper()
    if not train_set:
        raise ValueError("training set is empty")
    if resume is not None:
        model = resume.to_model()
        config = model.config
    else:
        model = init_model(config, hyper.seed, dtype)
    names = [n for n, _ in model.named_parameters()]
    opt = Adam(model.parameters(), hyper.lr, hyper.betas, hyper.eps)
    rng = np.random.default_rng(hyper.seed)
    start = 0
    if resume is not None:
        start = resume.iteration
        opt.t = start
        for i, n in enumerate(names):
            if f"m/{n}" in resume.moments:
                opt.m[i] = resume.moments[f"m/{n}"].astype(dtype).copy()
                opt.v[i] = resume.moments[f"v/{n}"].astype(dtype).copy()
    order: list[int] = []
    if resume is not None and resume.rng_state:
        rng.bit_generator.state = resume.rng_state["rng"]
        order = list(resume.rng_state.get("order", []))
    bs = min(hyper.batch, len(train_set))
    for it in range(start, hyper.iters):
        if len(order) < bs:
            order.extend(rng.permutation(len(train_set)).tolist())
        idx, order = order[:bs], order[bs:]
        raw = [train_set[i] for i in idx]
        crop = hyper.crop or raw[0].shape
        batch = [preprocess(s, crop[0], crop[1], rng) for s in raw]
        left, right, gt, valid = _batch(batch)
        opt.zero_grad()
        with Tape() as tape:
            out = forward(model, Tensor(left.astype(dtype)), Tensor(right.astype(dtype)))
            loss = total_loss(out.heads, gt, valid, hyper.loss_weights)
        lv = float(loss.data)
        if not np.isfinite(lv):
            raise TrainingDiverged(f"non-finite loss {lv} at iteration {it + 1}")
        backward(tape, loss)
        opt.lr = hyper.lr_at(it)
        opt.step()
        rec = {"iter": it + 1, "loss": lv, "lr": opt.lr}
        if hyper.val_every and val_set and (it + 1) % hyper.val_every == 0:
            m = evaluate(model, val_set)
            rec.update({f"val_{k}": v for k, v in m.items() if k.startswith("full.")})
        if on_log is not None:
            on_log(rec)
    moments = {}
    for n, m, v in zip(names, opt.m, opt.v):
        moments[f"m/{n}"] = m
        moments[f"v/{n}"] = v
    return Checkpoint(
        model.config,
        {n: t.data.copy() for n, t in model.named_parameters()},
        moments,
        max(start, hyper.iters),
        {"rng": rng.bit_generator.state, "order": order},
    )


def format_log(rec: dict) -> str:
    parts = []
    for k, v in rec.items():
        parts.append(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")
    return " ".join(parts)


def parse_log_line(line: str) -> dict:
    out = {}
    for tok in line.split():
        k, _, v = tok.partition("=")
        out[k] = int(v) if k == "iter" else float(v)
    return out


# ---------------------------------------------------------------------------
# inference / evaluation

Predictor = Callable[[np.ndarray, np.ndarray], np.ndarray]


def predict(model: Model, left: np.ndarray, right: np.ndarray, heads: bool = False):
    """Full-resolution disparity for raw ``[3, H, W]`` images in [0, 1]."""
    H, W = left.shape[-2:]
    lp, _ = pad_to_multiple(normalize(left))
    rp, _ = pad_to_multiple(normalize(right))
    dtype = model.parameters()[0].dtype
    with no_record():
        out = forward(model, Tensor(lp.astype(dtype)), Tensor(rp.astype(dtype)))
    full = unpad(out.full_res.data, (H, W))
    if not heads:
        return full
    Hp, Wp = lp.shape[-2:]
    maps = {}
    for name, d in zip(("d11", "d12", "d21", "d22"), out.heads):
        up = T.upsample_disparity(d, Hp, Wp).data if d.shape[-2:] != (Hp, Wp) else d.data
        maps[name] = unpad(up, (H, W))
    maps["full"] = full
    return maps


def evaluate(model: Union[Model, Predictor], dataset: Sequence[StereoSample]) -> dict:
    """Mean EPE/D1/2px/3px/A95 per head over ``dataset`` plus seconds per image.

    ``model`` may also be any callable ``(left, right) -> disparity``, which is
    scored as the ``full`` head only.
    """
    if not dataset:
        raise ValueError("evaluation dataset is empty")
    sums: dict[str, float] = {}
    elapsed = 0.0
    for s in dataset:
        t0 = time.perf_counter()
        if isinstance(model, Model):
            maps = predict(model, s.left, s.right, heads=True)
        else:
            maps = {"full": np.asarray(model(s.left, s.right))}
        elapsed += time.perf_counter() - t0
        for head, pred in maps.items():
            for k, v in all_metrics(pred, s.gt_disp, s.valid).items():
                key = f"{head}.{k}"
                sums[key] = sums.get(key, 0.0) + v
    n = len(dataset)
    rec = {k: v / n for k, v in sums.items()}
    rec["seconds_per_image"] = elapsed / n
    return rec
