"""Dense tensors with a recording tape for reverse-mode differentiation.

Only the operators the stereo network needs are provided. Every op accepts
an optional leading batch axis; spatial and channel axes are addressed with
negative indices so the same code path serves ``[F, H, W]`` and
``[B, F, H, W]`` inputs.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence, Union

import numpy as np

Scalar = Union[int, float]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        desc = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class BackwardError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Ordered record of executed ops.

    Ops executed while a tape is active (``with Tape() as tape:``) and having
    at least one input that requires grad are appended in execution order,
    which is a valid topological order for the reverse sweep.
    """

    _active: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        Tape._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._active.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _current_tape() -> Optional[Tape]:
    return Tape._active[-1] if Tape._active else None


@contextlib.contextmanager
def no_record():
    """Suspend recording on every active tape."""
    saved = Tape._active[:]
    Tape._active.clear()
    try:
        yield
    finally:
        Tape._active[:] = saved


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result and record it if any parent requires grad."""
    out = Tensor(data)
    tape = _current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        tape.nodes.append(out)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaf grads accumulate across calls; intermediate grads are transient.
    A tape may be swept once; call ``tape.reset()`` before recording again.
    """
    if loss.data.size != 1:
        raise BackwardError(f"loss must be scalar, got shape {loss.shape}")
    if tape.consumed:
        raise BackwardError("tape already consumed; call reset() and re-run the forward pass")
    if loss._backward is None or not any(n is loss for n in tape.nodes):
        raise BackwardError("loss is detached from the tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                # leaf
                parent.grad = parent.grad + pg if parent.grad is not None else pg.copy()
            else:
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    for node in tape.nodes:
        node._backward = None
        node._parents = ()


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


# ---------------------------------------------------------------------------
# elementwise


def _binary_operand(a: Tensor, b, op: str):
    if isinstance(b, Tensor):
        if b.shape != a.shape:
            raise ShapeError(op, a.shape, b.shape)
        return b, b.data
    if np.isscalar(b):
        return None, b
    arr = np.asarray(b, dtype=a.dtype)
    if np.broadcast_shapes(arr.shape, a.shape) != a.shape:
        raise ShapeError(op, a.shape, arr.shape)
    return None, arr


def add(a: Tensor, b) -> Tensor:
    bt, bd = _binary_operand(a, b, "add")
    if bt is None:
        return _make(a.data + bd, (a,), lambda g: (g,))
    return _make(a.data + bd, (a, bt), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    bt, bd = _binary_operand(a, b, "sub")
    if bt is None:
        return _make(a.data - bd, (a,), lambda g: (g,))
    return _make(a.data - bd, (a, bt), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    bt, bd = _binary_operand(a, b, "mul")
    ad = a.data
    if bt is None:
        return _make(ad * bd, (a,), lambda g: (g * bd,))
    return _make(ad * bd, (a, bt), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: Scalar) -> Tensor:
    return _make(a.data * s, (a,), lambda g: (g * s,))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    pos = a.data > 0
    factor = np.where(pos, 1.0, slope).astype(a.dtype)
    return _make(a.data * factor, (a,), lambda g: (g * factor,))


def tabs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes only where the input is inside."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def clamp_recoverable(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; outside, pass only gradients whose descent step points back inside.

    Plain clipping has zero gradient once an input leaves the range, so a
    learned quantity pushed far out can never return.
    """
    below, above = a.data < lo, a.data > hi

    def bw(g):
        keep = ~(below | above) | (below & (g < 0)) | (above & (g > 0))
        return (g * keep,)
    return _make(np.clip(a.data, lo, hi), (a,), bw)


def smooth_l1(a: Tensor) -> Tensor:
    ad = a.data
    small = np.abs(ad) < 1
    out = np.where(small, 0.5 * ad * ad, np.abs(ad) - 0.5)
    dout = np.where(small, ad, np.sign(ad)).astype(a.dtype)
    return _make(out.astype(a.dtype), (a,), lambda g: (g * dout,))


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, relu, leaky_relu, neg, abs."""
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "scale":
        return scale(a, b)
    if kind == "relu":
        return relu(a)
    if kind == "leaky_relu":
        return leaky_relu(a, 0.1 if b is None else b)
    if kind == "neg":
        return neg(a)
    if kind == "abs":
        return tabs(a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis), 1.0 / n)


def softmax(x: Tensor, axis: int = 0) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), bw)


# ---------------------------------------------------------------------------
# data movement


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return _make(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    nd = len(ref)
    ax = axis % nd
    for t in tensors[1:]:
        if len(t.shape) != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ShapeError("concat", ref, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for i in range(len(tensors)):
            idx = [slice(None)] * nd
            idx[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(idx)])
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    nd = tensors[0].ndim + 1
    ax = axis % nd
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors]
    return concat(expanded, axis=ax)


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing; gradient scatters back into a zero buffer."""
    out = a.data[index]
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _make(np.array(out, copy=True), (a,), bw)


def pad(a: Tensor, widths) -> Tensor:
    """Zero padding; ``widths`` as for ``np.pad``."""
    widths = [tuple(w) for w in widths]
    core = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _make(np.pad(a.data, widths), (a,), lambda g: (g[core],))


def crop(a: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left ``h x w`` window of the last two axes."""
    return getitem(a, (Ellipsis, slice(0, h), slice(0, w)))


# ---------------------------------------------------------------------------
# resampling


def _align_corners_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(np.floor(pos).astype(int), n_in - 2)
    w = pos - i0
    rows = np.arange(n_out)
    m[rows, i0] = 1.0 - w
    m[rows, i0 + 1] += w
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resize of the last two axes."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output extents must be >= 1, got {(out_h, out_w)}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return _make(x.data.copy(), (x,), lambda g: (g,))
    ry = _align_corners_matrix(h, out_h, x.dtype)
    rx = _align_corners_matrix(w, out_w, x.dtype)
    out = ry @ x.data @ rx.T

    def bw(g):
        return (ry.T @ g @ rx,)

    return _make(out, (x,), bw)


def upsample_disparity(disp: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize a disparity map and rescale its values by the width ratio."""
    ratio = out_w / disp.shape[-1]
    return scale(bilinear_resize(disp, out_h, out_w), ratio)


def warp_candidates(right: Tensor, disp: Tensor) -> Tensor:
    """Sample ``right`` at ``x - disp`` along the last axis, once per candidate.

    ``right`` is ``[..., F, H, W]`` and ``disp`` is ``[..., N, H, W]``; the
    result is ``[..., F, N, H, W]``. Linear interpolation in x, zero outside
    the frame. Differentiable with respect to both inputs.
    """
    rd, dd = right.data, disp.data
    if rd.shape[:-3] != dd.shape[:-3] or rd.shape[-2:] != dd.shape[-2:]:
        raise ShapeError("warp", rd.shape, dd.shape)
    W = rd.shape[-1]
    xs = np.arange(W, dtype=rd.dtype) - dd  # [..., N, H, W]
    x0f = np.floor(xs)
    frac = (xs - x0f)[..., None, :, :, :]  # [..., 1, N, H, W]
    x0 = x0f.astype(np.int64)
    x1 = x0 + 1
    v0 = ((x0 >= 0) & (x0 < W))[..., None, :, :, :]
    v1 = ((x1 >= 0) & (x1 < W))[..., None, :, :, :]
    i0 = np.clip(x0, 0, W - 1)[..., None, :, :, :]
    i1 = np.clip(x1, 0, W - 1)[..., None, :, :, :]

    rexp = rd[..., :, None, :, :]  # [..., F, 1, H, W]
    full = np.broadcast_shapes(rexp.shape, i0.shape)
    rb = np.broadcast_to(rexp, full)
    r0 = np.take_along_axis(rb, np.broadcast_to(i0, full), axis=-1) * v0
    r1 = np.take_along_axis(rb, np.broadcast_to(i1, full), axis=-1) * v1
    out = (1 - frac) * r0 + frac * r1

    def bw(g):
        # d out / d disp = -(r1 - r0)
        gd = -(g * (r1 - r0)).sum(axis=-4)
        # scatter into right along x
        lead = full[:-4]
        F, N, H, _ = full[-4:]
        base = np.arange(int(np.prod(lead, dtype=np.int64)) * F * H, dtype=np.int64)
        base = base.reshape(lead + (F, 1, H, 1)) * W
        w0 = g * (1 - frac) * v0
        w1 = g * frac * v1
        idx = np.concatenate([(base + i0).ravel(), (base + i1).ravel()])
        wts = np.concatenate([np.broadcast_to(w0, full).ravel(), np.broadcast_to(w1, full).ravel()])
        gr = np.bincount(idx, weights=wts, minlength=base.size * W).astype(rd.dtype)
        return gr.reshape(rd.shape), gd.astype(dd.dtype)

    return _make(out.astype(rd.dtype), (right, disp), bw)


def warp_right(right: Tensor, disp: Tensor) -> Tensor:
    """Single-disparity-map warp: ``right[..., F, H, W]``, ``disp[..., H, W]``."""
    d = reshape(disp, disp.shape[:-2] + (1,) + disp.shape[-2:])
    out = warp_candidates(right, d)
    return reshape(out, right.shape)


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Broadcast ``a`` to ``shape`` (numpy rules); gradient sums over copies."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None
    src = a.shape
    lead = len(shape) - len(src)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(src) if n == 1 and shape[lead + i] != 1
    )

    def bw(g):
        return (g.sum(axis=axes, keepdims=True).reshape(src),)

    return _make(np.ascontiguousarray(out), (a,), bw)
