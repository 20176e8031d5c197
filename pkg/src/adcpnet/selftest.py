"""Fast built-in verification: gradients, convolution and DIC oracles, metric oracles.

``run_selftest(fault=...)`` corrupts one op's backward rule for the duration of
the run, which must make the gradient section fail.
"""
from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

from . import reference
from . import tensor as T
from .aggregation import dic_forward, dic_oracle, init_dic
from .conv import conv2d, conv3d
from .costvol import build_compact_volume, build_full_volume
from .gradcheck import finite_diff_check
from .model import named_parameters
from .regression import all_metrics, soft_argmin_candidates, soft_argmin_full
from .tensor import Tensor

GRAD_TOL = 1e-4
ORACLE_TOL = 1e-6
METRIC_TOL = 1e-9


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _probe(t: Tensor, r: np.ndarray) -> Tensor:
    return T.tsum(T.mul(t, r))


def grad_cases(rng) -> Iterator[tuple[str, Callable, Tensor]]:
    u = lambda *s: rng.uniform(-1, 1, s)  # noqa: E731
    a = Tensor(u(3, 4))
    b = u(3, 4)

    def case(name, fn, x):
        r = u(*fn(x).shape) if fn(x).ndim else 1.0
        return name, (lambda t: _probe(fn(t), r)), x

    yield case("add", lambda t: T.add(t, b), a)
    yield case("mul", lambda t: T.mul(t, T.exp(t)), a)
    yield case("leaky_relu", T.leaky_relu, a)
    yield case("relu", T.relu, Tensor(u(3, 4) + np.sign(u(3, 4)) * 0.05))
    yield case("abs", T.tabs, Tensor(u(3, 4) + 0.05))
    yield case("softmax", lambda t: T.softmax(t, axis=0), a)
    yield case("smooth_l1", lambda t: T.smooth_l1(T.scale(t, 3.0)), a)
    yield case("concat", lambda t: T.concat([t, T.scale(t, 2.0)], axis=1), a)
    yield case("resize", lambda t: T.bilinear_resize(T.reshape(t, (1, 3, 4)), 5, 7), a)
    img = Tensor(u(2, 3, 4))
    yield case("warp", lambda t: T.warp_right(img, T.add(T.scale(t, 0.3), 1.5)), a)
    w2 = Tensor(u(2, 3, 3, 3))
    yield case("conv2d", lambda t: conv2d(t, w2, None, 1, 1), Tensor(u(3, 5, 4)))
    yield case("conv2d_s2", lambda t: conv2d(t, w2, None, 2, 1), Tensor(u(3, 6, 4)))
    w3 = Tensor(u(2, 2, 3, 3, 3))
    yield case("conv3d", lambda t: conv3d(t, w3, None, 1, 1), Tensor(u(2, 3, 3, 4)))
    yield case("full_volume", lambda t: build_full_volume(t, T.scale(t, -1.0), 3), Tensor(u(2, 3, 4)))
    cands = Tensor(rng.integers(0, 3, (2, 3, 5)) + rng.uniform(0.2, 0.8, (2, 3, 5)))
    fl, fr = Tensor(u(2, 3, 5)), Tensor(u(2, 3, 5))
    yield case("compact_volume", lambda t: build_compact_volume(fl, fr, t), cands)
    yield case("soft_argmin", soft_argmin_full, Tensor(u(4, 2, 3)))
    values = Tensor(u(4, 2, 3) * 5)
    yield case("soft_argmin_cands", lambda t: soft_argmin_candidates(t, values), Tensor(u(4, 2, 3)))


def check_gradients(rng) -> tuple[bool, str]:
    worst, worst_name, bad = 0.0, "", []
    for name, f, x in grad_cases(rng):
        err = finite_diff_check(f, x)
        if err > worst:
            worst, worst_name = err, name
        if not err < GRAD_TOL:
            bad.append(f"{name}={err:.2e}")
    if bad:
        return False, "failed: " + ", ".join(bad)
    return True, f"worst {worst_name} {worst:.2e}"


def check_conv_oracles(rng, count: int = 20) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(count):
        for nsp, fn, loops in ((2, conv2d, reference.conv2d_loops), (3, conv3d, reference.conv3d_loops)):
            f_in, f_out = rng.integers(1, 4, size=2)
            k, stride = int(rng.choice([1, 3])), int(rng.choice([1, 2]))
            pad = (k - 1) // 2
            sp = [int(rng.integers(k, 6 if nsp == 3 else 8)) for _ in range(nsp)]
            if stride == 2:
                sp = [n + ((n + 2 * pad - k) % 2 > pad + max(2 - k, 0)) for n in sp]
            x = rng.uniform(-1, 1, (f_in, *sp))
            w = rng.uniform(-1, 1, (f_out, f_in) + (k,) * nsp)
            b = rng.uniform(-1, 1, f_out)
            ours = fn(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
            worst = max(worst, float(np.abs(ours - loops(x, w, b, stride, pad)).max()))
    return worst <= ORACLE_TOL, f"{count} shapes per rank, max diff {worst:.1e}"


def check_dic_equivalence(rng, count: int = 20) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(count):
        F2, N, width = 2 * int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
        H, W = (int(v) for v in rng.integers(2, 5, size=2))
        p = init_dic(rng, F2, N, width, np.float64)
        for _, t in named_parameters(p):
            t.data[...] = rng.uniform(-0.5, 0.5, t.shape)
        vol = rng.uniform(-1, 1, (F2, N, H, W))
        for a, b in zip(dic_forward(Tensor(vol), p), dic_oracle(vol, p)):
            worst = max(worst, float(np.abs(a.data - b).max()))
    return worst <= ORACLE_TOL, f"{count} instances, max diff {worst:.1e}"


def check_metrics(rng, count: int = 100) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(count):
        H, W = (int(v) for v in rng.integers(2, 10, size=2))
        gt = rng.uniform(0, 120, (H, W))
        pred = gt + rng.normal(0, 4, (H, W))
        mask = rng.uniform(size=(H, W)) < 0.7
        mask.flat[0] = True
        ours, ref = all_metrics(pred, gt, mask), reference.metrics_loops(pred, gt, mask)
        worst = max(worst, max(abs(ours[k] - ref[k]) for k in ref))
    return worst <= METRIC_TOL, f"{count} maps, max diff {worst:.1e}"


def check_regression(rng) -> tuple[bool, str]:
    ok = True
    for D in range(1, 13):
        ok &= bool(np.all(soft_argmin_full(Tensor(np.full((D, 2, 2), rng.normal()))).data == (D - 1) / 2))
    for _ in range(200):
        N = int(rng.integers(1, 8))
        c, k = rng.normal(0, 10, (N, 2, 2)), rng.uniform(0, 47, (N, 2, 2))
        d = soft_argmin_candidates(Tensor(c), Tensor(k)).data
        ok &= bool(np.all(d >= k.min(0) - 1e-9) and np.all(d <= k.max(0) + 1e-9))
        ok &= bool(np.abs(soft_argmin_candidates(Tensor(c + 3.0), Tensor(k)).data - d).max() <= 1e-9)
    return ok, "uniform costs, hull containment, shift invariance"


CHECKS = {
    "gradients": check_gradients,
    "conv_oracles": check_conv_oracles,
    "dic_equivalence": check_dic_equivalence,
    "metric_oracles": check_metrics,
    "regression": check_regression,
}


@contextlib.contextmanager
def inject_fault(op: str, factor: float = 1.5):
    """Scale every gradient produced by ``tensor.<op>``'s backward rule."""
    original = getattr(T, op)

    def mutated(*args, **kw):
        out = original(*args, **kw)
        if out._backward is not None:
            good = out._backward
            out._backward = lambda g: tuple(None if x is None else x * factor for x in good(g))
        return out

    setattr(T, op, mutated)
    try:
        yield
    finally:
        setattr(T, op, original)


def run_selftest(seed: int = 0, fault: Optional[str] = None, report: Callable[[str], None] = print) -> bool:
    ctx = inject_fault(fault) if fault else contextlib.nullcontext()
    results = []
    with ctx:
        for name, fn in CHECKS.items():
            t0 = time.perf_counter()
            passed, detail = fn(np.random.default_rng(seed))
            results.append(CheckResult(name, passed, detail, time.perf_counter() - t0))
            report(f"{'PASS' if passed else 'FAIL'}  {name:<16} {detail}  ({results[-1].seconds:.1f}s)")
    n_bad = sum(not r.passed for r in results)
    report(f"{len(results) - n_bad}/{len(results)} checks passed")
    return n_bad == 0
