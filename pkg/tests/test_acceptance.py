"""Acceptance suite: one group of tests per criterion, tagged ``criterion(n)``.

``conftest.py`` prints a pass/fail line per criterion at the end of the run.
Criteria 6 and 7 train real models and take several minutes each.
"""
import math
import time

import numpy as np
import pytest
from PIL import Image

from adcpnet import reference
from adcpnet.ablation import THIN_BAR_MODEL, THIN_BAR_SCENE, offset_range, run_ablation, thin_bar_data
from adcpnet.aggregation import dic_forward, init_dic
from adcpnet.backbone import init_residual_block, residual_block
from adcpnet.conv import count_flops
from adcpnet.data import (
    SceneSpec,
    load_disp_png16,
    load_pfm,
    save_pfm,
    synthetic_set,
)
from adcpnet.dop import constant_offsets, init_dop, predict_offsets
from adcpnet.gradcheck import finite_diff_check
from adcpnet.model import ModelConfig, forward, init_model
from adcpnet.regression import all_metrics, metric_d1, soft_argmin_candidates, soft_argmin_full, total_loss
from adcpnet.selftest import check_conv_oracles, check_dic_equivalence, grad_cases
from adcpnet.tensor import Tensor
from adcpnet.train import Checkpoint, TrainHyper, evaluate, load_checkpoint, save_checkpoint, train

crit = pytest.mark.criterion
OP_TOL, E2E_TOL = 1e-4, 1e-3
_grad_seconds: list = []


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    _grad_seconds.append(time.perf_counter() - t0)
    return out


# ---------------------------------------------------------------------------
# 1. gradients


@crit(1)
@pytest.mark.parametrize("case", range(17))
def test_c1_op_gradients(case):
    name, f, x = list(grad_cases(np.random.default_rng(7)))[case]
    err = _timed(lambda: finite_diff_check(f, x))
    assert err < OP_TOL, f"{name}: {err:.2e}"


def _probe(t, r):
    from adcpnet import tensor as T
    return T.tsum(T.mul(t, r))


def _submodules():
    rng = np.random.default_rng(11)
    u = lambda *s: rng.uniform(-1, 1, s)  # noqa: E731

    blk = init_residual_block(rng, 2, 3, 2, np.float64)
    x = Tensor(u(2, 6, 8))
    r = u(3, 3, 4)
    yield "residual_block.input", lambda t: _probe(residual_block(t, blk, 2), r), x
    yield "residual_block.w1", lambda t: _probe(residual_block(x, blk, 2), r), blk.w1

    dop = init_dop(rng, 3, 3, np.float64)
    coarse, img = Tensor(rng.uniform(1, 3, (2, 3))), Tensor(u(3, 8, 12))
    r = u(3, 8, 12)
    yield "dop.coarse", lambda t: _probe(predict_offsets(t, img, dop, 8, 12, 3, 4.0), r), coarse
    yield "dop.head", lambda t: _probe(predict_offsets(coarse, img, dop, 8, 12, 3, 4.0), r), dop.head_w

    dic = init_dic(rng, 4, 3, 3, np.float64)
    vol = Tensor(u(4, 3, 4, 5))
    r1, r2 = u(3, 4, 5), u(3, 4, 5)

    def dic_loss(t):
        from adcpnet import tensor as T
        a, b = dic_forward(t, dic)
        return T.add(_probe(a, r1), _probe(b, r2))
    yield "dic.input", dic_loss, vol
    yield "dic.layer0", lambda t: dic_loss(vol), dic.layers[0][0]

    r = u(4, 5)
    yield "soft_argmin", lambda t: _probe(soft_argmin_full(t), r), Tensor(u(6, 4, 5) * 3)
    cands = Tensor(rng.uniform(0, 20, (3, 4, 5)))
    yield "soft_argmin_candidates", lambda t: _probe(soft_argmin_candidates(t, cands), r), Tensor(u(3, 4, 5))

    gt = rng.uniform(0, 30, (8, 12))
    mask = rng.uniform(size=gt.shape) > 0.3
    outs = [Tensor(rng.uniform(0, 8, (2, 3))), Tensor(rng.uniform(0, 8, (2, 3))),
            Tensor(rng.uniform(0, 30, (2, 3)))]
    yield "loss", lambda t: total_loss(outs + [t], gt, mask), Tensor(gt[::4, ::4] + rng.normal(0, 2, (2, 3)))


_SUBMODULES = [name for name, _, _ in _submodules()]


@crit(1)
@pytest.mark.parametrize("name", _SUBMODULES)
def test_c1_submodule_gradients(name):
    _, f, x = next(c for c in _submodules() if c[0] == name)
    err = _timed(lambda: finite_diff_check(f, x, eps=1e-6))
    assert err < OP_TOL, f"{name}: {err:.2e}"


@crit(1)
def test_c1_end_to_end_spot_checks():
    rng = np.random.default_rng(3)
    m = init_model(ModelConfig(C=1, C_3d=2, C_dop=2, N=3, D_max=32, scale_preset=None), 5, np.float64)
    left, right = Tensor(rng.uniform(-1, 1, (3, 32, 48))), Tensor(rng.uniform(-1, 1, (3, 32, 48)))
    gt = rng.uniform(0, 20, (32, 48))
    mask = rng.uniform(size=gt.shape) > 0.2

    def f(_):
        return total_loss(forward(m, left, right).heads, gt, mask)

    def run():
        worst = 0.0
        for _, t in m.named_parameters():
            coords = [tuple(int(rng.integers(s)) for s in t.shape) for _ in range(2)]
            worst = max(worst, finite_diff_check(f, t, eps=1e-6, coords=coords))
        return worst

    assert _timed(run) < E2E_TOL


@crit(1)
def test_c1_total_time_under_a_minute():
    assert len(_grad_seconds) == 17 + len(_SUBMODULES) + 1
    assert sum(_grad_seconds) < 60


# ---------------------------------------------------------------------------
# 2. oracle equivalence


@crit(2)
def test_c2_conv_oracles():
    ok, detail = check_conv_oracles(np.random.default_rng(21), count=20)
    assert ok, detail


@crit(2)
def test_c2_dic_equivalence():
    ok, detail = check_dic_equivalence(np.random.default_rng(22), count=20)
    assert ok, detail


# ---------------------------------------------------------------------------
# 3. regression identities


@crit(3)
@pytest.mark.parametrize("D", range(1, 17))
def test_c3_uniform_costs_exact(D):
    for c in (0.0, -3.7, 12.25):
        out = soft_argmin_full(Tensor(np.full((D, 3, 2), c))).data
        assert np.all(out == (D - 1) / 2)


@crit(3)
def test_c3_candidate_hull_1000():
    rng = np.random.default_rng(31)
    for _ in range(1000):
        N = int(rng.integers(1, 10))
        costs = rng.normal(0, 20, (N, 2, 3))
        cands = rng.uniform(0, 63, (N, 2, 3))
        d = soft_argmin_candidates(Tensor(costs), Tensor(cands)).data
        assert np.all(d >= cands.min(0) - 1e-9) and np.all(d <= cands.max(0) + 1e-9)


@crit(3)
def test_c3_shift_invariance():
    rng = np.random.default_rng(32)
    for _ in range(200):
        D = int(rng.integers(1, 12))
        c, s = rng.normal(0, 5, (D, 3, 3)), float(rng.uniform(-50, 50))
        assert np.abs(soft_argmin_full(Tensor(c + s)).data - soft_argmin_full(Tensor(c)).data).max() <= 1e-9


# ---------------------------------------------------------------------------
# 4. constant offsets


@crit(4)
def test_c4_five_offsets():
    assert constant_offsets(5) == [-2, -1, 0, 1, 2]


@crit(4)
@pytest.mark.parametrize("N", range(1, 10))
def test_c4_formula(N):
    assert constant_offsets(N) == [n - math.ceil(N / 2) for n in range(1, N + 1)]


# ---------------------------------------------------------------------------
# 5. metric oracles


@crit(5)
def test_c5_metric_oracles_100_maps():
    rng = np.random.default_rng(51)
    for _ in range(100):
        H, W = (int(v) for v in rng.integers(1, 12, size=2))
        gt = rng.uniform(0, 150, (H, W))
        pred = gt + rng.normal(0, 5, (H, W))
        mask = rng.uniform(size=(H, W)) < 0.6
        mask.flat[int(rng.integers(mask.size))] = True
        ours, ref = all_metrics(pred, gt, mask), reference.metrics_loops(pred, gt, mask)
        for k in ref:
            assert abs(ours[k] - ref[k]) <= 1e-9, k


@crit(5)
def test_c5_d1_boundaries():
    one = np.ones((1, 1), bool)
    # 4 px exceeds both 3 px and 5% of 60 (= 3 px): bad
    assert metric_d1(np.array([[64.0]]), np.array([[60.0]]), one) == 100.0
    # 4 px is below 5% of 100 (= 5 px): good
    assert metric_d1(np.array([[104.0]]), np.array([[100.0]]), one) == 0.0


# ---------------------------------------------------------------------------
# 6. overfit

OVERFIT_CFG = ModelConfig(C=2, C_3d=4, C_dop=8, N=5, D_max=64, scale_preset=None)
OVERFIT_HYPER = TrainHyper(lr=1e-3, iters=2000, batch=4, seed=0)


@pytest.fixture(scope="module")
def overfit_run():
    data = synthetic_set(SceneSpec(height=64, width=96, n_layers=2, disp_range=(2, 32)), 8)
    losses = []
    t0 = time.perf_counter()
    ck = train(OVERFIT_CFG, data, hyper=OVERFIT_HYPER, on_log=lambda r: losses.append(r["loss"]))
    return data, ck, losses, time.perf_counter() - t0


@crit(6)
@pytest.mark.slow
def test_c6_overfit_reaches_half_pixel(overfit_run):
    data, ck, _, seconds = overfit_run
    epe = evaluate(ck.to_model(), data)["full.epe"]
    print(f"overfit: training EPE {epe:.4f} after {ck.iteration} iterations, {seconds:.0f}s")
    assert ck.iteration <= 2000 and epe < 0.5
    assert seconds < 15 * 60


@crit(6)
@pytest.mark.slow
def test_c6_overfit_deterministic(overfit_run):
    data, _, losses, _ = overfit_run
    again = []
    hyper = TrainHyper(lr=OVERFIT_HYPER.lr, iters=25, batch=OVERFIT_HYPER.batch, seed=OVERFIT_HYPER.seed)
    train(OVERFIT_CFG, data, hyper=hyper, on_log=lambda r: again.append(r["loss"]))
    assert again == losses[:25]


# ---------------------------------------------------------------------------
# 7. directional DOP ablation

ABLATION_ITERS, ABLATION_BATCH, SEEDS = 1500, 4, (0, 1, 2)


@pytest.fixture(scope="module")
def ablation():
    train_set, val_set = thin_bar_data(ABLATION_ITERS * ABLATION_BATCH, 32)
    ranges = {}

    def record(variant, N, seed, metrics, model):
        if variant == "dop+dic":
            ranges[(N, seed)] = offset_range(model, val_set)

    rows = run_ablation(THIN_BAR_MODEL, ["const+dic", "dop+dic"], [3, 5], SEEDS, train_set, val_set,
                        TrainHyper(lr=1e-3, iters=ABLATION_ITERS, batch=ABLATION_BATCH), on_result=record)
    return {(r.variant, r.N): r for r in rows}, ranges, val_set


@crit(7)
@pytest.mark.slow
def test_c7_val_set_has_thin_bars_and_layers(ablation):
    *_, val_set = ablation
    lo, hi = THIN_BAR_SCENE.disp_range
    far, near = lo + (hi - lo) // 4, (lo + hi) // 2
    assert len(val_set) == 32
    widths = []
    for s in val_set:
        assert s.regions["bar"].any()
        # runs of one disparity inside the bar mask; touching bars at
        # different depths are separate structures
        d = np.where(s.regions["bar"], s.gt_disp, -1)
        for row in d:
            edges = np.flatnonzero(np.diff(np.r_[-1, row, -1]))
            widths.extend(b - a for a, b in zip(edges[:-1], edges[1:]) if row[a] >= 0)
        g = s.gt_disp[s.valid]
        assert (g <= far).any() and (g >= near).any()
    assert max(widths) < 8


@crit(7)
@pytest.mark.slow
@pytest.mark.parametrize("N", [3, 5])
def test_c7_dop_beats_constant_offsets(ablation, N):
    rows, _, _ = ablation
    const, dop = rows[("const+dic", N)], rows[("dop+dic", N)]
    print(f"N={N}: const+dic {const.per_seed_epe} median {const.epe:.4f}; "
          f"dop+dic {dop.per_seed_epe} median {dop.epe:.4f}")
    assert dop.epe < const.epe


@crit(7)
@pytest.mark.slow
def test_c7_dop_offsets_exceed_constant_range(ablation):
    _, ranges, _ = ablation
    lo = min(r[0] for r in ranges.values())
    hi = max(r[1] for r in ranges.values())
    print(f"DOP offsets on thin-bar pixels: [{lo:.2f}, {hi:.2f}]")
    assert max(-lo, hi) > 2


# ---------------------------------------------------------------------------
# 8. cost accounting


def _stage_flops(**kw):
    m = init_model(ModelConfig(**{**OVERFIT_CFG.to_dict(), **kw}), 0, np.float64)
    z = Tensor(np.zeros((3, 64, 192)))
    with count_flops() as c:
        forward(m, z, z)
    return c.totals


@crit(8)
def test_c8_stage2_linear_in_n():
    s2 = [_stage_flops(N=n)["stage2"] for n in range(1, 7)]
    d = np.diff(s2)
    assert d[0] > 0 and np.all(d == d[0])


@crit(8)
def test_c8_stage2_independent_of_dmax():
    assert len({_stage_flops(D_max=d)["stage2"] for d in (32, 64, 128, 192)}) == 1


@crit(8)
def test_c8_stage1_linear_in_coarse_range():
    runs = [_stage_flops(D_max=16 * k) for k in range(1, 6)]
    d = np.diff([r["stage1"] for r in runs])
    assert d[0] > 0 and np.all(d == d[0])
    assert len({_stage_flops(N=n)["stage1"] for n in (1, 3, 7)}) == 1


# ---------------------------------------------------------------------------
# 9. formats


@crit(9)
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_c9_pfm_bit_exact(tmp_path, dtype):
    rng = np.random.default_rng(91)
    d = rng.uniform(-5, 300, (7, 11)).astype(dtype)
    d[0, 0], d[1, 1] = np.inf, 0.0
    save_pfm(tmp_path / "d.pfm", d)
    back = load_pfm(tmp_path / "d.pfm")
    assert back.dtype == np.float32 and back.tobytes() == d.astype(np.float32).tobytes()


@crit(9)
def test_c9_checkpoint_bit_exact(tmp_path):
    m = init_model(OVERFIT_CFG, 4)
    ck = Checkpoint.from_model(m, iteration=123)
    save_checkpoint(ck, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.config == ck.config and back.iteration == 123
    assert set(back.params) == set(ck.params)
    for k, v in ck.params.items():
        assert back.params[k].tobytes() == v.tobytes() and back.params[k].shape == v.shape
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


@crit(9)
def test_c9_png16_crafted(tmp_path):
    raw = np.array([[0, 1, 256, 257], [25600, 65535, 0, 128]], dtype=np.uint16)
    Image.fromarray(raw).save(tmp_path / "d.png")
    disp, valid = load_disp_png16(tmp_path / "d.png")
    assert np.array_equal(disp, (raw / 256.0).astype(np.float32))
    assert valid.tolist() == [[False, True, True, True], [True, True, False, True]]
