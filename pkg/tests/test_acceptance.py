"""Acceptance checks, one test per criterion.

Each test prints a single ``[PASS]`` / ``[FAIL]`` line (visible even when
pytest captures output) before asserting. Run on its own with

    pytest tests/test_acceptance.py -v

or ``python tests/test_acceptance.py``.
"""

import csv
import dataclasses
import time

import numpy as np
import pytest
from scipy.stats import rankdata

from guidedsplat import bench
from guidedsplat.cli import dispatch
from guidedsplat.curriculum import ScheduleParams, make_rng, sample_source, schedule_weight
from guidedsplat.losses import LossWeights, depth_weight, photometric_loss, synthetic_loss
from guidedsplat.oracle import fuse_uncertainty, oracle_auroc
from guidedsplat.rasterizer import render, render_backward
from guidedsplat.scene import AttentionStack, GaussianCloud, Role, UncertaintyMap
from guidedsplat.trainer import TrainConfig, train

from helpers import gradient_case, numeric_grads, random_cloud, rel_err, small_camera


@pytest.fixture
def report(request, pytestconfig):
    capman = pytestconfig.pluginmanager.getplugin("capturemanager")

    def emit(ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {request.node.name}: {detail}"
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        assert ok, line

    return emit


# ---------------------------------------------------------------------------


def test_criterion_1_gradients_match_finite_differences(report):
    t0 = time.perf_counter()
    worst = dict.fromkeys(GaussianCloud.PARAM_NAMES, 0.0)
    accepted, seed = 0, 0
    while accepted < 50:
        case = gradient_case(seed)
        seed += 1
        if case is None:
            continue
        cloud, cam, bg, wc, wd, out = case

        def loss(c):
            o = render(c, cam, bg)
            return float((o.color * wc).sum() + (o.expected_inv_depth * wd).sum())

        analytic = render_backward(out.tape, wc, wd, cloud)
        numeric = numeric_grads(loss, cloud, h=1e-4, order=4)
        for name in worst:
            worst[name] = max(worst[name], float(rel_err(analytic[name], numeric[name], floor=1e-6).max()))
        accepted += 1
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-3 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(ok, f"{accepted} scenes ({seed - accepted} rejected near a kink), worst rel err {detail}; {elapsed:.1f}s")


def test_criterion_2_blending_invariants(report):
    worst_tel, worst_perm = 0.0, 0.0
    for seed in range(100):
        rng = np.random.default_rng(10_000 + seed)
        n = int(rng.integers(1, 16))
        cloud = random_cloud(rng, n, spread=0.8, opacity=(-2, 6))
        cam = small_camera(size=20)
        a = render(cloud, cam)
        worst_tel = max(worst_tel, float(np.abs(a.accum_alpha + a.final_transmittance - 1).max()))
        b = render(cloud.permuted(rng.permutation(n)), cam)
        worst_perm = max(worst_perm, float(np.abs(a.color - b.color).max()),
                         float(np.abs(a.expected_inv_depth - b.expected_inv_depth).max()))
    report(worst_tel <= 1e-6 and worst_perm <= 1e-6,
           f"100 scenes, max |accum + T - 1| = {worst_tel:.1e}, max permutation difference = {worst_perm:.1e}")


def test_criterion_3_fusion(report):
    rng = np.random.default_rng(3)
    worst_ref, worst_affine, lo, hi = 0.0, 0.0, 1.0, 0.0
    for _ in range(50):
        planes = rng.normal(rng.uniform(-5, 5), rng.uniform(0.1, 10), (2, 9, 11))
        U = fuse_uncertainty(AttentionStack([0, 22], planes), {0: 0.25, 22: 0.75}).values
        ref = sum(w * (p - p.min()) / (p.max() - p.min()) for w, p in zip((0.25, 0.75), planes))
        worst_ref = max(worst_ref, float(np.abs(U - ref).max()))
        a, b = rng.uniform(0.01, 50), rng.uniform(-50, 50)
        V = fuse_uncertainty(AttentionStack([0, 22], a * planes + b)).values
        worst_affine = max(worst_affine, float(np.abs(U - V).max()))
        lo, hi = min(lo, U.min()), max(hi, U.max())
    ok = worst_ref <= 1e-6 and worst_affine <= 1e-6 and lo >= 0 and hi <= 1
    report(ok, f"reference diff {worst_ref:.1e}, affine diff {worst_affine:.1e}, range [{lo:.3f}, {hi:.3f}]")


def test_criterion_4_loss_semantics(report):
    rng = np.random.default_rng(4)
    pred, synth = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
    zero = synthetic_loss(pred, synth, UncertaintyMap(np.zeros((16, 16))))
    w = LossWeights(lambda_ssim_synth=0.3, lambda_lpips=0.0)
    full = synthetic_loss(pred, synth, UncertaintyMap(np.ones((16, 16))), w)
    photo = photometric_loss(pred, synth, 0.3)
    lam = depth_weight(0.5)
    ok = zero == 0.0 and abs(full - photo) <= 1e-12 and abs(lam - 0.1) <= 1e-15
    report(ok, f"U=0 -> {zero}, U=1 -> {full:.12f} vs photometric {photo:.12f}, depth weight(0.5) = {lam!r}")


def test_criterion_5_schedule(report):
    w0, w1, wq = schedule_weight(0.0), schedule_weight(1.0), schedule_weight(0.25)
    rng = make_rng(5)
    params = ScheduleParams()
    hits = sum(sample_source(0.25, params, rng, 8, 24)[0] is Role.SYNTHETIC for _ in range(100_000))
    frac = hits / 100_000
    ok = abs(w0 - 0.1) < 1e-12 and abs(w1 - 0.1) < 1e-12 and abs(wq - 2.2094) <= 1e-4 and abs(frac - 0.6884) <= 0.01
    report(ok, f"w(0)={w0:.4f}, w(1)={w1:.4f}, w(0.25)={wq:.6f}, synthetic fraction at t=0.25 = {frac:.4f}")


# ---------------------------------------------------------------------------
# bench-based criteria


@pytest.fixture(scope="module")
def tiny_ablation(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench") / "run1"
    t0 = time.perf_counter()
    code = dispatch(["bench", "--preset", "tiny", "--seeds", "3", "--seed", "0", "--out", str(out)])
    elapsed = time.perf_counter() - t0
    rows = list(csv.DictReader(open(out / "report.csv")))
    return code, elapsed, rows, out


def test_criterion_6_ablation_ordering(report, tiny_ablation):
    code, elapsed, rows, _ = tiny_ablation
    m = {r["arm"]: float(r["psnr"]) for r in rows if r["seed"] == "mean"}
    naive, base, sched, full = m["naive_synth"], m["baseline"], m["scheduled"], m["full_uncertainty"]
    middle_ok = any(naive < x <= full for x in (base, sched))
    ok = (code == 0 and middle_ok and full - naive >= 0.5 and full >= sched and elapsed < 15 * 60
          and bench.PRESETS["tiny"].budget == 0.25)
    detail = ", ".join(f"{k} {v:.3f}" for k, v in m.items())
    report(ok, f"mean test PSNR over 3 seeds: {detail}; full - naive = {full - naive:+.3f} dB; {elapsed:.0f}s")


def test_criterion_7_oracle_quality(report):
    scores = {}
    for name, preset in bench.PRESETS.items():
        scores[name] = [bench.oracle_quality(bench.render_dataset(
            bench.make_scene(s, preset.n_gaussians, preset.layout), preset, s)) for s in range(3)]
    rng = np.random.default_rng(7)
    U = rng.integers(0, 20, (50, 100)) / 19
    mask = rng.uniform(size=(50, 100)) < 0.3
    r = rankdata(1 - U.ravel())
    n1, n0 = mask.sum(), (~mask).sum()
    ref = (r[mask.ravel()].sum() - n1 * (n1 + 1) / 2) / (n1 * n0)
    diff = abs(oracle_auroc(U, mask) - ref)
    ok = all(min(v) > 0.8 for v in scores.values()) and diff <= 1e-9
    detail = "; ".join(f"{k} " + ", ".join(f"{x:.3f}" for x in v) for k, v in scores.items())
    report(ok, f"AUROC per seed: {detail}; rank-sum difference {diff:.1e}")


def test_criterion_8_gating_equivalence(report):
    preset = bench.PRESETS["tiny"]
    data = bench.render_dataset(bench.make_scene(0, preset.n_gaussians, preset.layout), preset, 0)
    zeroed = data.bundle.with_views([
        dataclasses.replace(v, uncertainty=UncertaintyMap(np.zeros(v.camera.shape)))
        if v.role is Role.SYNTHETIC else v for v in data.bundle.views
    ])
    absent = data.bundle.with_views([v for v in data.bundle.views if v.role is not Role.SYNTHETIC])
    cfg = TrainConfig(iterations=300, sh_degree=1, seed=8)
    a = train(zeroed, cfg)
    b = train(absent, dataclasses.replace(cfg, absent_synthetic="regularizer"))
    n_syn = sum(r.branch == "synthetic" for r in a.trace)
    diff = float(np.abs(a.cloud.pack() - b.cloud.pack()).max())
    report(diff <= 1e-5 and n_syn > 0, f"300 iterations ({n_syn} synthetic draws), max parameter difference {diff:.1e}")


def test_criterion_9_bench_determinism(report, tiny_ablation):
    _, _, _, first = tiny_ablation
    second = first.parent / "run2"
    code = dispatch(["bench", "--preset", "tiny", "--seeds", "3", "--seed", "0", "--out", str(second)])
    a, b = (first / "report.csv").read_bytes(), (second / "report.csv").read_bytes()
    report(code == 0 and a == b, f"two runs, {len(a)} bytes each, identical = {a == b}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
