"""Desk-scale experiment harness.

Ground truth is a procedural Gaussian scene. Training, test and synthetic
views are rendered from it; synthetic views then receive injected artifacts
with exact corruption masks, so the oracle can be scored quantitatively and
the ablation arms can be compared on held-out views.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .curriculum import ScheduleParams, make_rng
from .losses import LossWeights
from .metrics import evaluate
from .oracle import nearest_neighbors, oracle_auroc, reprojection_oracle
from .rasterizer import SH_C0, RasterConfig, render, rgb_to_sh_dc
from .scene import Camera, GaussianCloud, PointSet, Role, SceneBundle, ViewRecord, write_png
from .trainer import TrainConfig, Trainer

LAYOUTS = ("box", "ring", "two_objects")
ARTIFACT_KINDS = ("patch_swap", "hallucinated_blob", "texture_blur", "color_shift")
ARMS = ("baseline", "naive_synth", "scheduled", "scheduled_lpips", "plus_depth", "full_uncertainty")
RING_ANNULUS = (0.55, 1.05)
PERTURBATION_FLOOR = 0.05


def _random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q * np.where(q[:, :1] < 0, -1.0, 1.0)


def make_scene(seed: int, n_gaussians: int, layout: str = "box", *, scale_range=(0.08, 0.22),
               opacity_range=(0.3, 0.95)) -> GaussianCloud:
    """Seeded random ground-truth cloud (SH degree 0, view-independent colour)."""
    if n_gaussians < 1:
        raise ValueError("need at least one Gaussian")
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}, expected one of {LAYOUTS}")
    rng = make_rng(seed)
    n = n_gaussians
    if layout == "box":
        pos = rng.uniform(-0.8, 0.8, size=(n, 3))
    elif layout == "ring":
        r = np.sqrt(rng.uniform(RING_ANNULUS[0] ** 2, RING_ANNULUS[1] ** 2, n))
        th = rng.uniform(0, 2 * np.pi, n)
        pos = np.stack([r * np.cos(th), r * np.sin(th), rng.uniform(-0.35, 0.35, n)], axis=1)
    else:
        side = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        pos = np.array([0.55, 0.0, 0.0]) * side[:, None] + d * 0.42 * rng.random(n)[:, None] ** (1 / 3)
    # smooth colour field plus per-Gaussian texture
    phase = rng.uniform(0, 2 * np.pi, 3)
    freq = rng.uniform(1.5, 3.0, 3)
    base = 0.5 + 0.35 * np.sin(pos @ np.diag(freq) + phase)
    colors = np.clip(base + rng.normal(0, 0.12, (n, 3)), 0.02, 0.98)
    log_scales = np.log(rng.uniform(*scale_range, size=(n, 3)))
    op = rng.uniform(*opacity_range, n)
    return GaussianCloud(pos, log_scales, _random_quats(rng, n), np.log(op / (1 - op)),
                         rgb_to_sh_dc(colors)[:, None, :])


def ring_rig(n: int, *, radius: float = 3.2, height: float = 0.9, size: int = 64, fov_deg: float = 50.0,
             phase: float = 0.0) -> list[Camera]:
    cams = []
    for i in range(n):
        a = phase + 2 * np.pi * i / n
        eye = [radius * math.cos(a), radius * math.sin(a), height]
        cams.append(Camera.look_at(eye, [0, 0, 0], fov_deg=fov_deg, width=size, height=size, near=0.1, far=20.0))
    return cams


def split_roles(n_poses: int, n_train: int, test_every: int = 8) -> list[Role | None]:
    """Every ``test_every``-th pose is a test view; ``n_train`` are spread evenly over the rest."""
    roles: list[Role | None] = [None] * n_poses
    rest = []
    for i in range(n_poses):
        if i % test_every == 0:
            roles[i] = Role.TEST
        else:
            rest.append(i)
    picks = np.linspace(0, len(rest), n_train, endpoint=False).astype(int) if n_train else []
    for j in picks:
        roles[rest[j]] = Role.GROUND_TRUTH
    return roles


def _render_view(cloud, camera, role, background, name) -> ViewRecord:
    out = render(cloud, camera, background)
    covered = out.accum_alpha >= 0.5
    inv = np.where(covered, out.expected_inv_depth, 0.0)
    return ViewRecord(camera=camera, image=np.clip(out.color, 0, 1), role=role, inv_depth=inv,
                      depth_mask=covered.astype(np.float64), name=name)


# ---------------------------------------------------------------------------
# artifacts


def _region(rng, H, W, kind):
    if kind == "hallucinated_blob":
        s = rng.uniform(0.06, 0.12) * min(H, W)
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        ys, xs = np.mgrid[0:H, 0:W]
        weight = np.exp(-((ys + 0.5 - cy) ** 2 + (xs + 0.5 - cx) ** 2) / (2 * s * s))
        return weight >= np.exp(-2.0), weight
    h = int(rng.integers(max(2, H // 8), max(3, H // 3)))
    w = int(rng.integers(max(2, W // 8), max(3, W // 3)))
    y0 = int(rng.integers(0, H - h + 1))
    x0 = int(rng.integers(0, W - w + 1))
    m = np.zeros((H, W), bool)
    m[y0:y0 + h, x0:x0 + w] = True
    return m, (y0, x0, h, w)


def _apply(rng, img, kind):
    H, W = img.shape[:2]
    region, info = _region(rng, H, W, kind)
    new = img.copy()
    if kind == "patch_swap":
        y0, x0, h, w = info
        sy = int(rng.integers(0, H - h + 1))
        sx = int(rng.integers(0, W - w + 1))
        new[y0:y0 + h, x0:x0 + w] = img[sy:sy + h, sx:sx + w]
    elif kind == "hallucinated_blob":
        col = rng.uniform(0, 1, 3)
        a = 0.9 * info[..., None]
        new = img * (1 - a) + col * a
    elif kind == "texture_blur":
        blurred = np.stack([gaussian_filter(img[..., c], sigma=2.0, mode="nearest") for c in range(3)], -1)
        new = np.where(region[..., None], blurred, img)
    elif kind == "color_shift":
        shift = rng.uniform(0.15, 0.35, 3) * rng.choice([-1.0, 1.0], 3)
        new = np.clip(img + shift, 0, 1)
    return region, new


def inject_artifacts(image, seed: int, kinds=ARTIFACT_KINDS, budget: float = 0.25, max_regions: int = 400):
    """Corrupt roughly ``budget`` of the pixels; returns ``(image, mask)``.

    A pixel is only modified (and marked) if its mean absolute colour change
    is at least 0.05, so the mask is exactly the set of changed pixels.
    """
    img = np.asarray(image, dtype=np.float64)
    kinds = tuple(kinds)
    out = img.copy()
    mask = np.zeros(img.shape[:2], bool)
    if not kinds:
        return out, mask
    if not 0 < budget <= 0.5:
        raise ValueError(f"artifact budget must lie in (0, 0.5], got {budget}")
    unknown = set(kinds) - set(ARTIFACT_KINDS)
    if unknown:
        raise ValueError(f"unknown artifact kinds {sorted(unknown)}")
    rng = make_rng(seed)
    target = int(round(budget * mask.size))
    lo = int(math.ceil(0.9 * target))
    for i in range(max_regions):
        if mask.sum() >= lo:
            break
        kind = kinds[i % len(kinds)]
        region, new = _apply(rng, out, kind)
        changed = np.abs(new - img).mean(axis=-1) >= PERTURBATION_FLOOR
        fresh = region & changed & ~mask
        room = target - int(mask.sum())
        idx = np.flatnonzero(fresh)
        if len(idx) > room:
            keep = np.zeros(mask.size, bool)
            keep[idx[:room]] = True
            fresh = keep.reshape(mask.shape)
        out[fresh] = new[fresh]
        mask |= fresh
    return out, mask


# ---------------------------------------------------------------------------
# datasets


@dataclass
class BenchData:
    gt_cloud: GaussianCloud
    bundle: SceneBundle
    corruption_masks: dict[int, np.ndarray]
    background: tuple


@dataclass
class Preset:
    name: str
    size: int = 64
    n_gaussians: int = 300
    layout: str = "box"
    n_gt: int = 8
    n_synthetic: int = 24
    n_test: int = 8
    iterations: int = 3000
    budget: float = 0.25
    kinds: tuple = ARTIFACT_KINDS
    seed_fraction: float = 0.5
    seed_jitter: float = 0.05
    background: tuple = (0.0, 0.0, 0.0)
    fov_deg: float = 50.0
    cam_radius: float = 3.2
    cam_height: float = 0.9
    synth_height: float = 0.9
    train_overrides: dict = field(default_factory=dict)


PRESETS = {
    "default": Preset("default", fov_deg=35.0),
    "tiny": Preset("tiny", size=32, n_gaussians=120, n_gt=8, n_synthetic=12, n_test=4, iterations=1200,
                   fov_deg=35.0),
}


def render_dataset(gt_cloud: GaussianCloud, preset: Preset, seed: int = 0) -> BenchData:
    """Render GT/test views on one ring and corrupted synthetic views on an offset ring."""
    bg = preset.background
    n_real = preset.n_test * 8
    rig = dict(size=preset.size, fov_deg=preset.fov_deg, radius=preset.cam_radius)
    real_cams = ring_rig(n_real, height=preset.cam_height, **rig)
    roles = split_roles(n_real, preset.n_gt)
    views = []
    for i, (cam, role) in enumerate(zip(real_cams, roles)):
        if role is not None:
            views.append(_render_view(gt_cloud, cam, role, bg, f"{role.value}_{i:03d}"))
    masks = {}
    synth_cams = ring_rig(preset.n_synthetic, phase=np.pi / max(preset.n_synthetic, 1),
                          height=preset.synth_height, **rig) if preset.n_synthetic else []
    for j, cam in enumerate(synth_cams):
        v = _render_view(gt_cloud, cam, Role.SYNTHETIC, bg, f"synthetic_{j:03d}")
        img, mask = inject_artifacts(v.image, seed * 1000 + j, preset.kinds, preset.budget) \
            if preset.budget > 0 else (v.image, np.zeros(cam.shape, bool))
        v.image = img
        masks[len(views)] = mask
        views.append(v)
    rng = make_rng(seed + 7919)
    n_pts = max(1, int(round(preset.seed_fraction * gt_cloud.count)))
    pick = np.sort(rng.choice(gt_cloud.count, n_pts, replace=False))
    colors = np.clip(gt_cloud.sh_coeffs[pick, 0] * SH_C0 + 0.5 + rng.normal(0, 0.05, (n_pts, 3)), 0, 1)
    pts = PointSet(gt_cloud.positions[pick] + rng.normal(0, preset.seed_jitter, (n_pts, 3)), colors)
    return BenchData(gt_cloud, SceneBundle(pts, views), masks, bg)


def oracle_quality(data: BenchData, config: TrainConfig | None = None) -> float:
    """Pooled AUROC of the reprojection oracle over all corrupted synthetic views."""
    config = config or TrainConfig()
    views = data.bundle.views
    gt = [views[i] for i in data.bundle.by_role(Role.GROUND_TRUTH)]
    scores, labels = [], []
    for i in data.bundle.by_role(Role.SYNTHETIC):
        U = reprojection_oracle(views[i], nearest_neighbors(views[i], gt, config.oracle_neighbors),
                                config.oracle_sigma)
        scores.append(U.values.ravel())
        labels.append(data.corruption_masks[i].ravel())
    if not scores:
        return float("nan")
    labels = np.concatenate(labels)
    if labels.all() or not labels.any():
        return float("nan")
    return oracle_auroc(np.concatenate(scores)[None, :], labels[None, :])


# ---------------------------------------------------------------------------
# ablation


def arm_config(arm: str, preset: Preset, seed: int, n_gt: int, n_synth: int,
               workers: int = 1) -> tuple[TrainConfig, bool]:
    """Training config for an ablation arm and whether it sees synthetic views."""
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}, expected one of {ARMS}")
    overrides = dict(preset.train_overrides)
    raster = RasterConfig(workers=workers)
    weights = LossWeights(lambda_lpips=0.3 if arm in ("scheduled_lpips", "plus_depth", "full_uncertainty") else 0.0)
    schedule = ScheduleParams(seed=seed)
    if arm == "naive_synth":
        schedule = ScheduleParams(seed=seed, constant_p=n_synth / max(n_gt + n_synth, 1))
    cfg = TrainConfig(
        iterations=preset.iterations, seed=seed, sh_degree=1, background=preset.background,
        use_depth=arm in ("plus_depth", "full_uncertainty"),
        uncertainty="auto" if arm == "full_uncertainty" else "ones",
        schedule=schedule, weights=weights, raster=raster, **overrides,
    )
    return cfg, arm != "baseline"


@dataclass
class ArmResult:
    arm: str
    seed: int
    metrics: dict
    auroc: float | None
    preview: np.ndarray


def run_arm(data: BenchData, arm: str, preset: Preset, seed: int, workers: int = 1) -> ArmResult:
    bundle = data.bundle
    n_gt = len(bundle.by_role(Role.GROUND_TRUTH))
    n_syn = len(bundle.by_role(Role.SYNTHETIC))
    cfg, with_synth = arm_config(arm, preset, seed, n_gt, n_syn, workers)
    if not with_synth:
        bundle = bundle.with_views([v for v in bundle.views if v.role is not Role.SYNTHETIC])
    trainer = Trainer(bundle, cfg)
    auroc = None
    if arm == "full_uncertainty" and n_syn:
        syn_idx = data.bundle.by_role(Role.SYNTHETIC)
        scores = np.concatenate([u.values.ravel() for u in trainer.uncertainty])
        labels = np.concatenate([data.corruption_masks[i].ravel() for i in syn_idx])
        if labels.any() and not labels.all():
            auroc = oracle_auroc(scores[None, :], labels[None, :])
    for it in range(cfg.iterations):
        trainer.step(it)
    tests = [v for v in bundle.views if v.role is Role.TEST]
    metrics = evaluate(trainer.cloud, tests, cfg.background, cfg.raster)
    preview = render(trainer.cloud, tests[0].camera, cfg.background, cfg.raster).color
    return ArmResult(arm, seed, metrics, auroc, preview)


def run_ablation(preset: Preset | str, arms=ARMS, seeds=(0,), out_dir=None, workers: int = 1) -> list[dict]:
    """Train every arm on every seed; returns report rows (per seed, then means)."""
    if isinstance(preset, str):
        preset = PRESETS[preset]
    arms = list(arms)
    results: dict[tuple[str, int], ArmResult] = {}
    previews = {}
    for seed in seeds:
        gt_cloud = make_scene(seed, preset.n_gaussians, preset.layout)
        data = render_dataset(gt_cloud, preset, seed)
        for arm in arms:
            res = run_arm(data, arm, preset, seed, workers)
            results[(arm, seed)] = res
            if seed == seeds[0]:
                previews[arm] = res.preview
                previews["_gt"] = [v for v in data.bundle.views if v.role is Role.TEST][0].image

    rows = []
    for seed in seeds:
        for arm in arms:
            r = results[(arm, seed)]
            rows.append({"arm": arm, "seed": str(seed), **r.metrics, "oracle_auroc": r.auroc})
    for arm in arms:
        per = [results[(arm, s)] for s in seeds]
        aurocs = [r.auroc for r in per if r.auroc is not None]
        rows.append({
            "arm": arm, "seed": "mean",
            **{k: float(np.mean([r.metrics[k] for r in per])) for k in per[0].metrics},
            "oracle_auroc": float(np.mean(aurocs)) if aurocs else None,
        })
    means = {r["arm"]: r for r in rows if r["seed"] == "mean"}
    base = means.get("baseline")
    prev = None
    for arm in arms:
        r = means[arm]
        r["delta_psnr_prev"] = None if prev is None else r["psnr"] - means[prev]["psnr"]
        r["delta_psnr_baseline"] = None if base is None else r["psnr"] - base["psnr"]
        prev = arm
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.csv").write_text(report_csv(rows))
        strip = np.concatenate([previews["_gt"]] + [previews[a] for a in arms], axis=1)
        write_png(out_dir / "comparison.png", strip)
    return rows


REPORT_COLUMNS = ("arm", "seed", "psnr", "ssim", "perceptual_proxy", "oracle_auroc",
                  "delta_psnr_prev", "delta_psnr_baseline")


def report_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow(["" if r.get(c) is None else (f"{r[c]:.6f}" if isinstance(r[c], float) else r[c])
                    for c in REPORT_COLUMNS])
    return buf.getvalue()


def mean_psnr(rows) -> dict[str, float]:
    return {r["arm"]: r["psnr"] for r in rows if r["seed"] == "mean"}


__all__ = [
    "ARMS", "ARTIFACT_KINDS", "BenchData", "PRESETS", "Preset", "evaluate", "inject_artifacts",
    "make_scene", "oracle_quality", "render_dataset", "ring_rig", "run_ablation", "split_roles",
]
