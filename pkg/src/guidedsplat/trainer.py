"""Optimisation loop: seed-point initialisation, curriculum sampling, Adam steps."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import curriculum
from .curriculum import ScheduleParams
from .losses import LossResult, LossWeights, regularizer_grad, total_loss
from .metrics import evaluate
from .oracle import fuse_uncertainty, parse_layer_weights, nearest_neighbors, reprojection_oracle
from .rasterizer import RasterConfig, render, render_backward, rgb_to_sh_dc
from .scene import GaussianCloud, PointSet, Role, SceneBundle, UncertaintyMap, save_scene, sh_coeff_count
from .tensorfile import write_tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    iterations: int = 22000
    lr_positions: float = 1.6e-4
    lr_positions_final_factor: float = 0.01
    lr_log_scales: float = 5e-3
    lr_rotations: float = 1e-3
    lr_opacity_logits: float = 5e-2
    lr_sh: float = 2.5e-3
    # position learning rates are multiplied by this (scene extent)
    spatial_lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    seed: int = 0
    sh_degree: int = 1
    init_scale: float = 0.01
    init_opacity: float = 0.1
    background: tuple = (0.0, 0.0, 0.0)
    use_depth: bool = True
    # "auto": view map, else fused attention, else reprojection oracle; "ones": trust every pixel
    uncertainty: str = "auto"
    oracle_fallback: bool = True
    oracle_sigma: float = 0.15
    oracle_neighbors: int = 4
    layer_weights: str = "0:0.25,22:0.75"
    # what a synthetic draw does when no synthetic views exist:
    # "degrade" trains on a ground-truth view, "regularizer" takes a regulariser-only step
    absent_synthetic: str = "degrade"
    checkpoint_every: int = 0
    eval_every: int = 0
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    weights: LossWeights = field(default_factory=LossWeights)
    raster: RasterConfig = field(default_factory=RasterConfig)

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        lrs = (self.lr_positions, self.lr_log_scales, self.lr_rotations, self.lr_opacity_logits, self.lr_sh)
        if min(lrs) < 0:
            raise ValueError("learning rates must be non-negative")
        if self.uncertainty not in ("auto", "ones"):
            raise ValueError(f"unknown uncertainty mode {self.uncertainty!r}")
        if self.absent_synthetic not in ("degrade", "regularizer"):
            raise ValueError(f"unknown absent_synthetic policy {self.absent_synthetic!r}")
        self.background = tuple(float(c) for c in self.background)


# ---------------------------------------------------------------------------
# initialisation


def init_from_points(points: PointSet, config: TrainConfig | None = None) -> GaussianCloud:
    """One isotropic Gaussian per seed point, sized by its 3 nearest neighbours."""
    config = config or TrainConfig()
    n = len(points)
    if n == 0:
        raise ValueError("cannot initialise from an empty point set")
    if n == 1:
        scale = np.full(1, config.init_scale)
    else:
        k = min(3, n - 1)
        dist, _ = cKDTree(points.positions).query(points.positions, k=k + 1)
        scale = np.maximum(dist[:, 1:].mean(axis=1), 1e-7)
    sh = np.zeros((n, sh_coeff_count(config.sh_degree), 3))
    sh[:, 0] = rgb_to_sh_dc(points.colors)
    logit = math.log(config.init_opacity / (1 - config.init_opacity))
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return GaussianCloud(points.positions.copy(), np.repeat(np.log(scale)[:, None], 3, axis=1),
                         rotations, np.full(n, logit), sh)


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    """Adam with one learning rate per attribute group."""

    def __init__(self, cloud: GaussianCloud, beta1=0.9, beta2=0.999, eps=1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in cloud.params().items()}
        self.v = {k: np.zeros_like(v) for k, v in cloud.params().items()}
        self.step_count = 0

    def step(self, cloud: GaussianCloud, grads: dict, lrs: dict) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.step_count
        c2 = 1 - b2**self.step_count
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = lrs[name] * (m / c1) / (np.sqrt(v / c2) + self.eps)
            param = getattr(cloud, name)
            param -= update
            if name == "rotations":
                moved = np.any(update != 0, axis=1)
                if moved.any():
                    q = param[moved]
                    param[moved] = q / np.linalg.norm(q, axis=1, keepdims=True)

    def state_tensor(self) -> np.ndarray:
        names = GaussianCloud.PARAM_NAMES
        n = len(self.m["positions"])
        flat = lambda d: np.concatenate([d[k].reshape(n, -1) for k in names], axis=1)  # noqa: E731
        return np.stack([flat(self.m), flat(self.v)])


# ---------------------------------------------------------------------------
# training


@dataclass
class StepReport:
    iteration: int
    branch: str
    view_index: int
    loss: float
    lambda_depth: float
    p_synth: float
    psnr_test: float | None = None


class Trainer:
    """Owns the cloud, optimiser state and random stream for one run."""

    def __init__(self, bundle: SceneBundle, config: TrainConfig, cloud: GaussianCloud | None = None):
        self.config = config
        self.bundle = bundle
        if cloud is None:
            cloud = bundle.cloud.copy() if bundle.cloud is not None else init_from_points(bundle.points, config)
        self.cloud = cloud
        self.optimizer = Adam(cloud, config.beta1, config.beta2, config.eps)
        self.rng = curriculum.make_rng(config.seed)
        views = bundle.views
        self.gt_views = [views[i] for i in bundle.by_role(Role.GROUND_TRUTH)]
        self.synth_views = [views[i] for i in bundle.by_role(Role.SYNTHETIC)]
        self.test_views = [views[i] for i in bundle.by_role(Role.TEST)]
        if not self.gt_views:
            raise ValueError("training needs at least one ground-truth view")
        self.uncertainty = [self._resolve_uncertainty(v) for v in self.synth_views]

    def _resolve_uncertainty(self, view) -> UncertaintyMap:
        cfg = self.config
        if cfg.uncertainty == "ones":
            return UncertaintyMap(np.ones(view.camera.shape))
        if view.uncertainty is not None:
            return view.uncertainty
        if view.attention is not None:
            return fuse_uncertainty(view.attention, parse_layer_weights(cfg.layer_weights), view.camera.shape)
        if cfg.oracle_fallback:
            neighbors = nearest_neighbors(view, self.gt_views, cfg.oracle_neighbors)
            return reprojection_oracle(view, neighbors, cfg.oracle_sigma)
        raise ValueError(f"synthetic view {view.name!r} has no uncertainty map and the oracle fallback is off")

    def learning_rates(self, t: float) -> dict[str, float]:
        c = self.config
        return {
            "positions": c.lr_positions * c.spatial_lr_scale * c.lr_positions_final_factor**t,
            "log_scales": c.lr_log_scales,
            "rotations": c.lr_rotations,
            "opacity_logits": c.lr_opacity_logits,
            "sh_coeffs": c.lr_sh,
        }

    def progress(self, iteration: int) -> float:
        return min(iteration / max(self.config.iterations - 1, 1), 1.0)

    def step(self, iteration: int) -> StepReport:
        cfg = self.config
        t = self.progress(iteration)
        p_synth = curriculum.sample_probability(t, cfg.schedule)
        degrade = cfg.absent_synthetic == "degrade" or bool(self.synth_views)
        role, idx = curriculum.sample_source(t, cfg.schedule, self.rng, len(self.gt_views),
                                             len(self.synth_views), degrade=degrade)
        cloud = self.cloud
        if idx < 0:
            value, grads = regularizer_grad(cloud, cfg.weights.lambda_opacity, cfg.weights.lambda_scale)
            branch, lam = "regularizer", 0.0
        else:
            view = (self.synth_views if role is Role.SYNTHETIC else self.gt_views)[idx]
            out = render(cloud, view.camera, cfg.background, cfg.raster)
            res: LossResult = total_loss(
                out, view, cloud, cfg.weights, t,
                uncertainty=self.uncertainty[idx] if role is Role.SYNTHETIC else None,
                use_depth=cfg.use_depth,
            )
            value = res.value
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss {value} at iteration {iteration}, view {view.name!r}")
            grads = render_backward(out.tape, res.d_color, res.d_inv_depth, cloud)
            for k, g in res.param_grads.items():
                grads[k] = grads[k] + g
            branch, lam = res.branch, res.terms.get("lambda_depth", 0.0)
        self.optimizer.step(cloud, grads, self.learning_rates(t))
        return StepReport(iteration, branch, idx, float(value), float(lam), float(p_synth))

    def save_checkpoint(self, directory) -> Path:
        directory = Path(directory)
        save_scene(SceneBundle(self.bundle.points, self.bundle.views, self.cloud), directory)
        write_tensor(directory / "optimizer.ogt", self.optimizer.state_tensor())
        (directory / "optimizer.json").write_text(json.dumps({"step": self.optimizer.step_count}))
        return directory


def train_step(trainer: Trainer, iteration: int) -> StepReport:
    return trainer.step(iteration)


@dataclass
class TrainResult:
    cloud: GaussianCloud
    trace: list[StepReport]
    metrics: dict | None


def train(bundle: SceneBundle, config: TrainConfig, out_dir=None, cloud: GaussianCloud | None = None) -> TrainResult:
    trainer = Trainer(bundle, config, cloud)
    trace = []
    for it in range(config.iterations):
        rep = trainer.step(it)
        last = it == config.iterations - 1
        if trainer.test_views and config.eval_every and ((it + 1) % config.eval_every == 0 or last):
            rep.psnr_test = evaluate(trainer.cloud, trainer.test_views, config.background, config.raster)["psnr"]
        if out_dir is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            trainer.save_checkpoint(Path(out_dir) / f"checkpoint_{it + 1:06d}")
        if it % 500 == 0 or last:
            log.info("iter %d %s loss=%.5f p_synth=%.3f", it, rep.branch, rep.loss, rep.p_synth)
        trace.append(rep)
    metrics = evaluate(trainer.cloud, trainer.test_views, config.background, config.raster) \
        if trainer.test_views else None
    if out_dir is not None:
        out_dir = Path(out_dir)
        trainer.save_checkpoint(out_dir / "final")
        write_trace(trace, out_dir / "trace.csv")
    return TrainResult(trainer.cloud, trace, metrics)


def write_trace(trace, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "branch", "loss", "psnr_test", "lambda_depth", "p_synth"])
        for r in trace:
            w.writerow([r.iteration, r.branch, f"{r.loss:.9g}",
                        "" if r.psnr_test is None else f"{r.psnr_test:.6f}",
                        f"{r.lambda_depth:.9g}", f"{r.p_synth:.9g}"])
