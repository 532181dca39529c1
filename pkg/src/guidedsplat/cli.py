"""Command-line entry point: ``guidedsplat <subcommand> ...``.

Exit status is 0 on success, 1 for usage errors (bad or missing flags) and 2
for data errors (unreadable scenes, malformed tensors, invalid configs).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import bench, config as cfgfile
from .curriculum import schedule_table
from .metrics import evaluate
from .oracle import colorize, fuse_uncertainty, nearest_neighbors, parse_layer_weights, reprojection_oracle
from .rasterizer import RasterConfig, render
from .scene import AttentionStack, Camera, Role, SceneError, load_scene, write_png
from .tensorfile import read_tensor, write_tensor
from .trainer import TrainConfig, train

log = logging.getLogger("guidedsplat")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; usage errors here are 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(path, seed, workers) -> TrainConfig:
    config = cfgfile.load(path) if path else cfgfile.apply_env(TrainConfig())
    if seed is not None:
        config = dataclasses.replace(config, seed=seed, schedule=dataclasses.replace(config.schedule, seed=seed))
    if workers is not None:
        config = dataclasses.replace(config, raster=dataclasses.replace(config.raster, workers=workers))
    return config


def _pick_view(bundle, key: str):
    for i, v in enumerate(bundle.views):
        if v.name == key:
            return v
    if key.isdigit() and int(key) < len(bundle.views):
        return bundle.views[int(key)]
    raise ValueError(f"no view named {key!r} in scene")


def _checkpoint(path):
    bundle = load_scene(path)
    if bundle.cloud is None:
        raise ValueError(f"{path} holds no trained cloud")
    return bundle


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    config = _load_config(args.config, args.seed, args.workers)
    if args.iterations is not None:
        config = dataclasses.replace(config, iterations=args.iterations)
    bundle = load_scene(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfgfile.save(config, out / "config.txt")
    result = train(bundle, config, out)
    if result.metrics is not None:
        (out / "metrics.json").write_text(json.dumps(result.metrics, indent=2, sort_keys=True) + "\n")
        print(json.dumps(result.metrics, sort_keys=True))
    return EXIT_OK


def cmd_render(args) -> int:
    bundle = _checkpoint(args.checkpoint)
    pose = Path(args.camera)
    if pose.suffix == ".json" and pose.is_file():
        camera = Camera.from_dict(json.loads(pose.read_text()))
    else:
        camera = _pick_view(bundle, args.camera).camera
    bg = tuple(args.background) if args.background else (0.0, 0.0, 0.0)
    out = render(bundle.cloud, camera, bg, RasterConfig(workers=args.workers or 1))
    write_png(args.out, out.color)
    if args.depth_out:
        write_tensor(args.depth_out, out.expected_inv_depth)
    return EXIT_OK


def cmd_eval(args) -> int:
    cloud = _checkpoint(args.checkpoint).cloud
    bundle = load_scene(args.scene)
    tests = [bundle.views[i] for i in bundle.by_role(Role.TEST)]
    metrics = evaluate(cloud, tests, config=RasterConfig(workers=args.workers or 1))
    text = json.dumps(metrics, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_fuse(args) -> int:
    planes = read_tensor(args.attn)
    if planes.ndim == 2:
        planes = planes[None]
    if planes.ndim != 3:
        raise ValueError(f"attention tensor must be (layers, H, W), got shape {planes.shape}")
    weights = parse_layer_weights(args.weights)
    layer_ids = [int(s) for s in args.layers.split(",")] if args.layers else list(weights)
    stack = AttentionStack(layer_ids, planes)
    target = tuple(int(s) for s in args.size.lower().split("x")) if args.size else None
    U = fuse_uncertainty(stack, weights, target)
    write_tensor(args.out, U.values)
    if args.png:
        write_png(args.png, colorize(U))
    return EXIT_OK


def cmd_oracle(args) -> int:
    bundle = load_scene(args.scene)
    view = _pick_view(bundle, args.view)
    gt = [bundle.views[i] for i in bundle.by_role(Role.GROUND_TRUTH) if bundle.views[i] is not view]
    U = reprojection_oracle(view, nearest_neighbors(view, gt, args.neighbors), args.sigma)
    write_tensor(args.out, U.values)
    if args.png:
        write_png(args.png, colorize(U))
    print(json.dumps({"view": view.name, "mean_confidence": U.mean}))
    return EXIT_OK


def cmd_schedule(args) -> int:
    config = _load_config(args.config, args.seed, None)
    iterations = args.iterations or config.iterations
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "t", "w", "p"])
        for it, t, wt, p in schedule_table(iterations, config.schedule):
            w.writerow([it, f"{t:.9g}", f"{wt:.9g}", f"{p:.9g}"])
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.preset not in bench.PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {sorted(bench.PRESETS)}")
    arms = [a for a in args.arms.split(",") if a] if args.arms else list(bench.ARMS)
    bad = [a for a in arms if a not in bench.ARMS]
    if bad:
        raise UsageError(f"unknown arms {bad}; choose from {list(bench.ARMS)}")
    base = args.seed
    if base is None:
        base = int(os.environ.get("OGS_SEED") or 0)
    seeds = tuple(range(base, base + args.seeds))
    preset = bench.PRESETS[args.preset]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = {"preset": dataclasses.asdict(preset), "arms": arms, "seeds": list(seeds)}
    (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True, default=str) + "\n")
    rows = bench.run_ablation(preset, arms, seeds, out, workers=args.workers or 1)
    for arm, value in bench.mean_psnr(rows).items():
        print(f"{arm:18s} {value:8.3f} dB")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--workers", type=int, default=None, help="render threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="guidedsplat", description="Uncertainty-guided Gaussian splatting on the desk.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="optimise a cloud on a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", parents=[common], help="render a checkpoint from a view or pose file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--camera", required=True, help="view name/index in the checkpoint, or a camera .json")
    p.add_argument("--out", required=True)
    p.add_argument("--depth-out")
    p.add_argument("--background", type=float, nargs=3)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM/perceptual proxy on test views")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fuse", parents=[common], help="fuse an attention stack into an uncertainty map")
    p.add_argument("--attn", required=True)
    p.add_argument("--weights", default="0:0.25,22:0.75", help="layer:weight pairs")
    p.add_argument("--layers", help="layer ids of the stack planes, in order (default: weight order)")
    p.add_argument("--size", help="output HxW")
    p.add_argument("--out", required=True)
    p.add_argument("--png")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("oracle", parents=[common], help="reprojection-consistency uncertainty for a view")
    p.add_argument("--scene", required=True)
    p.add_argument("--view", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--png")
    p.add_argument("--sigma", type=float, default=0.15)
    p.add_argument("--neighbors", type=int, default=4)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("schedule", parents=[common], help="CSV of the sampling schedule")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("bench", parents=[common], help="run the ablation on a synthetic preset")
    p.add_argument("--preset", default="tiny")
    p.add_argument("--arms", help="comma-separated arm names (default: all)")
    p.add_argument("--seeds", type=int, default=3, help="number of consecutive seeds from --seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers is not None and args.workers < 1:
        print(f"{parser.prog}: error: --workers must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError, FloatingPointError, SceneError) as exc:
        print(f"{parser.prog} {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(dispatch())
