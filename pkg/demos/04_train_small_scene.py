"""Train on a tiny bench scene, with and without synthetic views.

A few hundred iterations is enough to see the effect of confidence
weighting. Takes a minute or two on one core.
"""

# %%
from dataclasses import replace
from pathlib import Path

import numpy as np

from guidedsplat import bench
from guidedsplat.losses import LossWeights
from guidedsplat.metrics import evaluate
from guidedsplat.scene import Role, write_png
from guidedsplat.trainer import TrainConfig, Trainer, train

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

preset = bench.PRESETS["tiny"]
data = bench.render_dataset(bench.make_scene(1, preset.n_gaussians), preset, seed=1)
bundle = data.bundle
print({role.value: len(bundle.by_role(role)) for role in Role})

# %%
cfg = TrainConfig(iterations=400, sh_degree=1, weights=LossWeights(lambda_lpips=0.0))
start = Trainer(bundle, cfg)
print("test PSNR before training: %.2f dB" % evaluate(start.cloud, start.test_views)["psnr"])

# %% [markdown]
# Same iterations, three ways: ground truth only, synthetic views trusted
# everywhere, and synthetic views weighted by the reprojection oracle.

# %%
no_synth = bundle.with_views([v for v in bundle.views if v.role is not Role.SYNTHETIC])
runs = {
    "gt only": train(no_synth, cfg),
    "trust all": train(bundle, replace(cfg, uncertainty="ones")),
    "oracle": train(bundle, replace(cfg, uncertainty="auto"), OUT / "train_oracle"),
}
for name, res in runs.items():
    m = res.metrics
    n_syn = sum(r.branch == "synthetic" for r in res.trace)
    print(f"{name:10s} PSNR {m['psnr']:.2f}  SSIM {m['ssim']:.3f}  ({n_syn} synthetic steps)")

# %%
from guidedsplat.rasterizer import render

test = [v for v in bundle.views if v.role is Role.TEST][0]
row = [test.image] + [render(r.cloud, test.camera).color for r in runs.values()]
write_png(OUT / "train_comparison.png", np.concatenate(row, axis=1))
