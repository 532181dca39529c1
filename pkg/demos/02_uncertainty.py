"""Where do the per-pixel confidence maps come from?

Two sources: attention planes fused with layer weights, or a reprojection
check against nearby ground-truth views when no attention is supplied.
"""

# %%
from pathlib import Path

import numpy as np

from guidedsplat import bench
from guidedsplat.oracle import colorize, fuse_uncertainty, nearest_neighbors, oracle_auroc, reprojection_oracle
from guidedsplat.scene import AttentionStack, Role, write_png

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

# %% [markdown]
# Fusion first. Each plane is min-max normalised on its own, so the raw scale
# of a layer never matters, only the weights do.

# %%
rng = np.random.default_rng(0)
planes = rng.normal(size=(2, 12, 16))
planes[1] = 40 * planes[1] + 7
U = fuse_uncertainty(AttentionStack([0, 22], planes), {0: 0.25, 22: 0.75}, target_hw=(48, 64))
print("fused map", U.shape, "range", U.values.min(), U.values.max())
write_png(OUT / "fused.png", colorize(U.values))

# %% [markdown]
# Now the fallback. A small bench scene gives synthetic views with known
# corruption masks, so the reprojection score can be graded.

# %%
preset = bench.PRESETS["tiny"]
data = bench.render_dataset(bench.make_scene(0, preset.n_gaussians), preset, seed=0)
views = data.bundle.views
gt = [views[i] for i in data.bundle.by_role(Role.GROUND_TRUTH)]
i = data.bundle.by_role(Role.SYNTHETIC)[0]
U = reprojection_oracle(views[i], nearest_neighbors(views[i], gt, 4))
mask = data.corruption_masks[i]
print(f"{views[i].name}: {mask.mean():.0%} of pixels corrupted, AUROC {oracle_auroc(U.values, mask):.3f}")
print("mean confidence on clean pixels %.3f, on corrupted %.3f" % (U.values[~mask].mean(), U.values[mask].mean()))
strip = np.concatenate([views[i].image, np.repeat(mask[..., None], 3, 2).astype(float), colorize(U.values)], axis=1)
write_png(OUT / "oracle_strip.png", strip)
print("pooled AUROC over all synthetic views: %.3f" % bench.oracle_quality(data))
