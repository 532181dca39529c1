"""Rendering a handful of Gaussians and checking the backward pass.

Run with ``python demos/01_render_and_gradients.py``; images land in
``demos/out/``.
"""

# %%
from pathlib import Path

import numpy as np

from guidedsplat.rasterizer import render, render_backward, rgb_to_sh_dc
from guidedsplat.scene import Camera, GaussianCloud, write_png

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

# %% [markdown]
# Three Gaussians in a row, red in front of green in front of blue, seen from
# a camera on the -y axis.

# %%
cloud = GaussianCloud(
    positions=np.array([[-0.4, -0.3, 0.0], [0.0, 0.0, 0.1], [0.4, 0.3, 0.0]]),
    log_scales=np.log(np.array([[0.3, 0.1, 0.3], [0.25, 0.25, 0.25], [0.4, 0.1, 0.2]])),
    rotations=np.tile([1.0, 0, 0, 0], (3, 1)),
    opacity_logits=np.array([2.0, 1.0, 3.0]),
    sh_coeffs=rgb_to_sh_dc(0.1 + 0.8 * np.eye(3))[:, None, :],
)
cam = Camera.look_at((0.0, -3.0, 0.3), (0.0, 0.0, 0.0), fov_deg=45, width=96, height=64)
out = render(cloud, cam, background=(1.0, 1.0, 1.0))
write_png(OUT / "three_gaussians.png", out.color)
print("coverage in [%.3f, %.3f]" % (out.accum_alpha.min(), out.accum_alpha.max()))
print("accum + T - 1 at worst:", np.abs(out.accum_alpha + out.final_transmittance - 1).max())

# %% [markdown]
# Gradients of a toy loss (mean red channel) against every attribute, with a
# finite difference on one of them as a sanity check.

# %%
dcolor = np.zeros_like(out.color)
dcolor[..., 0] = 1.0 / dcolor[..., 0].size
grads = render_backward(out.tape, dcolor, None, cloud)
for name, g in grads.items():
    print(f"{name:15s} |grad| = {np.abs(g).max():.3e}")

h = 1e-6
cloud.opacity_logits[1] += h
up = render(cloud, cam, (1.0, 1.0, 1.0)).color[..., 0].mean()
cloud.opacity_logits[1] -= 2 * h
down = render(cloud, cam, (1.0, 1.0, 1.0)).color[..., 0].mean()
cloud.opacity_logits[1] += h
print("opacity of the green one: analytic %.8f, numeric %.8f"
      % (grads["opacity_logits"][1], (up - down) / (2 * h)))
