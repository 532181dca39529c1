from pathlib import Path

import numpy as np

from guidedsplat.rasterizer import RasterConfig
from guidedsplat.scene import Camera, GaussianCloud, sh_coeff_count

FIXTURES = Path(__file__).parent / "fixtures"


def random_cloud(rng, n, sh_degree=1, spread=0.5, scale=(0.15, 0.5), opacity=(-1.5, 2.0), sh_std=0.15):
    k = sh_coeff_count(sh_degree)
    sh = rng.normal(0, sh_std, (n, k, 3))
    sh[:, 0] += rng.uniform(-1, 1, (n, 3))
    return GaussianCloud(
        positions=rng.uniform(-spread, spread, (n, 3)),
        log_scales=np.log(rng.uniform(*scale, (n, 3))),
        rotations=rng.normal(size=(n, 4)),
        opacity_logits=rng.uniform(*opacity, n),
        sh_coeffs=sh,
    )


def small_camera(size=8, eye=(0.0, -4.0, 0.5), fov_deg=60.0):
    return Camera.look_at(eye, (0.0, 0.0, 0.0), width=size, height=size, fov_deg=fov_deg)


def fragment_margins(out, config=None):
    """Distances of a render from the places where it is not differentiable.

    Returns the smallest gap of any fragment's exponent to the cutoff, of
    any transmittance to the inclusion floor (in log space), of any colour
    to the clamp range, and of any two depths.
    """
    cfg = config or RasterConfig()
    tape = out.tape
    cutoff = -0.5 * cfg.cutoff_sigma**2
    power_gap, trans_gap = np.inf, np.inf
    for tile in tape.tiles:
        if len(tile.sel) == 0:
            continue
        k = tape.conic[tile.sel]
        dx, dy = tile.dx, tile.dy
        power = -0.5 * (k[:, 0, 0, None] * dx * dx + k[:, 1, 1, None] * dy * dy) - k[:, 0, 1, None] * dx * dy
        power_gap = min(power_gap, np.abs(power - cutoff).min())
        ap = np.where(power >= cutoff, tape.alpha[tile.sel, None] * np.exp(np.minimum(power, 0)), 0.0)
        Tb = np.cumprod(np.vstack([np.ones((1, ap.shape[1])), 1 - ap[:-1]]), axis=0)
        trans_gap = min(trans_gap, np.abs(np.log(Tb / cfg.min_transmittance)).min())
    vis = np.flatnonzero(tape.visible)
    raw_gap = np.inf
    if len(vis):
        raw = np.einsum("nk,nkc->nc", tape.basis[vis], tape.sh[vis]) + 0.5
        raw_gap = np.minimum(np.abs(raw), np.abs(raw - 1)).min()
    depth_gap = np.inf
    if len(vis) > 1:
        depth_gap = np.diff(np.sort(tape.t[vis, 2])).min()
    return power_gap, trans_gap, raw_gap, depth_gap


def smooth_enough(out, tol=1e-2):
    near_empty = (out.accum_alpha > 0) & (out.accum_alpha < 1e-4)
    return min(fragment_margins(out)) > tol and not near_empty.any()


def rel_err(a, b, floor=1e-3):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grads(loss, cloud, h=1e-6, order=2):
    """Finite differences of ``loss(cloud)`` for every attribute.

    ``order=4`` uses the five-point stencil, which tolerates a larger ``h`` and
    so keeps round-off well below tiny gradients on a large loss.
    """
    taps = {2: ((1, 0.5), (-1, -0.5)),
            4: ((2, -1 / 12), (1, 8 / 12), (-1, -8 / 12), (-2, 1 / 12))}[order]
    out = {}
    for name in GaussianCloud.PARAM_NAMES:
        arr = getattr(cloud, name)
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            keep = arr[idx]
            acc = 0.0
            for k, c in taps:
                arr[idx] = keep + k * h
                acc += c * loss(cloud)
            arr[idx] = keep
            g[idx] = acc / h
        out[name] = g
    return out


def gradient_case(seed):
    """A random tiny scene that stays clear of every non-smooth point, or None."""
    from guidedsplat.rasterizer import render

    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    cloud = random_cloud(rng, n, sh_degree=int(rng.integers(0, 3)))
    cam = small_camera()
    bg = rng.uniform(0, 1, 3)
    out = render(cloud, cam, bg)
    if not smooth_enough(out):
        return None
    wc = rng.normal(size=(8, 8, 3))
    wd = rng.normal(size=(8, 8))
    return cloud, cam, bg, wc, wd, out




def micro_dataset(seed=0, size=16, n_gaussians=40, n_gt=3, n_synthetic=3, n_test=2):
    """A very small rendered bench scene for fast training tests."""
    from guidedsplat import bench

    preset = bench.Preset("micro", size=size, n_gaussians=n_gaussians, n_gt=n_gt, n_synthetic=n_synthetic,
                          n_test=n_test, iterations=50, fov_deg=35.0)
    return bench.render_dataset(bench.make_scene(seed, preset.n_gaussians, preset.layout), preset, seed)
