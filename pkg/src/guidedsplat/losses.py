"""Training losses with hand-written gradients w.r.t. the rendered image.

Every public loss returns a scalar; the ``*_grad`` variants return
``(value, d value / d pred)``. Images are (H, W, 3) floats in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .scene import GaussianCloud, sigmoid

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    lambda_ssim: float = 0.2
    lambda_ssim_synth: float = 0.3
    lambda_lpips: float = 0.3
    lambda_depth0: float = 1.0
    lambda_depth1: float = 0.01
    lambda_opacity: float = 0.01
    lambda_scale: float = 0.01

    def __post_init__(self):
        vals = (self.lambda_ssim, self.lambda_ssim_synth, self.lambda_lpips, self.lambda_depth0,
                self.lambda_depth1, self.lambda_opacity, self.lambda_scale)
        if min(vals) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_ssim_synth + self.lambda_lpips >= 1:
            raise ValueError("lambda_ssim_synth + lambda_lpips must stay below 1")


def _check_shapes(a, b, what="images"):
    if a.shape != b.shape:
        raise ValueError(f"{what} differ in shape: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# SSIM


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


_WINDOW = gaussian_window()


def _blur(x: np.ndarray) -> np.ndarray:
    # zero padding, "same" output; the kernel is symmetric so this is self-adjoint
    y = correlate1d(x, _WINDOW, axis=0, mode="constant", cval=0.0)
    return correlate1d(y, _WINDOW, axis=1, mode="constant", cval=0.0)


def _ssim_parts(a, b):
    mu_a, mu_b = _blur(a), _blur(b)
    var_a = _blur(a * a) - mu_a**2
    var_b = _blur(b * b) - mu_b**2
    cov = _blur(a * b) - mu_a * mu_b
    num1 = 2 * mu_a * mu_b + SSIM_C1
    num2 = 2 * cov + SSIM_C2
    den1 = mu_a**2 + mu_b**2 + SSIM_C1
    den2 = var_a + var_b + SSIM_C2
    return mu_a, mu_b, cov, num1, num2, den1, den2


def ssim_map(a, b) -> np.ndarray:
    """Per-pixel SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    _, _, _, n1, n2, d1, d2 = _ssim_parts(a, b)
    return np.clip(n1 * n2 / (d1 * d2), -1.0, 1.0).mean(axis=-1)


def ssim_vjp(a, b, grad_map) -> np.ndarray:
    """Pull a (H, W) gradient on :func:`ssim_map` back to ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mu_a, mu_b, _, n1, n2, d1, d2 = _ssim_parts(a, b)
    s = n1 * n2 / (d1 * d2)
    g = np.where((s > -1.0) & (s < 1.0), 1.0, 0.0) * grad_map[..., None] / a.shape[-1]
    # s = n1 n2 / (d1 d2); partials w.r.t. the local statistics
    g_n1 = g * n2 / (d1 * d2)
    g_n2 = g * n1 / (d1 * d2)
    g_d1 = -g * s / d1
    g_d2 = -g * s / d2
    g_cov = 2 * g_n2
    g_var_a = g_d2
    g_mu_a = 2 * mu_b * g_n1 + 2 * mu_a * g_d1 - 2 * mu_a * g_var_a - mu_b * g_cov
    return _blur(g_mu_a) + 2 * a * _blur(g_var_a) + b * _blur(g_cov)


# ---------------------------------------------------------------------------
# photometric / depth


def photometric_loss_grad(pred, gt, lambda_ssim: float):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_shapes(pred, gt)
    diff = pred - gt
    l1 = np.abs(diff).mean()
    smap = ssim_map(pred, gt)
    value = (1 - lambda_ssim) * l1 + lambda_ssim * (1 - smap).mean()
    grad = (1 - lambda_ssim) * np.sign(diff) / diff.size
    if lambda_ssim:
        grad = grad + ssim_vjp(pred, gt, np.full(smap.shape, -lambda_ssim / smap.size))
    return float(value), grad


def photometric_loss(pred, gt, lambda_ssim: float = 0.2) -> float:
    """``(1 - l) * mean|pred - gt| + l * mean(1 - SSIM)``."""
    return photometric_loss_grad(pred, gt, lambda_ssim)[0]


def depth_loss_grad(pred_inv_depth, inv_depth, mask):
    pred = np.asarray(pred_inv_depth, dtype=np.float64)
    ref = np.asarray(inv_depth, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    _check_shapes(pred, ref, "inverse depth maps")
    _check_shapes(pred, m, "inverse depth and mask")
    norm = max(m.sum(), 1.0)
    diff = pred - ref
    return float((np.abs(diff) * m).sum() / norm), np.sign(diff) * m / norm


def depth_loss(pred_inv_depth, inv_depth, mask) -> float:
    """Masked L1 between rendered and reference inverse depth, averaged over the mask."""
    return depth_loss_grad(pred_inv_depth, inv_depth, mask)[0]


def depth_weight(t: float, weights: LossWeights | None = None) -> float:
    """Exponentially annealed depth weight, ``l0 * (l1 / l0) ** t``."""
    w = weights or LossWeights()
    if w.lambda_depth0 == 0:
        return 0.0
    return float(w.lambda_depth0 * (w.lambda_depth1 / w.lambda_depth0) ** t)


# ---------------------------------------------------------------------------
# perceptual proxy

PERCEPTUAL_SCALES = 3
_GRAD_EPS = 1e-6


def _pool2(x):
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _pool2_adjoint(g, shape):
    out = np.zeros(shape)
    h, w = g.shape[0] * 2, g.shape[1] * 2
    for dy in (0, 1):
        for dx in (0, 1):
            out[dy:h:2, dx:w:2] += 0.25 * g
    return out


def _box3(x):
    # valid 3x3 mean
    h, w = x.shape[:2]
    out = np.zeros((h - 2, w - 2) + x.shape[2:])
    for dy in range(3):
        for dx in range(3):
            out += x[dy:dy + h - 2, dx:dx + w - 2]
    return out / 9.0


def _box3_adjoint(g, shape):
    out = np.zeros(shape)
    h, w = shape[:2]
    for dy in range(3):
        for dx in range(3):
            out[dy:dy + h - 2, dx:dx + w - 2] += g / 9.0
    return out


def _grad_mag(x):
    gx = x[:-1, 1:] - x[:-1, :-1]
    gy = x[1:, :-1] - x[:-1, :-1]
    return np.sqrt(gx * gx + gy * gy + _GRAD_EPS), gx, gy


def _grad_mag_adjoint(g, gx, gy, mag, shape):
    out = np.zeros(shape)
    ggx = g * gx / mag
    ggy = g * gy / mag
    out[:-1, 1:] += ggx
    out[:-1, :-1] -= ggx + ggy
    out[1:, :-1] += ggy
    return out


def perceptual_grad(pred, gt):
    """Multi-scale fixed-filter feature distance and its gradient w.r.t. ``pred``.

    At scales 1, 1/2 and 1/4 the images are compared through two feature maps,
    gradient magnitude and 3x3 local mean; each term is a mean squared
    difference and the result is averaged over features and scales.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_shapes(pred, gt)
    levels_p, levels_g = [pred], [gt]
    for _ in range(PERCEPTUAL_SCALES - 1):
        levels_p.append(_pool2(levels_p[-1]))
        levels_g.append(_pool2(levels_g[-1]))

    terms = []
    level_grads = []
    for p, q in zip(levels_p, levels_g):
        g = np.zeros(p.shape)
        if p.shape[0] >= 2 and p.shape[1] >= 2:
            mp, gx, gy = _grad_mag(p)
            d = mp - _grad_mag(q)[0]
            terms.append((d * d).mean())
            g += _grad_mag_adjoint(2 * d / d.size, gx, gy, mp, p.shape)
        if p.shape[0] >= 3 and p.shape[1] >= 3:
            d = _box3(p) - _box3(q)
            terms.append((d * d).mean())
            g += _box3_adjoint(2 * d / d.size, p.shape)
        level_grads.append(g)
    if not terms:
        return 0.0, np.zeros_like(pred)
    for level in range(len(levels_p) - 1, 0, -1):
        level_grads[level - 1] += _pool2_adjoint(level_grads[level], levels_p[level - 1].shape)
    return float(sum(terms) / len(terms)), level_grads[0] / len(terms)


def perceptual(pred, gt) -> float:
    """Fixed-filter stand-in for a learned perceptual metric ("perceptual-proxy")."""
    return perceptual_grad(pred, gt)[0]


# ---------------------------------------------------------------------------
# synthetic-view loss


def synthetic_loss_grad(pred, synth, U, weights: LossWeights | None = None):
    w = weights or LossWeights()
    pred = np.asarray(pred, dtype=np.float64)
    synth = np.asarray(synth, dtype=np.float64)
    _check_shapes(pred, synth)
    U = np.asarray(getattr(U, "values", U), dtype=np.float64)
    if U.shape != pred.shape[:2]:
        raise ValueError(f"uncertainty map shape {U.shape} does not match image {pred.shape[:2]}")
    if not np.all(np.isfinite(U)) or U.min() < 0 or U.max() > 1:
        raise ValueError("uncertainty map values must lie in [0, 1]")

    l1_weight = 1 - w.lambda_ssim_synth - w.lambda_lpips
    diff = pred - synth
    l1 = (np.abs(diff) * U[..., None]).mean()
    grad = l1_weight * np.sign(diff) * U[..., None] / diff.size
    value = l1_weight * l1
    if w.lambda_ssim_synth:
        smap = ssim_map(pred, synth)
        value += w.lambda_ssim_synth * ((1 - smap) * U).mean()
        grad = grad + ssim_vjp(pred, synth, -w.lambda_ssim_synth * U / U.size)
    u_bar = U.mean()
    if w.lambda_lpips and u_bar > 0:
        pv, pg = perceptual_grad(pred, synth)
        value += w.lambda_lpips * u_bar * pv
        grad = grad + w.lambda_lpips * u_bar * pg
    return float(value), grad


def synthetic_loss(pred, synth, U, weights: LossWeights | None = None) -> float:
    """Uncertainty-weighted L1 + SSIM on a synthetic view plus a mean-U scaled perceptual term."""
    return synthetic_loss_grad(pred, synth, U, weights)[0]


# ---------------------------------------------------------------------------
# regulariser and total


def regularizer_grad(cloud: GaussianCloud, lambda_opacity: float, lambda_scale: float):
    grads = {k: np.zeros_like(v) for k, v in cloud.params().items()}
    if cloud.count == 0:
        return 0.0, grads
    op = sigmoid(cloud.opacity_logits)
    sc = np.exp(cloud.log_scales)
    value = lambda_opacity * op.mean() + lambda_scale * sc.mean()
    grads["opacity_logits"] = lambda_opacity * op * (1 - op) / op.size
    grads["log_scales"] = lambda_scale * sc / sc.size
    return float(value), grads


def regularizer(cloud: GaussianCloud, lambda_opacity: float = 0.01, lambda_scale: float = 0.01) -> float:
    return regularizer_grad(cloud, lambda_opacity, lambda_scale)[0]


@dataclass
class LossResult:
    value: float
    branch: str
    d_color: np.ndarray
    d_inv_depth: np.ndarray | None
    param_grads: dict
    terms: dict


def coverage_mask(accum_alpha, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(accum_alpha) >= threshold).astype(np.float64)


def total_loss(render_out, view, cloud: GaussianCloud, weights: LossWeights, t: float,
               *, uncertainty=None, use_depth: bool = True) -> LossResult:
    """Loss for one sampled view; the branch follows the view's role.

    ``render_out`` is a :class:`~guidedsplat.rasterizer.RenderOutput`;
    ``uncertainty`` overrides ``view.uncertainty`` on the synthetic branch.
    """
    from .scene import Role

    reg, reg_grads = regularizer_grad(cloud, weights.lambda_opacity, weights.lambda_scale)
    pred = render_out.color
    terms = {"regularizer": reg}
    if view.role is Role.SYNTHETIC:
        U = uncertainty if uncertainty is not None else view.uncertainty
        if U is None:
            raise ValueError(f"synthetic view {view.name!r} has no uncertainty map and no oracle is configured")
        syn, g_color = synthetic_loss_grad(pred, view.image, U, weights)
        terms["synthetic"] = syn
        return LossResult(syn + reg, "synthetic", g_color, None, reg_grads, terms)
    if view.role is not Role.GROUND_TRUTH:
        raise ValueError(f"view {view.name!r} with role {view.role.value} cannot be trained on")

    photo, g_color = photometric_loss_grad(pred, view.image, weights.lambda_ssim)
    terms["photometric"] = photo
    value = photo + reg
    g_depth = None
    lam = depth_weight(t, weights)
    terms["lambda_depth"] = lam
    if use_depth and view.inv_depth is not None and lam > 0:
        mask = coverage_mask(render_out.accum_alpha)
        if view.depth_mask is not None:
            mask = mask * (np.asarray(view.depth_mask) > 0)
        dl, gd = depth_loss_grad(render_out.expected_inv_depth, view.inv_depth, mask)
        terms["depth"] = dl
        value += lam * dl
        g_depth = lam * gd
    return LossResult(value, "ground_truth", g_color, g_depth, reg_grads, terms)
