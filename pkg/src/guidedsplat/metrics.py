from __future__ import annotations

import math

import numpy as np

from .losses import perceptual, ssim_map
from .rasterizer import RasterConfig, render

PSNR_CAP = 99.0


def psnr(pred, gt) -> float:
    """Peak signal-to-noise ratio for [0, 1] images, capped at 99 dB."""
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return -10.0 * math.log10(mse)


def image_metrics(pred, gt) -> dict[str, float]:
    return {
        "psnr": psnr(pred, gt),
        "ssim": float(ssim_map(pred, gt).mean()),
        "perceptual_proxy": perceptual(pred, gt),
    }


def evaluate(cloud, test_views, background=(0.0, 0.0, 0.0), config: RasterConfig | None = None) -> dict[str, float]:
    """Mean PSNR / SSIM / perceptual-proxy of ``cloud`` renders over ``test_views``."""
    test_views = list(test_views)
    if not test_views:
        raise ValueError("evaluation needs at least one test view")
    rows = [image_metrics(render(cloud, v.camera, background, config).color, v.image) for v in test_views]
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
