"""Tile-based Gaussian splatting with an analytic backward pass.

Forward model per pixel (fragments sorted front to back by camera depth):

    a_i' = a_i * exp(-0.5 d^T conic_i d)          (zero outside 3 sigma)
    T_i  = prod_{j<i} (1 - a_j')
    C    = sum_i T_i a_i' c_i + T_final * background

Fragments are only blended while ``T_i >= min_transmittance``; the backward
pass truncates at exactly the same fragment, so finite differences agree
with the analytic gradients away from the cutoff boundaries.

Pixel ``(row, col)`` has its centre at ``(col + 0.5, row + 0.5)``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scene import Camera, GaussianCloud, quat_to_rotmat, sigmoid
from .tensorfile import write_tensor

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)


@dataclass
class RasterConfig:
    tile_size: int = 16
    cov2d_blur: float = 0.3
    det_floor: float = 1e-8
    cutoff_sigma: float = 3.0
    min_transmittance: float = 1e-4
    depth_eps: float = 1e-6
    # Gaussians whose centre lies further than this (in units of the half
    # field of view) from the optical axis are culled.
    frustum_margin: float = 1.3
    workers: int = 1


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    inv_depth: float
    color: np.ndarray | None = None
    alpha: float | None = None
    source_index: int = -1


@dataclass
class RenderOutput:
    color: np.ndarray
    expected_inv_depth: np.ndarray
    accum_alpha: np.ndarray
    final_transmittance: np.ndarray
    tape: "RenderTape" = field(repr=False)

    def dump(self, directory) -> None:
        directory = Path(directory)
        write_tensor(directory / "color.ogt", self.color)
        write_tensor(directory / "expected_inv_depth.ogt", self.expected_inv_depth)
        write_tensor(directory / "accum_alpha.ogt", self.accum_alpha)


# ---------------------------------------------------------------------------
# per-Gaussian geometry


def covariance3d(log_scales, rotation) -> np.ndarray:
    """World covariance ``R diag(s^2) R^T`` with ``s = exp(log_scales)``."""
    s = np.exp(np.asarray(log_scales, dtype=np.float64))
    R = quat_to_rotmat(rotation / np.linalg.norm(rotation, axis=-1, keepdims=True))
    M = R * s[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def _jacobian(camera: Camera, t: np.ndarray) -> np.ndarray:
    tx, ty, tz = t[..., 0], t[..., 1], t[..., 2]
    J = np.zeros(t.shape[:-1] + (2, 3))
    J[..., 0, 0] = camera.fx / tz
    J[..., 0, 2] = -camera.fx * tx / tz**2
    J[..., 1, 1] = camera.fy / tz
    J[..., 1, 2] = -camera.fy * ty / tz**2
    return J


def project_gaussian(camera: Camera, mu, sigma, config: RasterConfig | None = None) -> Splat2D | None:
    """EWA projection of one Gaussian; ``None`` when culled."""
    config = config or RasterConfig()
    t = camera.world_to_camera(np.asarray(mu, dtype=np.float64))
    if t[2] <= camera.near or t[2] >= camera.far:
        return None
    if (abs(t[0] / t[2]) > config.frustum_margin * camera.width / (2 * camera.fx)
            or abs(t[1] / t[2]) > config.frustum_margin * camera.height / (2 * camera.fy)):
        return None
    JW = _jacobian(camera, t) @ camera.R
    cov = JW @ np.asarray(sigma, dtype=np.float64) @ JW.T + config.cov2d_blur * np.eye(2)
    if np.linalg.det(cov) <= config.det_floor:
        return None
    mean2d = np.array([camera.fx * t[0] / t[2] + camera.cx, camera.fy * t[1] / t[2] + camera.cy])
    return Splat2D(mean2d=mean2d, cov2d=cov, depth=float(t[2]), inv_depth=1.0 / t[2])


# ---------------------------------------------------------------------------
# spherical harmonics


def sh_basis(dirs: np.ndarray, degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Real SH basis values (N, K) and their derivatives w.r.t. the direction (N, K, 3)."""
    n = len(dirs)
    k = (degree + 1) ** 2
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    B = np.zeros((n, k))
    dB = np.zeros((n, k, 3))
    B[:, 0] = SH_C0
    if degree >= 1:
        B[:, 1] = -SH_C1 * y
        B[:, 2] = SH_C1 * z
        B[:, 3] = -SH_C1 * x
        dB[:, 1, 1] = -SH_C1
        dB[:, 2, 2] = SH_C1
        dB[:, 3, 0] = -SH_C1
    if degree >= 2:
        c = SH_C2
        B[:, 4] = c[0] * x * y
        B[:, 5] = c[1] * y * z
        B[:, 6] = c[2] * (2 * z * z - x * x - y * y)
        B[:, 7] = c[3] * x * z
        B[:, 8] = c[4] * (x * x - y * y)
        dB[:, 4, 0], dB[:, 4, 1] = c[0] * y, c[0] * x
        dB[:, 5, 1], dB[:, 5, 2] = c[1] * z, c[1] * y
        dB[:, 6, 0], dB[:, 6, 1], dB[:, 6, 2] = -2 * c[2] * x, -2 * c[2] * y, 4 * c[2] * z
        dB[:, 7, 0], dB[:, 7, 2] = c[3] * z, c[3] * x
        dB[:, 8, 0], dB[:, 8, 1] = 2 * c[4] * x, -2 * c[4] * y
    return B, dB


def rgb_to_sh_dc(rgb) -> np.ndarray:
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def _rotmat_vjp(q: np.ndarray, gR: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. (unnormalised-free) quaternion components given dL/dR."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = gR
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
              + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
              - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
              + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([gw, gx, gy, gz], axis=1)


# ---------------------------------------------------------------------------
# render


@dataclass
class _Tile:
    y0: int
    x0: int
    h: int
    w: int
    sel: np.ndarray          # Gaussian indices, front to back
    dx: np.ndarray | None = None
    dy: np.ndarray | None = None
    g: np.ndarray | None = None
    ap: np.ndarray | None = None
    Tb: np.ndarray | None = None
    w_blend: np.ndarray | None = None


@dataclass
class RenderTape:
    """Everything the backward pass needs from one forward call."""

    camera: Camera
    background: np.ndarray
    config: RasterConfig
    count: int
    visible: np.ndarray          # (N,) bool
    sh_degree: int
    # per-Gaussian intermediates (full length N; garbage where not visible)
    t: np.ndarray
    qn: np.ndarray
    qnorm: np.ndarray
    Rq: np.ndarray
    scales: np.ndarray
    M: np.ndarray
    sigma: np.ndarray
    JW: np.ndarray
    conic: np.ndarray
    mean2d: np.ndarray
    inv_depth: np.ndarray
    colors: np.ndarray
    color_mask: np.ndarray
    sh: np.ndarray
    basis: np.ndarray
    dbasis: np.ndarray
    dirs: np.ndarray
    dist: np.ndarray
    alpha: np.ndarray
    tiles: list[_Tile]
    accum: np.ndarray
    inv_depth_sum: np.ndarray


def _map(fn, items, workers):
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


def render(cloud: GaussianCloud, camera: Camera, background=(0.0, 0.0, 0.0),
           config: RasterConfig | None = None) -> RenderOutput:
    config = config or RasterConfig()
    cloud.check_finite()
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    H, W = camera.height, camera.width
    n = cloud.count
    Rc = camera.R

    t = cloud.positions @ Rc.T + camera.translation
    tz = t[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        visible = (tz > camera.near) & (tz < camera.far)
        visible &= np.abs(t[:, 0] / tz) <= config.frustum_margin * W / (2 * camera.fx)
        visible &= np.abs(t[:, 1] / tz) <= config.frustum_margin * H / (2 * camera.fy)
    tz_safe = np.where(visible, tz, 1.0)
    t_safe = np.where(visible[:, None], t, np.array([0.0, 0.0, 1.0]))

    qnorm = np.linalg.norm(cloud.rotations, axis=1) if n else np.zeros(0)
    qn = cloud.rotations / np.maximum(qnorm, 1e-300)[:, None]
    Rq = quat_to_rotmat(qn)
    scales = np.exp(cloud.log_scales)
    M = Rq * scales[:, None, :]
    sigma = M @ np.swapaxes(M, 1, 2)
    J = _jacobian(camera, t_safe)
    JW = J @ Rc
    cov = JW @ sigma @ np.swapaxes(JW, 1, 2)
    cov[:, 0, 0] += config.cov2d_blur
    cov[:, 1, 1] += config.cov2d_blur
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    visible &= det > config.det_floor
    det_safe = np.where(visible, det, 1.0)
    conic = np.empty((n, 2, 2))
    conic[:, 0, 0] = cov[:, 1, 1] / det_safe
    conic[:, 1, 1] = cov[:, 0, 0] / det_safe
    conic[:, 0, 1] = conic[:, 1, 0] = -cov[:, 0, 1] / det_safe
    mean2d = np.stack([camera.fx * t_safe[:, 0] / tz_safe + camera.cx,
                       camera.fy * t_safe[:, 1] / tz_safe + camera.cy], axis=1)
    inv_depth = 1.0 / tz_safe

    diff = cloud.positions - camera.center
    dist = np.linalg.norm(diff, axis=1)
    dirs = diff / np.maximum(dist, 1e-12)[:, None]
    basis, dbasis = sh_basis(dirs, cloud.sh_degree)
    raw = np.einsum("nk,nkc->nc", basis, cloud.sh_coeffs) + 0.5
    colors = np.clip(raw, 0.0, 1.0)
    color_mask = (raw > 0.0) & (raw < 1.0)
    alpha = sigmoid(cloud.opacity_logits)

    # depth order, ties broken by storage index
    vis_idx = np.flatnonzero(visible)
    order = vis_idx[np.lexsort((vis_idx, tz[vis_idx]))]
    ext_x = config.cutoff_sigma * np.sqrt(np.maximum(cov[:, 0, 0], 0))
    ext_y = config.cutoff_sigma * np.sqrt(np.maximum(cov[:, 1, 1], 0))

    ts = config.tile_size
    tiles = []
    for y0 in range(0, H, ts):
        for x0 in range(0, W, ts):
            h, w = min(ts, H - y0), min(ts, W - x0)
            u, v = mean2d[order, 0], mean2d[order, 1]
            hit = ((u + ext_x[order] >= x0 + 0.5) & (u - ext_x[order] <= x0 + w - 0.5)
                   & (v + ext_y[order] >= y0 + 0.5) & (v - ext_y[order] <= y0 + h - 0.5))
            tiles.append(_Tile(y0, x0, h, w, order[hit]))

    color = np.empty((H, W, 3))
    accum = np.zeros((H, W))
    final_T = np.ones((H, W))
    inv_sum = np.zeros((H, W))
    max_power = -0.5 * config.cutoff_sigma**2

    def forward_tile(tile: _Tile):
        ys, xs = np.mgrid[tile.y0:tile.y0 + tile.h, tile.x0:tile.x0 + tile.w]
        px, py = xs.ravel() + 0.5, ys.ravel() + 0.5
        sel = tile.sel
        npx = len(px)
        if len(sel) == 0:
            return np.zeros((npx, 3)), np.zeros(npx), np.ones(npx), np.zeros(npx)
        dx = px[None, :] - mean2d[sel, 0][:, None]
        dy = py[None, :] - mean2d[sel, 1][:, None]
        k = conic[sel]
        power = -0.5 * (k[:, 0, 0, None] * dx * dx + k[:, 1, 1, None] * dy * dy) - k[:, 0, 1, None] * dx * dy
        g = np.where(power >= max_power, np.exp(np.minimum(power, 0.0)), 0.0)
        ap = alpha[sel, None] * g
        one_minus = 1.0 - ap
        Tb = np.empty_like(ap)
        Tb[0] = 1.0
        if len(sel) > 1:
            np.cumprod(one_minus[:-1], axis=0, out=Tb[1:])
        included = Tb >= config.min_transmittance
        wb = np.where(included, Tb * ap, 0.0)
        Tf = np.prod(np.where(included, one_minus, 1.0), axis=0)
        tile.dx, tile.dy, tile.g, tile.ap, tile.Tb, tile.w_blend = dx, dy, g, ap, np.where(included, Tb, 0.0), wb
        return wb.T @ colors[sel], wb.sum(axis=0), Tf, wb.T @ inv_depth[sel]

    results = _map(forward_tile, tiles, config.workers)
    for tile, (c, a, tf, s) in zip(tiles, results):
        sl = (slice(tile.y0, tile.y0 + tile.h), slice(tile.x0, tile.x0 + tile.w))
        color[sl] = (c + tf[:, None] * bg).reshape(tile.h, tile.w, 3)
        accum[sl] = a.reshape(tile.h, tile.w)
        final_T[sl] = tf.reshape(tile.h, tile.w)
        inv_sum[sl] = s.reshape(tile.h, tile.w)

    exp_inv = inv_sum / np.maximum(accum, config.depth_eps)
    tape = RenderTape(
        camera=camera, background=bg, config=config, count=n, visible=visible, sh_degree=cloud.sh_degree,
        t=t_safe, qn=qn, qnorm=qnorm, Rq=Rq, scales=scales, M=M, sigma=sigma, JW=JW, conic=conic,
        mean2d=mean2d, inv_depth=inv_depth, colors=colors, color_mask=color_mask, sh=cloud.sh_coeffs.copy(),
        basis=basis, dbasis=dbasis, dirs=dirs, dist=dist, alpha=alpha, tiles=tiles, accum=accum,
        inv_depth_sum=inv_sum,
    )
    return RenderOutput(color=color, expected_inv_depth=exp_inv, accum_alpha=accum,
                        final_transmittance=final_T, tape=tape)


# ---------------------------------------------------------------------------
# backward


class TapeMismatch(ValueError):
    pass


def render_backward(tape: RenderTape, dL_dcolor, dL_dinv_depth=None,
                    cloud: GaussianCloud | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every optimisable Gaussian attribute.

    ``dL_dcolor`` is (H, W, 3) and ``dL_dinv_depth`` (H, W) or ``None``. The
    returned dict uses the attribute names of :class:`GaussianCloud`.
    """
    cam = tape.camera
    H, W = cam.height, cam.width
    if cloud is not None and (cloud.count != tape.count or cloud.sh_degree != tape.sh_degree):
        raise TapeMismatch(
            f"tape was recorded for {tape.count} Gaussians (SH {tape.sh_degree}), "
            f"got {cloud.count} (SH {cloud.sh_degree})"
        )
    gC = np.asarray(dL_dcolor, dtype=np.float64)
    if gC.shape != (H, W, 3):
        raise TapeMismatch(f"dL/dcolor has shape {gC.shape}, render was {(H, W, 3)}")
    gD = np.zeros((H, W)) if dL_dinv_depth is None else np.asarray(dL_dinv_depth, dtype=np.float64)
    if gD.shape != (H, W):
        raise TapeMismatch(f"dL/dinv_depth has shape {gD.shape}, render was {(H, W)}")

    n = tape.count
    cfg = tape.config
    eps = cfg.depth_eps
    denom = np.maximum(tape.accum, eps)
    gS = gD / denom
    gA = np.where(tape.accum > eps, -gD * tape.inv_depth_sum / denom**2, 0.0)
    gA = gA - gC @ tape.background   # T_final = 1 - accum carries the background

    def backward_tile(tile: _Tile):
        sel = tile.sel
        if len(sel) == 0:
            return None
        sl = (slice(tile.y0, tile.y0 + tile.h), slice(tile.x0, tile.x0 + tile.w))
        gCt = gC[sl].reshape(-1, 3)
        gSt = gS[sl].ravel()
        gAt = gA[sl].ravel()
        wb, ap, Tb, g = tile.w_blend, tile.ap, tile.Tb, tile.g
        c = tape.colors[sel]
        val = c @ gCt.T + tape.inv_depth[sel, None] * gSt[None, :] + gAt[None, :]
        g_color = wb @ gCt
        g_inv = wb @ gSt
        vw = val * wb
        behind = np.cumsum(vw[::-1], axis=0)[::-1] - vw
        one_minus = 1.0 - ap
        with np.errstate(divide="ignore", invalid="ignore"):
            g_ap = np.where(Tb > 0, Tb * val - np.where(one_minus > 0, behind / one_minus, 0.0), 0.0)
        g_alpha = (g_ap * g).sum(axis=1)
        g_pow = g_ap * ap
        dx, dy = tile.dx, tile.dy
        k = tape.conic[sel]
        g_u = (g_pow * (k[:, 0, 0, None] * dx + k[:, 0, 1, None] * dy)).sum(axis=1)
        g_v = (g_pow * (k[:, 0, 1, None] * dx + k[:, 1, 1, None] * dy)).sum(axis=1)
        g_k00 = -0.5 * (g_pow * dx * dx).sum(axis=1)
        g_k01 = -0.5 * (g_pow * dx * dy).sum(axis=1)
        g_k11 = -0.5 * (g_pow * dy * dy).sum(axis=1)
        return sel, g_color, g_inv, g_alpha, g_u, g_v, g_k00, g_k01, g_k11

    g_color = np.zeros((n, 3))
    g_inv = np.zeros(n)
    g_alpha = np.zeros(n)
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 2, 2))
    # reduction in fixed tile order keeps results independent of worker count
    for res in _map(backward_tile, tape.tiles, cfg.workers):
        if res is None:
            continue
        sel, gc, gi, ga, gu, gv, k00, k01, k11 = res
        g_color[sel] += gc
        g_inv[sel] += gi
        g_alpha[sel] += ga
        g_mean[sel, 0] += gu
        g_mean[sel, 1] += gv
        g_conic[sel, 0, 0] += k00
        g_conic[sel, 0, 1] += k01
        g_conic[sel, 1, 0] += k01
        g_conic[sel, 1, 1] += k11

    vis = tape.visible
    K = tape.conic
    g_cov = -K @ g_conic @ K
    JW = tape.JW
    g_sigma = np.swapaxes(JW, 1, 2) @ g_cov @ JW
    g_JW = 2.0 * g_cov @ JW @ tape.sigma
    g_J = g_JW @ cam.R.T
    tx, ty, tz = tape.t[:, 0], tape.t[:, 1], tape.t[:, 2]
    fx, fy = cam.fx, cam.fy
    g_t = np.zeros((n, 3))
    g_t[:, 0] = g_J[:, 0, 2] * (-fx / tz**2) + g_mean[:, 0] * fx / tz
    g_t[:, 1] = g_J[:, 1, 2] * (-fy / tz**2) + g_mean[:, 1] * fy / tz
    g_t[:, 2] = (g_J[:, 0, 0] * (-fx / tz**2) + g_J[:, 0, 2] * (2 * fx * tx / tz**3)
                 + g_J[:, 1, 1] * (-fy / tz**2) + g_J[:, 1, 2] * (2 * fy * ty / tz**3)
                 - g_mean[:, 0] * fx * tx / tz**2 - g_mean[:, 1] * fy * ty / tz**2
                 - g_inv / tz**2)
    g_pos = g_t @ cam.R

    # colour: clamp mask, SH coefficients and the view direction
    g_raw = g_color * tape.color_mask
    g_sh = tape.basis[:, :, None] * g_raw[:, None, :]
    g_basis = np.einsum("nkc,nc->nk", tape.sh, g_raw)
    g_dir = np.einsum("nk,nkd->nd", g_basis, tape.dbasis)
    d = tape.dirs
    g_pos += (g_dir - d * np.sum(d * g_dir, axis=1, keepdims=True)) / np.maximum(tape.dist, 1e-12)[:, None]

    g_M = 2.0 * g_sigma @ tape.M
    g_scales = np.sum(g_M * tape.Rq, axis=1)
    g_log_scales = g_scales * tape.scales
    g_Rq = g_M * tape.scales[:, None, :]
    g_qn = _rotmat_vjp(tape.qn, g_Rq)
    qn = tape.qn
    g_rot = (g_qn - qn * np.sum(qn * g_qn, axis=1, keepdims=True)) / np.maximum(tape.qnorm, 1e-300)[:, None]
    g_logit = g_alpha * tape.alpha * (1.0 - tape.alpha)

    grads = {
        "positions": g_pos,
        "log_scales": g_log_scales,
        "rotations": g_rot,
        "opacity_logits": g_logit,
        "sh_coeffs": g_sh,
    }
    for arr in grads.values():
        arr[~vis] = 0.0
    return grads
