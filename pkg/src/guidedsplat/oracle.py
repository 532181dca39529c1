"""Per-view uncertainty maps.

Two sources are supported: attention stacks supplied from an external
multi-view network (fused as a weighted average of min-max normalised
planes), and a reprojection-consistency check against ground-truth views
for when no attention data is available.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence

import numpy as np

from .scene import AttentionStack, Camera, UncertaintyMap, ViewRecord

DEFAULT_LAYER_WEIGHTS = {0: 0.25, 22: 0.75}
DEFAULT_SIGMA_PHOTO = 0.15


class OracleError(ValueError):
    pass


def normalize_plane(plane) -> np.ndarray:
    """Min-max normalise to [0, 1]; a constant plane maps to 0.5 everywhere."""
    plane = np.asarray(plane, dtype=np.float64)
    if not np.all(np.isfinite(plane)):
        raise OracleError("attention plane contains non-finite values")
    lo, hi = plane.min(), plane.max()
    if hi - lo <= 0:
        return np.full(plane.shape, 0.5)
    return np.clip((plane - lo) / (hi - lo), 0.0, 1.0)


def resize_bilinear(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling on pixel centres (edges clamped)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    H, W = out_hw
    if (h, w) == (H, W):
        return img.copy()
    ys = np.clip((np.arange(H) + 0.5) * h / H - 0.5, 0, h - 1)
    xs = np.clip((np.arange(W) + 0.5) * w / W - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    if img.ndim == 3:
        fy, fx = fy[..., None], fx[..., None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def fuse_uncertainty(stack: AttentionStack, layer_weights: Mapping[int, float] | None = None,
                     target_hw: tuple[int, int] | None = None) -> UncertaintyMap:
    """Weighted average of normalised attention planes, resampled to ``target_hw``."""
    weights = dict(DEFAULT_LAYER_WEIGHTS if layer_weights is None else layer_weights)
    if set(weights) != set(stack.layer_ids):
        raise OracleError(f"weights cover layers {sorted(weights)}, stack has {sorted(stack.layer_ids)}")
    total = sum(weights.values())
    if abs(total - 1.0) > 1e-6:
        raise OracleError(f"layer weights sum to {total}, expected 1")
    if any(w < 0 for w in weights.values()):
        raise OracleError("layer weights must be non-negative")
    fused = np.zeros(stack.planes.shape[1:])
    for lid, plane in zip(stack.layer_ids, stack.planes):
        fused += weights[lid] * normalize_plane(plane)
    if target_hw is not None:
        fused = resize_bilinear(fused, tuple(target_hw))
    return UncertaintyMap(np.clip(fused, 0.0, 1.0))


def parse_layer_weights(text: str) -> dict[int, float]:
    """Parse ``"0:0.25,22:0.75"`` into ``{0: 0.25, 22: 0.75}``."""
    weights = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        lid, sep, w = item.partition(":")
        if not sep:
            raise OracleError(f"layer weight {item!r} is not of the form layer:weight")
        try:
            weights[int(lid)] = float(w)
        except ValueError as exc:
            raise OracleError(f"bad layer weight {item!r}") from exc
    if not weights:
        raise OracleError("no layer weights given")
    return weights


def partition_chunks(view_ids: Sequence, chunk_size: int) -> list[list]:
    """Contiguous disjoint chunks; a trailing singleton is merged into the previous chunk."""
    if chunk_size < 2:
        raise OracleError(f"chunk_size must be at least 2, got {chunk_size}")
    ids = list(view_ids)
    chunks = [ids[i:i + chunk_size] for i in range(0, len(ids), chunk_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2].extend(chunks.pop())
    return chunks


def chunk_reference(chunk: Sequence):
    """Reference view of a chunk for attention extraction: its first member."""
    return chunk[0]


# ---------------------------------------------------------------------------
# reprojection-consistency fallback


def _pixel_rays(camera: Camera) -> np.ndarray:
    ys, xs = np.mgrid[0:camera.height, 0:camera.width]
    rays = np.empty((camera.height, camera.width, 3))
    rays[..., 0] = (xs + 0.5 - camera.cx) / camera.fx
    rays[..., 1] = (ys + 0.5 - camera.cy) / camera.fy
    rays[..., 2] = 1.0
    return rays


def _sample(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear lookup at continuous pixel coordinates (centres at +0.5)."""
    h, w = img.shape[:2]
    x = np.clip(u - 0.5, 0, w - 1)
    y = np.clip(v - 0.5, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(int), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(int), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    if img.ndim == 3:
        fx, fy = fx[..., None], fy[..., None]
    return ((img[y0, x0] * (1 - fx) + img[y0, x1] * fx) * (1 - fy)
            + (img[y1, x0] * (1 - fx) + img[y1, x1] * fx) * fy)


def reprojection_errors(view: ViewRecord, neighbors: Sequence[ViewRecord], *,
                        depth_rel_tol: float = 0.1, depth_abs_tol: float = 0.01) -> np.ndarray:
    """Per-neighbour RMS colour error, shape (len(neighbors), H, W); NaN where not visible.

    Inverse depth 0 is a point at infinity, so background pixels reproject
    through rotation only and can still be validated.
    """
    if view.inv_depth is None:
        raise OracleError(f"view {view.name!r} has no inverse depth")
    cam = view.camera
    zinv = np.maximum(np.asarray(view.inv_depth, dtype=np.float64), 0.0)
    rays = _pixel_rays(cam)
    # homogeneous world point (X * zinv, zinv)
    Xw = (rays - zinv[..., None] * cam.translation) @ cam.R
    errs = np.full((len(neighbors),) + cam.shape, np.nan)
    for k, nb in enumerate(neighbors):
        if nb.inv_depth is None:
            raise OracleError(f"neighbour view {nb.name!r} has no inverse depth")
        nc = nb.camera
        p = Xw @ nc.R.T + zinv[..., None] * nc.translation
        pz = p[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = nc.fx * p[..., 0] / pz + nc.cx
            v = nc.fy * p[..., 1] / pz + nc.cy
            pred_inv = zinv / pz
        ok = (pz > 1e-9) & (u >= 0) & (u <= nc.width) & (v >= 0) & (v <= nc.height)
        ok &= pred_inv <= 1.0 / nc.near
        u = np.where(ok, u, 0.5)
        v = np.where(ok, v, 0.5)
        seen_inv = _sample(np.asarray(nb.inv_depth, dtype=np.float64), u, v)
        ok &= np.abs(pred_inv - seen_inv) <= depth_rel_tol * np.maximum(pred_inv, seen_inv) + depth_abs_tol
        color = _sample(nb.image, u, v)
        e = np.sqrt(np.mean((color - view.image) ** 2, axis=-1))
        errs[k] = np.where(ok, e, np.nan)
    return errs


def reprojection_oracle(view: ViewRecord, neighbors: Sequence[ViewRecord],
                        sigma_photo: float = DEFAULT_SIGMA_PHOTO, **tol) -> UncertaintyMap:
    """Confidence ``exp(-e^2 / sigma^2)`` from the mean reprojected colour error ``e``.

    Pixels that land in no neighbour (or are occluded there) get confidence 0.
    """
    if not neighbors:
        raise OracleError("reprojection oracle needs at least one neighbour view")
    errs = reprojection_errors(view, neighbors, **tol)
    visible = ~np.isnan(errs)
    # sort before summing so the result does not depend on neighbour order
    summed = np.sort(np.where(visible, errs, 0.0), axis=0).sum(axis=0)
    count = visible.sum(axis=0)
    e = np.divide(summed, count, out=np.zeros_like(summed), where=count > 0)
    U = np.where(count > 0, np.exp(-(e**2) / sigma_photo**2), 0.0)
    return UncertaintyMap(U)


def nearest_neighbors(view: ViewRecord, candidates: Sequence[ViewRecord], k: int) -> list[ViewRecord]:
    """The ``k`` candidates whose camera centres are closest to ``view``'s."""
    c = view.camera.center
    d = [float(np.linalg.norm(v.camera.center - c)) for v in candidates]
    order = sorted(range(len(candidates)), key=lambda i: (d[i], i))
    return [candidates[i] for i in order[:k]]


# ---------------------------------------------------------------------------
# evaluation


def oracle_auroc(U, corruption_mask) -> float:
    """AUROC of the score ``1 - U`` for detecting corrupted pixels (ties count half)."""
    values = np.asarray(getattr(U, "values", U), dtype=np.float64)
    mask = np.asarray(corruption_mask).astype(bool)
    if values.shape != mask.shape:
        raise OracleError(f"uncertainty shape {values.shape} != mask shape {mask.shape}")
    score = (1.0 - values).ravel()
    pos = mask.ravel()
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise OracleError("corruption mask must contain both corrupted and clean pixels")
    order = np.argsort(score, kind="stable")
    s = score[order]
    p = pos[order]
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    pos_in = np.add.reduceat(p.astype(np.int64), starts)
    neg_in = np.add.reduceat((~p).astype(np.int64), starts)
    neg_below = np.cumsum(neg_in) - neg_in
    auc = np.sum(pos_in * (neg_below + 0.5 * neg_in)) / (n_pos * n_neg)
    return float(auc)


_VIRIDIS_ANCHORS = np.array([
    [0.267, 0.005, 0.329], [0.283, 0.141, 0.458], [0.254, 0.265, 0.530], [0.207, 0.372, 0.553],
    [0.164, 0.471, 0.558], [0.128, 0.567, 0.551], [0.135, 0.659, 0.518], [0.267, 0.749, 0.441],
    [0.478, 0.821, 0.318], [0.741, 0.873, 0.150], [0.993, 0.906, 0.144],
])


def colorize(U) -> np.ndarray:
    """Purple (uncertain) to yellow (confident) false-colour image."""
    values = np.clip(np.asarray(getattr(U, "values", U), dtype=np.float64), 0, 1)
    pos = values * (len(_VIRIDIS_ANCHORS) - 1)
    i0 = np.minimum(np.floor(pos).astype(int), len(_VIRIDIS_ANCHORS) - 2)
    f = (pos - i0)[..., None]
    return _VIRIDIS_ANCHORS[i0] * (1 - f) + _VIRIDIS_ANCHORS[i0 + 1] * f
