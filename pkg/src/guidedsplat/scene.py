"""Scene domain types and on-disk scene manifests.

Quaternions are (w, x, y, z) with the Hamilton product; camera rotations map
world to camera coordinates: ``x_cam = R(q) @ x_world + t``.
"""

from __future__ import annotations

import enum
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .tensorfile import TensorFormatError, read_tensor, write_tensor

MANIFEST_NAME = "scene.json"
MANIFEST_FORMAT = "guidedsplat-scene/1"


class SceneError(Exception):
    """Malformed, missing or inconsistent scene data."""


# ---------------------------------------------------------------------------
# quaternion helpers


def normalize_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) unit quaternions, shape (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quat_to_rotmat` for a single 3x3 matrix (w >= 0)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return normalize_quat(q if q[0] >= 0 else -q)


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(4))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if not (self.fx > 0 and self.fy > 0):
            raise SceneError(f"camera focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.near < self.far):
            raise SceneError(f"camera needs 0 < near < far, got near={self.near}, far={self.far}")
        if self.width <= 0 or self.height <= 0:
            raise SceneError(f"camera size must be positive, got {self.width}x{self.height}")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise SceneError(f"camera rotation is not a unit quaternion: {self.rotation}")

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.R.T @ self.translation

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.translation

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "quat": self.rotation.tolist(), "trans": self.translation.tolist(),
            "near": self.near, "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
            rotation=np.array(d["quat"], dtype=np.float64),
            translation=np.array(d["trans"], dtype=np.float64),
            near=float(d["near"]), far=float(d["far"]),
        )

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, fov_deg: float = 60.0,
                width: int = 64, height: int = 64, near: float = 0.05, far: float = 100.0) -> "Camera":
        """Pinhole camera at ``eye`` looking at ``target`` (+z forward, +y down)."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(fx=f, fy=f, cx=width / 2, cy=height / 2, width=width, height=height,
                   rotation=rotmat_to_quat(R), translation=-R @ eye, near=near, far=far)


def project_point(camera: Camera, p) -> tuple[float, float, float]:
    """Pixel coordinates ``(u, v)`` and camera depth ``z`` of a world point.

    Points behind the camera come back with ``z <= 0``; culling is the caller's job.
    """
    x, y, z = camera.world_to_camera(np.asarray(p, dtype=np.float64).reshape(3))
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * x / z + camera.cx
        v = camera.fy * y / z + camera.cy
    return float(u), float(v), float(z)


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


@dataclass
class GaussianCloud:
    """Optimizable Gaussians. ``sh_coeffs`` has shape (N, (degree+1)**2, 3)."""

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        sh = np.asarray(self.sh_coeffs, dtype=np.float64)
        self.sh_coeffs = sh.reshape(n, -1, 3) if n else sh.reshape(0, sh.shape[1] if sh.ndim == 3 else 1, 3)
        if self.sh_coeffs.shape[1] not in (1, 4, 9):
            raise SceneError(f"unsupported SH coefficient count {self.sh_coeffs.shape[1]}")

    PARAM_NAMES = ("positions", "log_scales", "rotations", "opacity_logits", "sh_coeffs")

    @property
    def count(self) -> int:
        return len(self.positions)

    def __len__(self) -> int:
        return self.count

    @property
    def sh_degree(self) -> int:
        return {1: 0, 4: 1, 9: 2}[self.sh_coeffs.shape[1]]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @classmethod
    def empty(cls, sh_degree: int = 1) -> "GaussianCloud":
        k = sh_coeff_count(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, k, 3)))

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(**{k: v.copy() for k, v in self.params().items()})

    def permuted(self, order) -> "GaussianCloud":
        return GaussianCloud(**{k: v[order].copy() for k, v in self.params().items()})

    def normalize_rotations(self) -> None:
        self.rotations /= np.linalg.norm(self.rotations, axis=1, keepdims=True)

    def check_finite(self) -> None:
        for name, arr in self.params().items():
            bad = ~np.isfinite(arr.reshape(self.count, arr[0].size if self.count else 0)).all(axis=1)
            if bad.any():
                raise FloatingPointError(f"non-finite {name} at Gaussian index {int(np.flatnonzero(bad)[0])}")

    def pack(self) -> np.ndarray:
        """Flatten to an (N, 11 + 3K) row-per-Gaussian array."""
        return np.concatenate([
            self.positions, self.log_scales, self.rotations,
            self.opacity_logits[:, None], self.sh_coeffs.reshape(self.count, 3 * self.sh_coeffs.shape[1]),
        ], axis=1)

    @classmethod
    def unpack(cls, packed: np.ndarray, sh_degree: int) -> "GaussianCloud":
        packed = np.asarray(packed, dtype=np.float64)
        k = sh_coeff_count(sh_degree)
        if packed.ndim != 2 or packed.shape[1] != 11 + 3 * k:
            raise SceneError(f"cloud tensor shape {packed.shape} does not match SH degree {sh_degree}")
        return cls(packed[:, 0:3], packed[:, 3:6], packed[:, 6:10], packed[:, 10], packed[:, 11:].reshape(-1, k, 3))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass
class PointSet:
    """Seed points with colours in [0, 1]."""

    positions: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.positions) != len(self.colors):
            raise SceneError("seed points and colours differ in length")

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class UncertaintyMap:
    """Per-pixel confidence, 1 = multi-view supported, 0 = uncertain."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise SceneError(f"uncertainty map must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)) or self.values.min(initial=0) < 0 or self.values.max(initial=0) > 1:
            raise SceneError("uncertainty values must lie in [0, 1]")

    @property
    def mean(self) -> float:
        return float(self.values.mean()) if self.values.size else 0.0

    @property
    def shape(self):
        return self.values.shape


@dataclass
class AttentionStack:
    layer_ids: list[int]
    planes: np.ndarray
    source_view_id: int = 0
    chunk_id: int = 0

    def __post_init__(self):
        self.layer_ids = [int(i) for i in self.layer_ids]
        self.planes = np.asarray(self.planes, dtype=np.float64)
        if self.planes.ndim != 3 or self.planes.shape[0] != len(self.layer_ids):
            raise SceneError(
                f"attention stack needs one plane per layer id: {len(self.layer_ids)} ids, planes {self.planes.shape}"
            )
        if len(set(self.layer_ids)) != len(self.layer_ids):
            raise SceneError(f"duplicate layer ids {self.layer_ids}")


class Role(str, enum.Enum):
    GROUND_TRUTH = "ground_truth"
    SYNTHETIC = "synthetic"
    TEST = "test"


@dataclass
class ViewRecord:
    camera: Camera
    image: np.ndarray
    role: Role = Role.GROUND_TRUTH
    inv_depth: np.ndarray | None = None
    depth_mask: np.ndarray | None = None
    uncertainty: UncertaintyMap | None = None
    attention: AttentionStack | None = None
    name: str = ""

    def __post_init__(self):
        self.role = Role(self.role)
        self.image = np.asarray(self.image, dtype=np.float64)
        hw = self.camera.shape
        self._check("image", self.image, hw + (3,))
        if self.inv_depth is not None:
            self.inv_depth = np.asarray(self.inv_depth, dtype=np.float64)
            self._check("inv_depth", self.inv_depth, hw)
        if self.depth_mask is not None:
            self.depth_mask = np.asarray(self.depth_mask, dtype=np.float64)
            self._check("depth_mask", self.depth_mask, hw)
        if self.uncertainty is not None:
            if not isinstance(self.uncertainty, UncertaintyMap):
                self.uncertainty = UncertaintyMap(self.uncertainty)
            self._check("uncertainty", self.uncertainty.values, hw)

    def _check(self, what: str, arr: np.ndarray, shape: tuple) -> None:
        if arr.shape != shape:
            raise SceneError(
                f"view {self.name or '?'}: {what} has shape {arr.shape}, camera expects {shape}"
            )

    @property
    def needs_oracle(self) -> bool:
        """Synthetic view without an uncertainty map; the trainer must compute one."""
        return self.role is Role.SYNTHETIC and self.uncertainty is None


@dataclass
class SceneBundle:
    points: PointSet
    views: list[ViewRecord]
    cloud: GaussianCloud | None = None

    def by_role(self, role: Role | str) -> list[int]:
        role = Role(role)
        return [i for i, v in enumerate(self.views) if v.role is role]

    def with_views(self, views: list[ViewRecord]) -> "SceneBundle":
        return replace(self, views=list(views))


# ---------------------------------------------------------------------------
# manifest I/O


def read_png(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_png(path: str | os.PathLike, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8), mode="RGB").save(path)


def _resolve(root: Path, rel: str, what: str) -> Path:
    p = (root / rel).resolve()
    if not p.is_file():
        raise SceneError(f"{what}: missing file {p}")
    return p


def _load_tensor(root: Path, rel: str, what: str) -> np.ndarray:
    path = _resolve(root, rel, what)
    try:
        return read_tensor(path).astype(np.float64)
    except TensorFormatError as exc:
        raise SceneError(f"{what}: {exc}") from exc


def load_scene(path: str | os.PathLike) -> SceneBundle:
    """Load a scene manifest (a directory containing ``scene.json`` or the file itself)."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME if path.is_dir() else path
    if not manifest_path.is_file():
        raise SceneError(f"missing scene manifest {manifest_path}")
    root = manifest_path.parent
    try:
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SceneError(f"{manifest_path}: malformed manifest ({exc})") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("views", []), list):
        raise SceneError(f"{manifest_path}: manifest must be an object with a 'views' list")

    if doc.get("points"):
        pts = _load_tensor(root, doc["points"], "points")
        if pts.ndim != 2 or pts.shape[1] != 6:
            raise SceneError(f"points: expected (N, 6) tensor, got {pts.shape}")
        points = PointSet(pts[:, :3], pts[:, 3:])
    else:
        points = PointSet(np.zeros((0, 3)), np.zeros((0, 3)))

    cloud = None
    if doc.get("cloud"):
        entry = doc["cloud"]
        try:
            cloud = GaussianCloud.unpack(_load_tensor(root, entry["path"], "cloud"), int(entry["sh_degree"]))
        except KeyError as exc:
            raise SceneError(f"cloud: missing field {exc}") from exc

    views = []
    for i, entry in enumerate(doc.get("views", [])):
        where = f"views[{i}]"
        try:
            camera = Camera.from_dict(entry["camera"])
            image = read_png(_resolve(root, entry["image"], f"{where}.image"))
            role = Role(entry.get("role", "ground_truth"))
        except KeyError as exc:
            raise SceneError(f"{where}: missing field {exc}") from exc
        except (ValueError, TypeError) as exc:
            raise SceneError(f"{where}: {exc}") from exc

        def opt(key):
            return _load_tensor(root, entry[key], f"{where}.{key}") if entry.get(key) else None

        unc = opt("uncertainty")
        attention = None
        if entry.get("attention"):
            att = entry["attention"]
            attention = AttentionStack(
                layer_ids=att["layer_ids"],
                planes=_load_tensor(root, att["path"], f"{where}.attention"),
                source_view_id=int(att.get("source_view_id", i)),
                chunk_id=int(att.get("chunk_id", 0)),
            )
        try:
            views.append(ViewRecord(
                camera=camera, image=image, role=role,
                inv_depth=opt("inv_depth"), depth_mask=opt("depth_mask"),
                uncertainty=None if unc is None else UncertaintyMap(unc),
                attention=attention, name=str(entry.get("name", f"view{i:03d}")),
            ))
        except SceneError as exc:
            raise SceneError(f"{where} ({entry['image']}): {exc}") from exc
    return SceneBundle(points=points, views=views, cloud=cloud)


def save_scene(bundle: SceneBundle, path: str | os.PathLike) -> Path:
    """Write ``bundle`` into directory ``path``, replacing any previous content atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}.staging."))
    try:
        doc: dict = {"format": MANIFEST_FORMAT, "points": None, "cloud": None, "views": []}
        if len(bundle.points):
            write_tensor(staging / "points.ogt", np.concatenate([bundle.points.positions, bundle.points.colors], 1))
            doc["points"] = "points.ogt"
        if bundle.cloud is not None:
            write_tensor(staging / "cloud.ogt", bundle.cloud.pack())
            doc["cloud"] = {"path": "cloud.ogt", "sh_degree": bundle.cloud.sh_degree}
        (staging / "views").mkdir()
        for i, view in enumerate(bundle.views):
            stem = f"views/{i:04d}"
            write_png(staging / f"{stem}.png", view.image)
            entry = {
                "name": view.name or f"view{i:03d}",
                "role": view.role.value,
                "camera": view.camera.to_dict(),
                "image": f"{stem}.png",
            }
            for key, arr in (("inv_depth", view.inv_depth), ("depth_mask", view.depth_mask),
                             ("uncertainty", None if view.uncertainty is None else view.uncertainty.values)):
                if arr is not None:
                    write_tensor(staging / f"{stem}.{key}.ogt", arr)
                    entry[key] = f"{stem}.{key}.ogt"
            if view.attention is not None:
                write_tensor(staging / f"{stem}.attention.ogt", view.attention.planes)
                entry["attention"] = {
                    "path": f"{stem}.attention.ogt",
                    "layer_ids": view.attention.layer_ids,
                    "source_view_id": view.attention.source_view_id,
                    "chunk_id": view.attention.chunk_id,
                }
            doc["views"].append(entry)
        (staging / MANIFEST_NAME).write_text(json.dumps(doc, indent=2), encoding="utf-8")

        if path.exists():
            trash = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}.old."))
            os.replace(path, trash / "old")
            os.replace(staging, path)
            shutil.rmtree(trash, ignore_errors=True)
        else:
            os.replace(staging, path)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return path
