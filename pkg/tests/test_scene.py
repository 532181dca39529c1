import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from guidedsplat.scene import (AttentionStack, Camera, GaussianCloud, PointSet, Role, SceneBundle, SceneError,
                               UncertaintyMap, ViewRecord, load_scene, project_point, quat_to_rotmat,
                               rotmat_to_quat, save_scene)
from guidedsplat.tensorfile import TensorFormatError, decode, encode, read_tensor, write_tensor

from helpers import random_cloud

finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


@settings(max_examples=100)
@given(q=arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.1))
def test_quaternion_roundtrip(q):
    R = quat_to_rotmat(q / np.linalg.norm(q))
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)
    np.testing.assert_allclose(quat_to_rotmat(rotmat_to_quat(R)), R, atol=1e-9)


def test_look_at_centres_the_target():
    cam = Camera.look_at((1.0, -3.0, 2.0), (0.2, 0.1, 0.3), width=20, height=14)
    u, v, z = project_point(cam, (0.2, 0.1, 0.3))
    assert (u, v) == pytest.approx((10.0, 7.0))
    assert z == pytest.approx(np.linalg.norm([0.8, -3.1, 1.7]))
    np.testing.assert_allclose(cam.center, [1.0, -3.0, 2.0], atol=1e-12)
    # +y is down in the image: a point above the target lands in the upper half
    assert project_point(cam, (0.2, 0.1, 0.8))[1] < 7.0


def test_camera_validation():
    with pytest.raises(SceneError):
        Camera(fx=-1, fy=1, cx=0, cy=0, width=4, height=4)
    with pytest.raises(SceneError):
        Camera(fx=1, fy=1, cx=0, cy=0, width=4, height=4, near=2, far=1)
    with pytest.raises(SceneError):
        Camera(fx=1, fy=1, cx=0, cy=0, width=4, height=4, rotation=[2, 0, 0, 0])


def test_camera_dict_roundtrip():
    cam = Camera.look_at((0.0, -2.0, 1.0), (0.0, 0.0, 0.0), width=9, height=7)
    back = Camera.from_dict(json.loads(json.dumps(cam.to_dict())))
    np.testing.assert_array_equal(back.R, cam.R)
    assert back.shape == (7, 9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(0, 8), deg=st.integers(0, 2))
def test_pack_unpack(seed, n, deg):
    cloud = random_cloud(np.random.default_rng(seed), n, sh_degree=deg)
    back = GaussianCloud.unpack(cloud.pack(), deg)
    for name in GaussianCloud.PARAM_NAMES:
        np.testing.assert_array_equal(getattr(back, name), getattr(cloud, name))


def test_cloud_shape_validation(rng):
    cloud = random_cloud(rng, 3)
    with pytest.raises(SceneError, match="SH"):
        GaussianCloud(cloud.positions, cloud.log_scales, cloud.rotations, cloud.opacity_logits,
                      np.zeros((3, 16, 3)))
    with pytest.raises((SceneError, ValueError)):
        GaussianCloud(cloud.positions, cloud.log_scales[:2], cloud.rotations, cloud.opacity_logits,
                      cloud.sh_coeffs)


def test_uncertainty_range():
    with pytest.raises((SceneError, ValueError)):
        UncertaintyMap(np.full((2, 2), 1.2))
    assert UncertaintyMap(np.full((2, 2), 0.25)).mean == 0.25


def test_view_shape_mismatch_names_the_field():
    cam = Camera.look_at((0.0, -2.0, 0.0), (0.0, 0.0, 0.0), width=6, height=4)
    with pytest.raises(SceneError, match="inv_depth"):
        ViewRecord(camera=cam, image=np.zeros((4, 6, 3)), inv_depth=np.zeros((6, 4)), name="a")


# ---------------------------------------------------------------------------
# tensors and manifests


@settings(max_examples=60)
@given(arr=arrays(np.float32, st.lists(st.integers(0, 5), min_size=0, max_size=4).map(tuple), elements=finite))
def test_tensor_roundtrip(arr):
    np.testing.assert_array_equal(decode(encode(arr)), arr)


def test_tensor_errors(tmp_path):
    blob = encode(np.ones((2, 3)))
    with pytest.raises(TensorFormatError, match="magic"):
        decode(b"XXXX" + blob[4:])
    with pytest.raises(TensorFormatError, match="payload"):
        decode(blob[:-4])
    write_tensor(tmp_path / "a" / "t.ogt", np.arange(6.0).reshape(2, 3))
    assert read_tensor(tmp_path / "a" / "t.ogt").shape == (2, 3)
    assert [p.name for p in (tmp_path / "a").iterdir()] == ["t.ogt"]


def _bundle(rng):
    views = []
    for i, role in enumerate([Role.GROUND_TRUTH, Role.SYNTHETIC, Role.TEST]):
        cam = Camera.look_at((np.cos(i), np.sin(i) - 3, 0.5), (0.0, 0.0, 0.0), width=8, height=6)
        views.append(ViewRecord(
            camera=cam, role=role, name=f"v{i}",
            image=np.round(rng.uniform(size=(6, 8, 3)) * 255) / 255,
            inv_depth=rng.uniform(0.1, 1, (6, 8)).astype(np.float32).astype(np.float64),
            uncertainty=UncertaintyMap(np.full((6, 8), 0.5)) if role is Role.SYNTHETIC else None,
            attention=AttentionStack([0, 22], np.ones((2, 3, 4))) if role is Role.SYNTHETIC else None,
        ))
    pts = PointSet(rng.uniform(size=(10, 3)).astype(np.float32).astype(np.float64),
                   rng.uniform(size=(10, 3)).astype(np.float32).astype(np.float64))
    cloud = random_cloud(rng, 4)
    for name in GaussianCloud.PARAM_NAMES:
        setattr(cloud, name, getattr(cloud, name).astype(np.float32).astype(np.float64))
    return SceneBundle(pts, views, cloud)


def test_manifest_roundtrip(tmp_path, rng):
    bundle = _bundle(rng)
    save_scene(bundle, tmp_path / "scene")
    back = load_scene(tmp_path / "scene")
    np.testing.assert_array_equal(back.points.positions, bundle.points.positions)
    np.testing.assert_array_equal(back.cloud.pack(), bundle.cloud.pack())
    assert [v.role for v in back.views] == [v.role for v in bundle.views]
    for a, b in zip(back.views, bundle.views):
        assert a.name == b.name
        np.testing.assert_allclose(a.image, b.image, atol=1e-12)
        np.testing.assert_array_equal(a.inv_depth, b.inv_depth)
        np.testing.assert_array_equal(a.camera.translation, b.camera.translation)
    assert back.views[1].attention.layer_ids == [0, 22]
    assert back.by_role("synthetic") == [1]


def test_save_replaces_existing_scene(tmp_path, rng):
    bundle = _bundle(rng)
    save_scene(bundle, tmp_path / "s")
    save_scene(bundle.with_views(bundle.views[:1]), tmp_path / "s")
    assert len(load_scene(tmp_path / "s").views) == 1
    assert sorted(p.name for p in tmp_path.iterdir()) == ["s"]


def test_manifest_errors_name_the_problem(tmp_path, rng):
    save_scene(_bundle(rng), tmp_path / "s")
    with pytest.raises(SceneError, match="missing scene manifest"):
        load_scene(tmp_path / "nowhere")
    doc = json.loads((tmp_path / "s" / "scene.json").read_text())
    del doc["views"][0]["camera"]
    (tmp_path / "s" / "scene.json").write_text(json.dumps(doc))
    with pytest.raises(SceneError, match=r"views\[0\].*camera"):
        load_scene(tmp_path / "s")
    (tmp_path / "s" / "scene.json").write_text("{not json")
    with pytest.raises(SceneError, match="malformed"):
        load_scene(tmp_path / "s")
