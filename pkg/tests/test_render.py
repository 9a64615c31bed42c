from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from portraitgen.camera import Camera, FaceCameraConfig, face_camera_from_head, generate_rays
from portraitgen.geometry import axis_angle_to_matrix, look_at, rigid
from portraitgen.manifolds import SphereField, default_levels, intersect_ray, radiance
from portraitgen.render import (MAP, Scene, composite, main_camera, pose_scene, read_ppm,
                                render_camera, render_dual, render_portrait, torso_crop, write_ppm)
from portraitgen.skinning import inverse_lbs_batch, nearest_vertex_weights_batch

from render_cases import GOLDEN_FACE, identity_codes, random_codes, small_config

DATA = Path(__file__).parent / "data"


# ---------------------------------------------------------------------------
# compositing

def test_single_opaque_point():
    c, t = composite(np.array([1.0]), np.array([[1.0, 0, 0]]))
    np.testing.assert_array_equal(c, [1, 0, 0])
    assert t == 0


def test_two_half_points():
    c, t = composite(np.array([0.5, 0.5]), np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    np.testing.assert_allclose(c, [0.5, 0.25, 0])
    assert t == pytest.approx(0.25)


def test_empty_is_background():
    c, t = composite(np.zeros((0,)), np.zeros((0, 3)), background=(0.2, 0.4, 0.6))
    np.testing.assert_allclose(c, [0.2, 0.4, 0.6])
    assert t == 1


def test_weights_sum_to_one(rng):
    a = rng.uniform(size=(100, 30))
    T = np.concatenate([np.ones((100, 1)), np.cumprod(1 - a, axis=1)], axis=1)
    _, t_final = composite(a, rng.uniform(size=(100, 30, 3)))
    np.testing.assert_allclose((T[:, :-1] * a).sum(1) + t_final, 1.0, atol=1e-12)


def test_composite_torch_grad():
    a = torch.tensor([0.3, 0.6], dtype=torch.float64, requires_grad=True)
    c = torch.tensor([[1.0, 0, 0], [0, 1.0, 0]], dtype=torch.float64)
    C, _ = composite(a, c)
    C[0].backward()
    np.testing.assert_allclose(a.grad.numpy(), [1.0, 0.0])


# ---------------------------------------------------------------------------
# cameras and rays

def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(0.0, 1, 1, 2, 2, np.eye(4), 0.1, 1.0)
    with pytest.raises(ValueError):
        Camera(1.0, 1, 1, 2, 2, np.eye(4), 1.0, 1.0)
    with pytest.raises(ValueError):
        Camera(1.0, 1, 1, 2, 2, np.eye(4), 0.1, 1.0, n_samples=1)


def test_center_ray_is_forward():
    pose = look_at([0.3, 0.2, 1.0], [0, 0, 0])
    cam = Camera.centered(pose, 33, 40.0, 0.5, 1.5)
    rays = generate_rays(cam)
    np.testing.assert_allclose(rays.directions[16, 16], cam.forward, atol=1e-12)


def test_corner_ray_angle():
    cam = Camera.centered(np.eye(4), 64, 50.0, 0.5, 1.5)
    d = generate_rays(cam).directions[0, 0]
    half = 31.5                       # pixel centre offset from the principal point
    expected = np.arctan(np.hypot(half, half) / 50.0)
    assert np.arccos(np.dot(d, cam.forward)) == pytest.approx(expected, abs=1e-12)
    assert d[0] < 0 and d[1] > 0      # top-left


def test_samples_even_without_jitter():
    cam = Camera.centered(np.eye(4), 4, 4.0, 0.5, 1.5, n_samples=10)
    t = generate_rays(cam).t
    np.testing.assert_allclose(np.diff(t, axis=-1), 0.1, atol=1e-12)
    assert t.min() >= 0.5 and t.max() <= 1.5


def test_jitter_deterministic_and_in_strata():
    cam = Camera.centered(np.eye(4), 4, 4.0, 0.5, 1.5, n_samples=10)
    a = generate_rays(cam, jitter=True, seed=3).t
    assert np.array_equal(a, generate_rays(cam, jitter=True, seed=3).t)
    assert not np.array_equal(a, generate_rays(cam, jitter=True, seed=4).t)
    strata = np.floor((a - 0.5) / 0.1 + 1e-12)
    np.testing.assert_array_equal(strata, np.broadcast_to(np.arange(10), a.shape))


def _head(center, R=np.eye(3)):
    return SimpleNamespace(head_center=np.asarray(center, float), head_rotation=np.asarray(R, float))


def test_face_camera_canonical_rig():
    cam = face_camera_from_head(_head([0, 0, 0]), FaceCameraConfig(radius=1.0))
    np.testing.assert_allclose(cam.position, [0, 0, 1], atol=1e-15)
    np.testing.assert_allclose(cam.forward, [0, 0, -1], atol=1e-15)
    np.testing.assert_allclose(cam.pose[:3, 1], [0, 1, 0], atol=1e-15)


def test_face_camera_yaw_30():
    R = axis_angle_to_matrix([0, np.radians(30), 0])
    c = np.array([0.1, 0.2, -0.05])
    cam = face_camera_from_head(_head(c, R), FaceCameraConfig(radius=0.35))
    np.testing.assert_allclose(cam.position, c + 0.35 * np.array([0.5, 0, np.sqrt(3) / 2]), atol=1e-12)
    to_center = (c - cam.position) / np.linalg.norm(c - cam.position)
    assert np.dot(cam.forward, to_center) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("sign", [1, -1])
def test_face_camera_pitch_90_fallback(sign):
    # camera orbits to straight above/below with the head up vector along the view axis
    cfg = FaceCameraConfig(local_pitch=sign * np.pi / 2)
    cam = face_camera_from_head(_head([0, 0, 0]), cfg)
    R = cam.pose[:3, :3]
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)
    assert abs(np.dot(cam.forward, -np.sign(cam.position[1]) * np.array([0, 1, 0]))) == pytest.approx(1.0)


def test_face_camera_axis_hits_head_center(rng):
    for _ in range(20):
        R = axis_angle_to_matrix(rng.normal(size=3))
        c = rng.normal(scale=0.3, size=3)
        cam = face_camera_from_head(_head(c, R))
        v = c - cam.position
        cos = np.dot(cam.forward, v / np.linalg.norm(v))
        assert np.arccos(np.clip(cos, -1, 1)) < 1e-6


# ---------------------------------------------------------------------------
# crops and image files

@pytest.mark.parametrize("h,w", [(512, 512), (128, 128)])
def test_torso_crop_shapes(h, w):
    assert torso_crop(np.zeros((h, w, 3))).shape == (h // 4, w, 3)


def test_torso_crop_rows():
    img = np.arange(8 * 3).reshape(8, 3)
    np.testing.assert_array_equal(torso_crop(img), img[6:])


def test_torso_crop_of_crop_sized_image():
    img = np.arange(4 * 2).reshape(4, 2)
    np.testing.assert_array_equal(torso_crop(img), img[3:])


def test_torso_crop_indivisible():
    with pytest.raises(ValueError):
        torso_crop(np.zeros((10, 4, 3)))


def test_ppm_roundtrip(tmp_path, rng):
    px = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", px)
    data = (tmp_path / "a.ppm").read_bytes()
    assert data.startswith(b"P6\n7 5\n255\n") and len(data) == 11 + 105
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), px)


def test_ppm_truncated(tmp_path):
    (tmp_path / "b.ppm").write_bytes(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "b.ppm")


# ---------------------------------------------------------------------------
# full pipeline

@pytest.fixture(scope="module")
def scene(toy_models):
    return Scene(*toy_models, seed=0)


def test_render_deterministic(scene):
    codes, cfg = random_codes(1), small_config(24, 12)
    a = render_portrait(scene, codes, config=cfg)
    b = render_portrait(scene, codes, config=cfg)
    assert np.array_equal(a.color, b.color) and np.array_equal(a.transmittance, b.transmittance)
    assert a.color.shape == (24, 24, 3) and a.color.min() >= 0 and a.color.max() <= 1


def test_render_conservation(scene):
    codes, cfg = random_codes(2), small_config(16, 16)
    posed = pose_scene(scene, codes)
    with torch.no_grad():
        out = render_camera(scene, codes, main_camera(codes, cfg), posed, cfg)
    assert out["n_hits"] > 0
    np.testing.assert_allclose((out["weight_sum"] + out["transmittance"]).numpy(), 1.0, atol=1e-7)


def test_pipeline_bypass_oracle(toy_models):
    """Zero-init deformation nets and the rest pose reduce to per-point inverse skinning."""
    field = SphereField(default_levels(), center=(0.0, 0.05, 0.0), radius=0.3)
    scene = Scene(*toy_models, seed=0, field=field)
    codes = identity_codes(scene, look_at([0.2, 0.1, 1.2], [0, 0.05, 0]))
    cfg = small_config(12, 16)
    img = render_portrait(scene, codes, config=cfg)

    posed = pose_scene(scene, codes)
    rays = generate_rays(main_camera(codes, cfg))
    pts = rays.points.reshape(-1, 3)
    w, _ = nearest_vertex_weights_batch(posed.guide, pts)
    x_c = inverse_lbs_batch(pts, w, posed.transforms)[0].reshape(12 * 12, 16, 3)
    expected = np.empty((12 * 12, 3))
    for r in range(12 * 12):
        hits = intersect_ray(field, x_c[r])
        if len(hits) == 0:
            expected[r] = scene.background
            continue
        seg = hits.segment_index
        d = x_c[r, seg + 1] - x_c[r, seg]
        c, a = radiance(scene.radiance_net, hits.points, codes.z_id, codes.eps,
                        d / np.linalg.norm(d, axis=1, keepdims=True))
        expected[r] = composite(a, c, scene.background)[0]
    np.testing.assert_allclose(img.color.reshape(-1, 3), np.clip(expected, 0, 1), atol=1e-5)


def test_equivariance_camera_vs_root(scene):
    codes, cfg = random_codes(3), small_config(32, 24)
    R = rigid(axis_angle_to_matrix([0.1, 0.5, -0.05]))
    a = render_portrait(scene, codes.replace(camera_pose=R @ codes.camera_pose), config=cfg)
    b = render_portrait(scene, codes, config=cfg, root_transform=np.linalg.inv(R))
    diff = np.abs(a.to_uint8().astype(int) - b.to_uint8().astype(int)).max(axis=-1)
    assert (diff <= 1).mean() >= 0.99


def test_map_mode_close_to_direct(scene):
    codes = random_codes(4)
    cfg = small_config(16, 16)
    a = render_portrait(scene, codes, config=cfg)
    b = render_portrait(scene, codes, config=small_config(16, 16, mode=MAP, map_resolution=32))
    assert np.abs(a.color - b.color).mean() < 0.05
    scene.clear_cache()


def test_dual_face_golden(scene):
    _, img = render_dual(scene, identity_codes(scene), config=small_config())
    np.testing.assert_array_equal(img.to_uint8(), read_ppm(DATA / GOLDEN_FACE))


def test_dual_face_matches_equivalent_portrait_camera(scene):
    codes, cfg = identity_codes(scene), small_config()
    _, face_img = render_dual(scene, codes, config=cfg)
    posed = pose_scene(scene, codes)
    fc = cfg.face
    pose = look_at(posed.transforms.head_center + [0, 0, fc.radius], posed.transforms.head_center)
    cam = Camera.centered(pose, fc.resolution, fc.focal_length(), fc.radius - fc.depth_range,
                          fc.radius + fc.depth_range, fc.n_samples)
    ref = render_portrait(scene, codes, camera=cam, config=cfg)
    diff = np.abs(face_img.to_uint8().astype(int) - ref.to_uint8().astype(int))
    assert diff.max() <= 1


def test_dual_shares_posed_scene(scene):
    codes, cfg = random_codes(5), small_config(16, 12)
    portrait, _ = render_dual(scene, codes, config=cfg)
    np.testing.assert_array_equal(portrait.color, render_portrait(scene, codes, config=cfg).color)
