import numpy as np
import pytest

from portraitgen.latents import (POSE_DIM, CodeDistribution, LatentCodes, SequenceFrame,
                                 concat_identity, read_code_sequence, sample_codes, sequence_columns,
                                 split_identity, worker_seed, write_code_sequence)


def test_pose_dimension():
    assert POSE_DIM == 18


def test_zero_scales_return_means():
    dist = CodeDistribution(id_mean=0.3, id_scale=0.0, exp_mean=-0.2, exp_scale=0.0,
                            pose_mean=0.1, pose_scale=0.0)
    c = sample_codes(5, dist)
    assert np.all(c.z_id == 0.3) and np.all(c.z_exp == -0.2) and np.all(c.z_pose == 0.1)


def test_same_seed_same_codes():
    dist = CodeDistribution()
    a, b = sample_codes(7, dist), sample_codes(7, dist)
    for name in ("z_id", "z_exp", "z_pose", "eps", "camera_pose"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_codes_respect_truncation():
    dist = CodeDistribution(code_truncation=(-0.5, 0.5))
    for s in range(20):
        c = sample_codes(s, dist)
        assert np.all(np.abs(c.z_id) <= 0.5) and np.all(np.abs(c.z_exp) <= 0.5)
        assert np.all(np.abs(c.z_pose) <= 0.15 * 0.5 + 1e-12)


def test_eps_moments_monte_carlo():
    dist = CodeDistribution(d_eps=8)
    eps = np.stack([sample_codes(s, dist).eps for s in range(10_000)])
    assert np.all(np.abs(eps.mean(axis=0)) < 0.05)
    assert np.all(np.abs(eps.var(axis=0) - 1.0) < 0.05)


def test_dimensions_follow_distribution():
    c = sample_codes(0, CodeDistribution(d_id_face=5, d_id_body=2, d_exp=3, d_eps=4))
    assert c.z_id.shape == (7,) and c.z_exp.shape == (3,) and c.eps.shape == (4,)


@pytest.mark.parametrize("kwargs", [dict(id_scale=-1.0), dict(code_truncation=(1.0, -1.0)),
                                    dict(yaw_range=(0.2, 0.1))])
def test_invalid_distribution(kwargs):
    with pytest.raises(ValueError):
        CodeDistribution(**kwargs)


def test_axis_angle_bound_enforced():
    with pytest.raises(ValueError):
        LatentCodes(np.zeros(20), np.zeros(8), np.r_[4.0, np.zeros(17)], np.zeros(32))


def test_camera_on_orbit_sphere():
    dist = CodeDistribution()
    for s in range(10):
        pose = sample_codes(s, dist).camera_pose
        assert np.linalg.norm(pose[:3, 3]) == pytest.approx(1.3)
        np.testing.assert_allclose(pose[:3, :3] @ pose[:3, :3].T, np.eye(3), atol=1e-12)
        # looks at the origin
        fwd = -pose[:3, 2]
        np.testing.assert_allclose(fwd, -pose[:3, 3] / 1.3, atol=1e-12)


def test_split_identity():
    z = np.arange(20.0)
    a, b = split_identity(z, 16)
    assert np.array_equal(a, z[:16]) and b[0] == 16.0
    assert np.array_equal(concat_identity(a, b), z)
    a2, b2 = split_identity(concat_identity(a, b), 16)
    assert np.array_equal(a2, a) and np.array_equal(b2, b)


def test_split_identity_mismatch():
    with pytest.raises(ValueError):
        split_identity(np.zeros(10), 16)


def test_worker_seeds_are_distinct_and_stable():
    seeds = [worker_seed(3, k) for k in range(100)]
    assert len(set(seeds)) == 100
    assert worker_seed(3, 5) == seeds[5]


def test_sequence_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    frames = [SequenceFrame(k, rng.normal(size=8), rng.normal(scale=0.1, size=18), 0.1 * k, -0.05)
              for k in range(3)]
    path = tmp_path / "seq.txt"
    write_code_sequence(path, frames)
    lines = path.read_text().splitlines()
    assert len(lines) == 3 and all(len(l.split()) == sequence_columns(8) == 29 for l in lines)
    back = read_code_sequence(path, 8)
    for a, b in zip(frames, back):
        assert a.index == b.index and a.yaw == b.yaw and a.pitch == b.pitch
        assert np.array_equal(a.z_exp, b.z_exp) and np.array_equal(a.z_pose, b.z_pose)


def test_sequence_bad_columns(tmp_path):
    path = tmp_path / "seq.txt"
    path.write_text("0 1 2 3\n")
    with pytest.raises(ValueError, match="expected 29 columns"):
        read_code_sequence(path, 8)
