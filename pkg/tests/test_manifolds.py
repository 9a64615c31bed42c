import numpy as np
import pytest
import torch

from portraitgen.manifolds import (HEAD_SHOULDER_HALF_EXTENT, N_LEVELS, ManifoldField, RadianceMap,
                                   RadianceNet, SphereField, default_levels, dump_radiance_map,
                                   intersect_batch, intersect_ray, load_radiance_map, radiance,
                                   rasterize_radiance_map, sample_radiance_map, scalar_field,
                                   upsample_radiance_map)


def test_levels_strictly_decreasing():
    lv = default_levels()
    assert len(lv) == N_LEVELS == 24
    assert np.all(np.diff(lv) < 0)


def test_increasing_levels_rejected():
    with pytest.raises(ValueError):
        ManifoldField(levels=[0.1, 0.2])


def test_init_origin_inside_all_levels():
    f = ManifoldField()
    s = scalar_field(f, np.zeros(3))
    assert s > default_levels()[0]


def test_init_radial_monotone(rng):
    f = ManifoldField()
    for _ in range(10):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        s = scalar_field(f, np.linspace(0, 1, 200)[:, None] * d)
        assert np.all(np.diff(s) < 0)


def test_init_outer_level_encloses_box():
    f = ManifoldField()
    corners = np.array(np.meshgrid(*[[-e, e] for e in HEAD_SHOULDER_HALF_EXTENT])).reshape(3, -1).T
    assert np.all(scalar_field(f, corners) >= default_levels()[-1] - 1e-6)


def test_field_deterministic(rng):
    f = ManifoldField()
    x = rng.normal(size=(10, 3))
    assert np.array_equal(scalar_field(f, x), scalar_field(f, x))


def _sphere_ray(D, z0=-1.0, z1=1.0, offset=(0.0, 0.0)):
    t = np.linspace(z0, z1, D)
    return np.stack([np.full(D, offset[0]), np.full(D, offset[1]), t], axis=1)


def test_sphere_ray_two_hits():
    f = SphereField([0.5])
    hits = intersect_ray(f, _sphere_ray(33, -0.97, 1.03))
    assert len(hits) == 2
    np.testing.assert_allclose(np.linalg.norm(hits.points, axis=1), 0.5, atol=1e-12)


def test_sphere_off_axis_error_is_second_order():
    f = SphereField([0.5])
    errs = []
    for D in (32, 64):
        hits = intersect_ray(f, _sphere_ray(D, -1.0, 1.0, (0.3, 0.1)))
        r_true = np.sqrt(0.25 - 0.1)
        errs.append(np.abs(np.abs(hits.points[:, 2]) - r_true).max())
    assert errs[0] / errs[1] > 3.0


def test_no_hits_outside_all_levels():
    f = SphereField([0.5, 0.3])
    hits = intersect_ray(f, _sphere_ray(20, -1, 1, (0.9, 0.0)))
    assert len(hits) == 0


def test_exact_hit_counted_once():
    f = SphereField([0.5])
    x = np.array([[0, 0, -1.0], [0, 0, -0.75], [0, 0, -0.5], [0, 0, -0.25], [0, 0, 0.0]])
    hits = intersect_ray(f, x)
    assert len(hits) == 1
    assert hits.segment_index[0] == 1 and hits.interp[0] == 1.0
    np.testing.assert_allclose(hits.points[0], [0, 0, -0.5])


def test_exact_hit_on_first_sample():
    f = SphereField([0.5])
    x = np.array([[0, 0, -0.5], [0, 0, -0.25], [0, 0, 0.0]])
    hits = intersect_ray(f, x)
    assert len(hits) == 1 and hits.segment_index[0] == 0 and hits.interp[0] == 0.0


def test_hits_sorted_by_ray_parameter():
    f = SphereField(default_levels(), radius=0.5)
    hits = intersect_ray(f, _sphere_ray(57, -0.61, 0.63, (0.05, 0.02)))
    assert len(hits) > 20
    assert np.all(np.diff(hits.ray_parameter) >= 0)
    assert len(hits) <= 57 * 24


def test_batched_matches_per_ray(rng):
    f = SphereField(default_levels(), radius=0.5)
    rays = np.stack([_sphere_ray(40, -0.7, 0.7, rng.uniform(-0.3, 0.3, 2)) for _ in range(6)])
    x = torch.as_tensor(rays)
    out = intersect_batch(f(x), x, f.levels)
    for r in range(6):
        single = intersect_ray(f, rays[r])
        sel = (out["ray"] == r).numpy()
        order = np.argsort(out["slot"].numpy()[sel])
        np.testing.assert_allclose(out["points"].numpy()[sel][order], single.points, atol=1e-12)


def test_too_few_samples():
    with pytest.raises(ValueError):
        intersect_ray(SphereField([0.5]), np.zeros((1, 3)))


def _net(seed=0, **kw):
    torch.manual_seed(seed)
    return RadianceNet(20, 32, **kw).double()


def test_radiance_in_range(rng):
    net = _net()
    x = rng.normal(scale=3.0, size=(10_000, 3))
    d = rng.normal(size=(10_000, 3))
    c, a = radiance(net, x, rng.normal(size=20), rng.normal(size=32), d)
    assert c.min() >= 0 and c.max() <= 1 and a.min() >= 0 and a.max() <= 1


def test_zero_heads_give_half(rng):
    net = _net()
    for head in (net.alpha_head, net.color_head):
        torch.nn.init.zeros_(head.weight)
        torch.nn.init.zeros_(head.bias)
    c, a = radiance(net, rng.normal(size=(5, 3)), np.zeros(20), np.zeros(32), rng.normal(size=(5, 3)))
    np.testing.assert_allclose(c, 0.5)
    np.testing.assert_allclose(a, 0.5)


def test_alpha_is_view_independent(rng):
    net = _net()
    x = rng.normal(scale=0.2, size=(4, 3))
    z = (rng.normal(size=20), rng.normal(size=32))
    c1, a1 = radiance(net, x, *z, np.tile([0, 0, -1.0], (4, 1)))
    c2, a2 = radiance(net, x, *z, np.tile([1.0, 0, 0], (4, 1)))
    np.testing.assert_array_equal(a1, a2)
    assert not np.allclose(c1, c2)


def test_alpha_gradient_matches_fd(rng):
    from portraitgen.autodiff import ParamSet, grad_check

    net = RadianceNet(4, 4, hidden=8, map_hidden=8).double()
    x = torch.as_tensor(rng.normal(scale=0.1, size=(8, 3)))
    z = net.codes(rng.normal(size=4), rng.normal(size=4))
    d = torch.as_tensor(rng.normal(size=(8, 3)))
    rep = grad_check(lambda: net(x, z, d)[1].sum(), ParamSet.from_modules(net), n_coords=32)
    assert rep.max_error < 1e-4


@pytest.fixture(scope="module")
def sphere_map():
    torch.manual_seed(0)
    net = RadianceNet(2, 2, hidden=16, map_hidden=16).double()
    field = SphereField([0.5, 0.0], radius=0.25)
    return net, field, rasterize_radiance_map(net, field, np.zeros(2), np.zeros(2), resolution=32)


def test_map_alpha_zero_outside_silhouette(sphere_map):
    net, field, m = sphere_map
    n = m.resolution
    c = m.origin[0] + np.arange(n) * m.spacing
    yy, xx = np.meshgrid(c, c, indexing="ij")
    r = np.hypot(xx, yy)
    # level 0.5 is the sphere of radius 0.125; level 0 the one of radius 0.25
    assert np.all(m.rgba[0][r > 0.125 + 1e-9][:, 3] == 0)
    assert np.all(m.rgba[1][r > 0.25 + 1e-9][:, 3] == 0)
    assert np.all(m.rgba[1][r < 0.24][:, 3] > 0)


def test_map_cell_matches_direct_bisection(sphere_map):
    net, field, m = sphere_map
    i, j = 17, 12
    x, y = m.origin[0] + j * m.spacing, m.origin[1] + i * m.spacing
    z = np.sqrt(0.25 ** 2 - x * x - y * y)       # front (+z) branch of level 0
    c, a = radiance(net, np.array([x, y, z]), np.zeros(2), np.zeros(2), np.array([0, 0, -1.0]))
    np.testing.assert_allclose(m.rgba[1, i, j, :3], c, atol=1e-4)
    np.testing.assert_allclose(m.rgba[1, i, j, 3], a, atol=1e-4)


def test_cell_centre_query_roundtrip(sphere_map):
    _, _, m = sphere_map
    i, j = 16, 15
    p = np.array([[m.origin[0] + j * m.spacing, m.origin[1] + i * m.spacing, 0.0]])
    c, a = sample_radiance_map(m, p, [1])
    np.testing.assert_allclose(c[0], m.rgba[1, i, j, :3], atol=1e-7)
    np.testing.assert_allclose(a[0], m.rgba[1, i, j, 3], atol=1e-7)


def _ramp_map(n=8):
    rgba = np.zeros((1, n, n, 4), dtype=np.float32)
    rgba[0, :, :, 0] = np.linspace(0, 1, n)[None, :]
    rgba[0, :, :, 3] = 1.0
    return RadianceMap(rgba, np.array([0.5]), np.array([0.0, 0.0]), 0.1)


def test_bilinear_midpoint_average():
    m = _ramp_map()
    c, a = sample_radiance_map(m, np.array([[0.25, 0.3, 0.0]]), [0])
    np.testing.assert_allclose(c[0, 0], 0.5 * (m.rgba[0, 3, 2, 0] + m.rgba[0, 3, 3, 0]), atol=1e-7)


def test_out_of_bounds_is_transparent():
    m = _ramp_map()
    c, a = sample_radiance_map(m, np.array([[-0.5, 0.2, 0.0], [0.2, 5.0, 0.0]]), [0, 0])
    assert np.all(a == 0) and np.all(c == 0)


def test_upsample_constant_and_ramp():
    n = 16
    rgba = np.zeros((2, n, n, 4), dtype=np.float32)
    rgba[0] = 0.3
    yy, xx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    rgba[1, ..., 0] = 0.01 * xx + 0.02 * yy + 0.1
    rgba[1, ..., 3] = 0.5
    lr = RadianceMap(rgba, np.array([0.5, 0.4]), np.array([0.0, 0.0]), 0.04)
    hr = upsample_radiance_map(lr, 4, expected=n)
    assert hr.rgba.shape == (2, 64, 64, 4) and hr.spacing == pytest.approx(0.01)
    np.testing.assert_allclose(hr.rgba[0], 0.3, atol=1e-7)
    yy, xx = np.meshgrid(np.arange(64) / 4, np.arange(64) / 4, indexing="ij")
    ramp = np.clip(0.01 * xx + 0.02 * yy + 0.1, rgba[1, ..., 0].min(), rgba[1, ..., 0].max())
    np.testing.assert_allclose(hr.rgba[1, ..., 0], ramp, atol=1e-6)
    # aligned samples are exact
    np.testing.assert_array_equal(hr.rgba[:, ::4, ::4], lr.rgba)


def test_upsample_range_preserved(rng):
    rgba = rng.uniform(size=(3, 16, 16, 4)).astype(np.float32)
    hr = upsample_radiance_map(RadianceMap(rgba, np.zeros(3), np.zeros(2), 0.1), 4, expected=16)
    assert hr.rgba.min() >= rgba.min() and hr.rgba.max() <= rgba.max()


def test_upsample_wrong_size():
    with pytest.raises(ValueError):
        upsample_radiance_map(RadianceMap(np.zeros((1, 10, 10, 4)), np.zeros(1), np.zeros(2), 0.1))


def test_default_map_sizes():
    torch.manual_seed(0)
    net = RadianceNet(2, 2, hidden=8, map_hidden=8)
    field = ManifoldField()
    lr = rasterize_radiance_map(net, field, np.zeros(2), np.zeros(2))
    assert lr.rgba.shape == (24, 128, 128, 4)
    assert upsample_radiance_map(lr).rgba.shape == (24, 512, 512, 4)


def test_dump_and_load(tmp_path, sphere_map):
    _, _, m = sphere_map
    paths = dump_radiance_map(m, tmp_path)
    assert len(paths) == 2 and (tmp_path / "radiance_map.txt").exists()
    back = load_radiance_map(tmp_path)
    assert back.resolution == m.resolution and back.spacing == m.spacing
    np.testing.assert_allclose(back.levels, m.levels)
    np.testing.assert_allclose(back.rgba, m.rgba, atol=0.5 / 255 + 1e-7)
    # +y is at the top of the image file
    from PIL import Image

    top = np.asarray(Image.open(paths[1]))[0]
    np.testing.assert_allclose(top / 255.0, m.rgba[1, -1], atol=0.5 / 255 + 1e-7)
