"""Canonical radiance manifolds: scalar field, iso-surface intersection and radiance.

The scalar field defines 24 nested surfaces ``s(x) = level``.  Colour and
opacity live only on those surfaces and are produced either directly by the
radiance network or through per-surface radiance maps flattened along +z.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .deformation import FiLMSineLayer

N_LEVELS = 24
HEAD_SHOULDER_HALF_EXTENT = (0.28, 0.28, 0.16)


def default_levels(n_levels: int = N_LEVELS, inner: float = 0.1) -> np.ndarray:
    """Strictly decreasing iso-levels; level ``1 - r`` is the ellipsoid at radius ``r``."""
    return 1.0 - np.linspace(inner, 1.0, n_levels)


class ManifoldField(nn.Module):
    """``s(x) = 1 - ||(x - c) / a|| + mlp(x)``.

    The ellipsoidal prior with zero-initialized residual puts the initial level
    sets on nested ellipsoids; the outermost one encloses the head-and-shoulders
    box because the semi-axes are the box half-extents times sqrt(3).
    """

    def __init__(self, center=(0.0, 0.0, 0.0), half_extent=HEAD_SHOULDER_HALF_EXTENT,
                 hidden: int = 64, n_hidden: int = 3, levels=None):
        super().__init__()
        layers, width = [], 3
        for _ in range(n_hidden):
            layers += [nn.Linear(width, hidden), nn.Softplus(beta=10.0)]
            width = hidden
        out = nn.Linear(width, 1)
        nn.init.zeros_(out.weight)
        nn.init.zeros_(out.bias)
        self.mlp = nn.Sequential(*layers, out)
        self.register_buffer("center", torch.tensor(center, dtype=torch.float32))
        self.register_buffer("semi_axes", torch.tensor(half_extent, dtype=torch.float32) * np.sqrt(3.0))
        lv = default_levels() if levels is None else np.asarray(levels, dtype=np.float64)
        if np.any(np.diff(lv) >= 0):
            raise ValueError("levels must be strictly decreasing")
        self.register_buffer("levels", torch.tensor(lv, dtype=torch.float32))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        r = torch.linalg.norm((x - self.center) / self.semi_axes, dim=-1)
        return 1.0 - r + self.mlp(x).squeeze(-1)


class SphereField(nn.Module):
    """Analytic ``s(x) = 1 - ||x - c|| / radius``; useful as a reference field."""

    def __init__(self, levels, center=(0.0, 0.0, 0.0), radius: float = 1.0):
        super().__init__()
        self.register_buffer("center", torch.tensor(center, dtype=torch.float64))
        self.register_buffer("levels", torch.tensor(np.asarray(levels, dtype=np.float64)))
        self.radius = float(radius)

    def forward(self, x):
        return 1.0 - torch.linalg.norm(x - self.center.to(x.dtype), dim=-1) / self.radius


def _field_dtype(field):
    for t in list(field.parameters()) + list(field.buffers()):
        if t.is_floating_point():
            return t.dtype
    return torch.float64


def scalar_field(field: nn.Module, x):
    """Evaluate ``s`` at ``(..., 3)`` points; numpy in gives numpy out."""
    if torch.is_tensor(x):
        return field(x)
    x = np.asarray(x, dtype=np.float64)
    with torch.no_grad():
        s = field(torch.as_tensor(x.reshape(-1, 3), dtype=_field_dtype(field)))
    return s.double().numpy().reshape(x.shape[:-1])


# ---------------------------------------------------------------------------
# ray / manifold intersection

@dataclass
class IntersectionSet:
    points: np.ndarray          # (M, 3)
    manifold_index: np.ndarray  # (M,)
    segment_index: np.ndarray   # (M,)
    interp: np.ndarray          # (M,) position inside the segment, in [0, 1]

    def __len__(self):
        return len(self.points)

    @property
    def ray_parameter(self) -> np.ndarray:
        return self.segment_index + self.interp


def crossing_table(s, levels):
    """Per (ray, segment, level) crossing mask and interpolation parameter.

    ``s`` is ``(R, D)``.  A strict sign change of ``s - level`` across a segment
    gives one crossing.  A sample lying exactly on a level gives one crossing
    attached to the segment that ends there (segment 0 for the first sample).
    """
    d = s[..., :, None] - levels
    a, b = d[..., :-1, :], d[..., 1:, :]
    strict = a * b < 0
    end_hit = b == 0
    start_hit = torch.zeros_like(strict)
    start_hit[..., 0, :] = d[..., 0, :] == 0
    mask = strict | end_hit | start_hit
    denom = torch.where(strict, a - b, torch.ones_like(a))
    u = torch.where(strict, a / denom, end_hit.to(a.dtype))
    return mask, u


def intersect_batch(s: torch.Tensor, x: torch.Tensor, levels: torch.Tensor):
    """Sorted crossings for many rays at once.

    ``s`` is ``(R, D)`` and ``x`` is ``(R, D, 3)``.  Returns a dict of flat
    per-crossing tensors (``ray``, ``slot``, ``level``, ``segment``, ``u``,
    ``points``) plus ``max_count``; ``slot`` is the rank along the ray.
    Gradients flow into ``points`` through ``s`` and ``x``.
    """
    R, D = s.shape
    with torch.no_grad():
        mask, u_nograd = crossing_table(s, levels)
        key = torch.where(mask, u_nograd, torch.full_like(u_nograd, float("inf")))
        order = torch.argsort(key, dim=-1, stable=True)
        mask_sorted = torch.gather(mask, -1, order).reshape(R, -1)
        level_sorted = order.reshape(R, -1)
        ray, col = torch.nonzero(mask_sorted, as_tuple=True)
        counts = mask_sorted.sum(dim=1)
        row_start = torch.cumsum(counts, 0) - counts
        slot = torch.arange(len(ray)) - row_start[ray]
        L = levels.shape[0]
        seg = col // L
        lev = level_sorted[ray, col]
    a = s[ray, seg] - levels[lev]
    b = s[ray, seg + 1] - levels[lev]
    strict = (a * b) < 0
    denom = torch.where(strict, a - b, torch.ones_like(a))
    u = torch.where(strict, a / denom, (b == 0).to(a.dtype))
    pts = x[ray, seg] + u[:, None] * (x[ray, seg + 1] - x[ray, seg])
    return dict(ray=ray, slot=slot, level=lev, segment=seg, u=u, points=pts,
                max_count=int(counts.max()) if R else 0, counts=counts)


def intersect_ray(field: nn.Module, deformed_samples) -> IntersectionSet:
    """Intersections of one deformed ray (``(D, 3)`` ordered samples) with every level."""
    x = np.asarray(deformed_samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two ordered samples")
    dtype = _field_dtype(field)
    with torch.no_grad():
        xt = torch.as_tensor(x, dtype=dtype)
        s = field(xt)[None]
        hits = intersect_batch(s, xt[None], field.levels.to(dtype))
    return IntersectionSet(hits["points"].double().numpy(), hits["level"].numpy(),
                           hits["segment"].numpy(), hits["u"].double().numpy())


# ---------------------------------------------------------------------------
# radiance

class RadianceNet(nn.Module):
    """FiLM-modulated SIREN over the canonical point, conditioned on ``(z_id, eps)``.

    Opacity depends on the point only; colour also sees the view direction,
    appended before the colour head.  Both heads are squashed by a sigmoid.
    """

    def __init__(self, d_id: int, d_eps: int, hidden: int = 64, map_hidden: int = 64,
                 n_layers: int = 3, first_omega: float = 30.0):
        super().__init__()
        self.hidden, self.n_layers = hidden, n_layers
        self.mapping = nn.Sequential(
            nn.Linear(d_id + d_eps, map_hidden), nn.LeakyReLU(0.2),
            nn.Linear(map_hidden, 2 * n_layers * hidden))
        with torch.no_grad():
            self.mapping[2].weight.mul_(0.25)
        layers = [FiLMSineLayer(3, hidden, first_omega, first=True)]
        layers += [FiLMSineLayer(hidden, hidden, 1.0) for _ in range(n_layers - 1)]
        self.layers = nn.ModuleList(layers)
        self.alpha_head = nn.Linear(hidden, 1)
        self.color_head = nn.Linear(hidden + 3, 3)

    def codes(self, z_id, eps):
        z = torch.cat([torch.as_tensor(z_id), torch.as_tensor(eps)], dim=-1)
        return z.to(self.alpha_head.weight.dtype)

    def forward(self, x, z, d):
        mod = self.mapping(z)
        mod = mod.reshape(mod.shape[:-1] + (self.n_layers, 2, self.hidden))
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h, mod[..., i, 0, :], mod[..., i, 1, :])
        alpha = torch.sigmoid(self.alpha_head(h)).squeeze(-1)
        color = torch.sigmoid(self.color_head(torch.cat([h, d], dim=-1)))
        return color, alpha


def radiance(net: RadianceNet, x, z_id, eps, d):
    """``(c, alpha)`` at canonical points ``x`` seen along directions ``d``."""
    if torch.is_tensor(x):
        return net(x, net.codes(z_id, eps), d)
    dtype = net.alpha_head.weight.dtype
    x = np.asarray(x, dtype=np.float64)
    with torch.no_grad():
        c, a = net(torch.as_tensor(x.reshape(-1, 3), dtype=dtype),
                   torch.as_tensor(np.concatenate([np.ravel(z_id), np.ravel(eps)]), dtype=dtype),
                   torch.as_tensor(np.asarray(d, dtype=np.float64).reshape(-1, 3), dtype=dtype))
    return c.double().numpy().reshape(x.shape), a.double().numpy().reshape(x.shape[:-1])


# ---------------------------------------------------------------------------
# radiance maps

@dataclass
class RadianceMap:
    """Per-manifold RGBA grids flattened by orthographic projection along z.

    ``rgba[l, i, j]`` is the value at ``x = origin[0] + j * spacing`` and
    ``y = origin[1] + i * spacing`` on manifold ``l``.
    """

    rgba: np.ndarray
    levels: np.ndarray
    origin: np.ndarray
    spacing: float
    axis: str = "z"

    @property
    def resolution(self) -> int:
        return self.rgba.shape[1]

    @property
    def extent(self):
        n = self.rgba.shape[1] - 1
        return (self.origin[0], self.origin[0] + n * self.spacing,
                self.origin[1], self.origin[1] + n * self.spacing)


def rasterize_radiance_map(net: RadianceNet, field: nn.Module, z_id, eps, resolution: int = 128,
                           bounds=(-0.3, 0.3), depth=(-0.3, 0.3), n_coarse: int = 64,
                           tol: float = 1e-5, chunk: int = 8192) -> RadianceMap:
    """Sample the nearest-to-camera (+z) level-set point of every level per grid cell.

    A coarse front-to-back scan brackets the first crossing, then bisection on
    ``s - level`` narrows it to ``tol``.  Cells without a crossing get alpha 0.
    """
    lo, hi = bounds
    step = (hi - lo) / resolution
    coords = lo + (np.arange(resolution) + 0.5) * step
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    cols = np.stack([xx.ravel(), yy.ravel()], axis=1)
    zs = np.linspace(depth[1], depth[0], n_coarse)
    levels = field.levels.double()
    L = len(levels)
    dtype = _field_dtype(field)
    out = np.zeros((L, resolution * resolution, 4), dtype=np.float32)
    z_code = np.concatenate([np.ravel(z_id), np.ravel(eps)])
    with torch.no_grad():
        zt = torch.as_tensor(z_code, dtype=net.alpha_head.weight.dtype)
        for c0 in range(0, len(cols), chunk):
            xy = torch.as_tensor(cols[c0:c0 + chunk], dtype=torch.float64)
            n = len(xy)
            grid = torch.cat([xy[:, None, :].expand(n, n_coarse, 2),
                              torch.as_tensor(zs)[None, :, None].expand(n, n_coarse, 1)], -1)
            s = field(grid.to(dtype)).double()
            d = s[:, :, None] - levels
            change = (d[:, :-1] * d[:, 1:] <= 0) & ~((d[:, :-1] == 0) & (d[:, 1:] == 0))
            has = change.any(dim=1)
            k = torch.argmax(change.to(torch.int8), dim=1)
            col_idx, lev_idx = torch.nonzero(has, as_tuple=True)
            kk = k[col_idx, lev_idx]
            z_front = torch.as_tensor(zs)[kk]
            z_back = torch.as_tensor(zs)[kk + 1]
            lv = levels[lev_idx]
            xy_sel = xy[col_idx]
            front_val = d[col_idx, kk, lev_idx]
            while torch.any(torch.abs(z_front - z_back) > tol):
                mid = 0.5 * (z_front + z_back)
                pts = torch.cat([xy_sel, mid[:, None]], dim=1)
                dm = field(pts.to(dtype)).double() - lv
                same = torch.sign(dm) == torch.sign(front_val)
                z_front = torch.where(same, mid, z_front)
                front_val = torch.where(same, dm, front_val)
                z_back = torch.where(same, z_back, mid)
            z_star = 0.5 * (z_front + z_back)
            pts = torch.cat([xy_sel, z_star[:, None]], dim=1).to(net.alpha_head.weight.dtype)
            view = torch.zeros_like(pts)
            view[:, 2] = -1.0
            c, a = net(pts, zt, view)
            block = np.zeros((L, n, 4), dtype=np.float32)
            block[lev_idx.numpy(), col_idx.numpy(), :3] = c.float().numpy()
            block[lev_idx.numpy(), col_idx.numpy(), 3] = a.float().numpy()
            out[:, c0:c0 + n] = block
    rgba = out.reshape(L, resolution, resolution, 4)
    return RadianceMap(rgba, levels.numpy(), np.array([coords[0], coords[0]]), step)


def _cubic_weights(t, a=-0.5):
    """Keys cubic convolution weights for taps at offsets -1, 0, 1, 2."""
    def k(x):
        x = np.abs(x)
        return np.where(x <= 1, (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1,
                        np.where(x < 2, a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a, 0.0))
    return np.stack([k(t + 1), k(t), k(1 - t), k(2 - t)], axis=-1)


def _upsample_axis(arr, axis, factor):
    n = arr.shape[axis]
    a = np.moveaxis(arr, axis, 0).astype(np.float64)
    # linear extrapolation at both borders keeps affine ramps exact
    pad_lo = [a[0] + (a[0] - a[1]) * k for k in (2, 1)]
    pad_hi = [a[-1] + (a[-1] - a[-2]) * k for k in (1, 2)]
    padded = np.concatenate([np.stack(pad_lo), a, np.stack(pad_hi)])
    pos = np.arange(n * factor) / factor
    base = np.floor(pos).astype(int)
    w = _cubic_weights(pos - base)
    out = sum(w[:, k].reshape((-1,) + (1,) * (a.ndim - 1)) * padded[base + k + 1]
              for k in range(4))
    return np.moveaxis(out, 0, axis)


def upsample_radiance_map(lr: RadianceMap, factor: int = 4, expected: int = 128) -> RadianceMap:
    """Separable bicubic upsampling, clamped to each channel's input range.

    High-res sample ``j`` sits at low-res coordinate ``j / factor``, so every
    ``factor``-th output coincides with an input sample.
    """
    if expected is not None and lr.rgba.shape[1:3] != (expected, expected):
        raise ValueError(f"expected a {expected}x{expected} map, got {lr.rgba.shape[1:3]}")
    up = _upsample_axis(_upsample_axis(lr.rgba, 1, factor), 2, factor)
    lo = lr.rgba.min(axis=(1, 2), keepdims=True)
    hi = lr.rgba.max(axis=(1, 2), keepdims=True)
    up = np.clip(up, lo, hi).astype(np.float32)
    return RadianceMap(up, lr.levels, lr.origin.copy(), lr.spacing / factor, lr.axis)


def sample_radiance_map(rmap: RadianceMap, points, level_index):
    """Bilinear lookup of ``(c, alpha)`` for points on the given manifolds.

    Points projecting outside the sampled square return zero colour and alpha.
    Accepts torch tensors (differentiable in ``points``) or numpy arrays.
    """
    is_torch = torch.is_tensor(points)
    pts = points if is_torch else torch.as_tensor(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    lev = torch.as_tensor(np.asarray(level_index)).reshape(-1) if not torch.is_tensor(level_index) \
        else level_index.reshape(-1)
    grid = torch.as_tensor(rmap.rgba).to(pts.dtype)
    n = rmap.rgba.shape[1]
    gx = (pts[:, 0] - float(rmap.origin[0])) / rmap.spacing
    gy = (pts[:, 1] - float(rmap.origin[1])) / rmap.spacing
    inside = (gx >= 0) & (gx <= n - 1) & (gy >= 0) & (gy <= n - 1)
    gxc = gx.clamp(0, n - 1)
    gyc = gy.clamp(0, n - 1)
    x0 = torch.floor(gxc).long().clamp(max=n - 2)
    y0 = torch.floor(gyc).long().clamp(max=n - 2)
    fx = (gxc - x0)[:, None]
    fy = (gyc - y0)[:, None]
    v = ((1 - fy) * ((1 - fx) * grid[lev, y0, x0] + fx * grid[lev, y0, x0 + 1])
         + fy * ((1 - fx) * grid[lev, y0 + 1, x0] + fx * grid[lev, y0 + 1, x0 + 1]))
    v = v * inside[:, None].to(v.dtype)
    c, a = v[:, :3], v[:, 3]
    if is_torch:
        return c, a
    shape = np.shape(points)[:-1]
    return c.numpy().reshape(shape + (3,)), a.numpy().reshape(shape)


def dump_radiance_map(rmap: RadianceMap, directory) -> list:
    """One RGBA PNG per manifold plus ``radiance_map.txt`` with levels and bounds."""
    from PIL import Image

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for l in range(rmap.rgba.shape[0]):
        img = np.clip(np.rint(rmap.rgba[l, ::-1] * 255.0), 0, 255).astype(np.uint8)
        p = out / f"manifold_{l:02d}.png"
        Image.fromarray(img, mode="RGBA").save(p)
        paths.append(p)
    x0, x1, y0, y1 = (repr(float(v)) for v in rmap.extent)
    ox, oy = (repr(float(v)) for v in rmap.origin)
    lines = [f"axis {rmap.axis}", f"resolution {rmap.resolution}",
             f"origin {ox} {oy}", f"spacing {float(rmap.spacing)!r}",
             f"bounds {x0} {x1} {y0} {y1}",
             "levels " + " ".join(repr(float(v)) for v in rmap.levels),
             "rows top-to-bottom = +y to -y; columns left-to-right = -x to +x"]
    (out / "radiance_map.txt").write_text("\n".join(lines) + "\n")
    return paths


def load_radiance_map(directory) -> RadianceMap:
    from PIL import Image

    d = Path(directory)
    meta = {}
    for line in (d / "radiance_map.txt").read_text().splitlines():
        key, _, rest = line.partition(" ")
        meta[key] = rest.split()
    levels = np.array([float(v) for v in meta["levels"]])
    planes = [np.asarray(Image.open(d / f"manifold_{l:02d}.png"), dtype=np.float32)[::-1] / 255.0
              for l in range(len(levels))]
    return RadianceMap(np.stack(planes), levels,
                       np.array([float(v) for v in meta["origin"]]), float(meta["spacing"][0]),
                       meta["axis"][0])
