"""Forward kinematics, linear blend skinning and inverse skinning of sample points."""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numba
import numpy as np

numba.config.THREADING_LAYER = "omp"

from .assets import SkinnedBodyModel, joint_regressor
from .geometry import axis_angle_to_matrix, rigid_inverse

BLEND_INVERSE = "blend_inverse"
INVERT_BLEND = "invert_blend"


@dataclass(frozen=True, eq=False)
class JointTransformSet:
    """Posed-from-rest joint transforms plus what the rig needs from the posed body.

    ``transforms[j]`` maps rest-space points to posed space for joint ``j``;
    ``inverses[j]`` is its exact rigid inverse.
    """

    transforms: np.ndarray
    inverses: np.ndarray
    world_frames: np.ndarray
    head_center: np.ndarray
    head_rotation: np.ndarray
    rest_vertices: np.ndarray
    rest_joints: np.ndarray
    root_joint: int = 0

    @property
    def n_joints(self) -> int:
        return self.transforms.shape[0]


def _topological_order(parents):
    depth = np.zeros(len(parents), dtype=int)
    for j in range(len(parents)):
        k = j
        while parents[k] >= 0:
            depth[j] += 1
            k = parents[k]
    return np.argsort(depth, kind="stable")


def pose_to_transforms(body: SkinnedBodyModel, z_id, z_pose, root_transform=None) -> JointTransformSet:
    """Joint transforms for shape ``z_id`` and the 6-joint axis-angle pose ``z_pose``.

    ``z_id`` may be the body part alone or the full identity code, in which case
    its trailing ``d_shape`` entries are used.  ``root_transform`` optionally
    places the whole body rigidly in the world.
    """
    z_id = np.asarray(z_id, dtype=np.float64).ravel()
    z_pose = np.asarray(z_pose, dtype=np.float64).ravel()
    if not (np.all(np.isfinite(z_id)) and np.all(np.isfinite(z_pose))):
        raise ValueError("codes contain NaN or infinite values")
    if z_id.shape[0] < body.d_shape:
        raise ValueError(f"identity code needs at least {body.d_shape} body entries")
    if z_pose.shape[0] != 3 * len(body.controlled_joints):
        raise ValueError("pose code must hold one axis-angle per controlled joint")
    z_body = z_id[z_id.shape[0] - body.d_shape:]

    template = body.template_vertices.astype(np.float64)
    shaped = body.shaped_vertices(z_body)
    joints = body.rest_joints.astype(np.float64) + joint_regressor(body) @ (shaped - template)

    nj = body.n_joints
    local_rot = np.broadcast_to(np.eye(3), (nj, 3, 3)).copy()
    local_rot[body.controlled_joints] = axis_angle_to_matrix(z_pose.reshape(-1, 3))

    frames = np.zeros((nj, 4, 4))
    for j in _topological_order(body.parents):
        p = body.parents[j]
        local = np.eye(4)
        local[:3, :3] = local_rot[j]
        local[:3, 3] = joints[j] - (joints[p] if p >= 0 else 0.0)
        frames[j] = local if p < 0 else frames[p] @ local

    transforms = frames.copy()
    transforms[:, :3, 3] -= np.einsum("jab,jb->ja", frames[:, :3, :3], joints)
    if root_transform is not None:
        root_transform = np.asarray(root_transform, dtype=np.float64)
        transforms = root_transform @ transforms
        frames = root_transform @ frames

    h = body.head_joint
    offset = np.append(body.head_center_offset.astype(np.float64), 1.0)
    head_center = (frames[h] @ offset)[:3]
    return JointTransformSet(
        transforms=transforms,
        inverses=rigid_inverse(transforms),
        world_frames=frames,
        head_center=head_center,
        head_rotation=frames[h, :3, :3].copy(),
        rest_vertices=shaped,
        rest_joints=joints,
        root_joint=body.root_joint,
    )


# ---------------------------------------------------------------------------
# uniform hash grid with exact ring-expansion nearest-vertex search

@numba.njit(cache=True)
def _cell_of(p, origin, h, dims):
    ix = min(max(int(np.floor((p[0] - origin[0]) / h)), 0), dims[0] - 1)
    iy = min(max(int(np.floor((p[1] - origin[1]) / h)), 0), dims[1] - 1)
    iz = min(max(int(np.floor((p[2] - origin[2]) / h)), 0), dims[2] - 1)
    return (ix * dims[1] + iy) * dims[2] + iz


@numba.njit(cache=True)
def _build_grid(points, origin, h, dims):
    n = points.shape[0]
    ncell = dims[0] * dims[1] * dims[2]
    cell = np.empty(n, dtype=np.int64)
    counts = np.zeros(ncell + 1, dtype=np.int64)
    for i in range(n):
        c = _cell_of(points[i], origin, h, dims)
        cell[i] = c
        counts[c + 1] += 1
    start = np.cumsum(counts)
    fill = start[:-1].copy()
    order = np.empty(n, dtype=np.int64)
    for i in range(n):
        order[fill[cell[i]]] = i
        fill[cell[i]] += 1
    return start, order


@numba.njit(cache=True)
def _nearest_one(x, y, z, points, start, order, origin, h, dims, cutoff):
    fx = (x - origin[0]) / h
    fy = (y - origin[1]) / h
    fz = (z - origin[2]) / h
    ix = int(np.floor(fx))
    iy = int(np.floor(fy))
    iz = int(np.floor(fz))
    m = min(fx - ix, ix + 1 - fx, fy - iy, iy + 1 - fy, fz - iz, iz + 1 - fz) * h
    r = max(0, -ix, ix - (dims[0] - 1), -iy, iy - (dims[1] - 1), -iz, iz - (dims[2] - 1))
    best = np.inf
    bi = -1
    while True:
        x0 = max(ix - r, 0)
        x1 = min(ix + r, dims[0] - 1)
        y0 = max(iy - r, 0)
        y1 = min(iy + r, dims[1] - 1)
        z0 = max(iz - r, 0)
        z1 = min(iz + r, dims[2] - 1)
        for cx in range(x0, x1 + 1):
            for cy in range(y0, y1 + 1):
                on_shell = abs(cx - ix) == r or abs(cy - iy) == r
                for cz in range(z0, z1 + 1):
                    if not on_shell and abs(cz - iz) != r:
                        continue
                    c = (cx * dims[1] + cy) * dims[2] + cz
                    for k in range(start[c], start[c + 1]):
                        p = order[k]
                        dx = points[p, 0] - x
                        dy = points[p, 1] - y
                        dz = points[p, 2] - z
                        d2 = dx * dx + dy * dy + dz * dz
                        if d2 < best or (d2 == best and p < bi):
                            best = d2
                            bi = p
        bound = r * h + m
        if best < bound * bound:
            break
        if bound > cutoff:
            break
        if ix - r <= 0 and iy - r <= 0 and iz - r <= 0 and \
                ix + r >= dims[0] - 1 and iy + r >= dims[1] - 1 and iz + r >= dims[2] - 1:
            break
        r += 1
    if best > cutoff * cutoff:
        return -1, best
    return bi, best


@numba.njit(parallel=True, cache=True)
def _nearest_many(queries, points, start, order, origin, h, dims, cutoff, out_idx, out_d2):
    for n in numba.prange(queries.shape[0]):
        i, d2 = _nearest_one(queries[n, 0], queries[n, 1], queries[n, 2], points, start,
                             order, origin, h, dims, cutoff)
        out_idx[n] = i
        out_d2[n] = d2


class SpatialHashGrid:
    """Uniform grid over a point set, stored as CSR buckets keyed by linear cell index."""

    def __init__(self, points, cell_size: float):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] == 0:
            raise ValueError("grid needs a nonempty (N, 3) point set")
        self.cell_size = float(cell_size)
        lo = self.points.min(axis=0)
        hi = self.points.max(axis=0)
        self.origin = lo - 1e-9
        self.dims = (np.floor((hi - self.origin) / self.cell_size).astype(np.int64) + 1)
        self.start, self.order = _build_grid(self.points, self.origin, self.cell_size, self.dims)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.dims))

    def nearest(self, queries, cutoff: float = np.inf):
        """Index of the closest point (lowest index on ties) and its distance.

        Queries with nothing within ``cutoff`` get index -1.
        """
        q = np.ascontiguousarray(np.asarray(queries, dtype=np.float64).reshape(-1, 3))
        idx = np.empty(len(q), dtype=np.int64)
        d2 = np.empty(len(q))
        _nearest_many(q, self.points, self.start, self.order, self.origin, self.cell_size,
                      self.dims, float(cutoff), idx, d2)
        return idx, np.sqrt(d2)


@functools.lru_cache(maxsize=16)
def _unique_edges(key: bytes, n: int) -> np.ndarray:
    tri = np.frombuffer(key, dtype=np.int64).reshape(n, 3)
    edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    return np.unique(np.sort(edges, axis=1), axis=0)


def mean_edge_length(vertices, triangles) -> float:
    tri = np.ascontiguousarray(triangles, dtype=np.int64)
    edges = _unique_edges(tri.tobytes(), len(tri))
    return float(np.linalg.norm(vertices[edges[:, 0]] - vertices[edges[:, 1]], axis=1).mean())


@dataclass(frozen=True, eq=False)
class PosedGuideMesh:
    vertices: np.ndarray
    weights: np.ndarray
    triangles: np.ndarray
    grid: SpatialHashGrid
    root_joint: int = 0
    cutoff: float = 0.5


def skin_vertices(body: SkinnedBodyModel, transforms: JointTransformSet,
                  cutoff: float = 0.5) -> PosedGuideMesh:
    weights = body.skinning_weights.astype(np.float64)
    blended = np.einsum("vj,jab->vab", weights, transforms.transforms)
    rest = transforms.rest_vertices
    posed = np.einsum("vab,vb->va", blended[:, :3, :3], rest) + blended[:, :3, 3]
    cell = 2.0 * mean_edge_length(posed, body.triangles)
    return PosedGuideMesh(posed, weights, np.asarray(body.triangles), SpatialHashGrid(posed, cell),
                          root_joint=transforms.root_joint, cutoff=cutoff)


def nearest_vertex_weights_batch(mesh: PosedGuideMesh, points):
    """Skinning weights of the closest guide vertex for each of ``(N, 3)`` points.

    Points beyond ``mesh.cutoff`` get one-hot root weights and index -1.
    """
    idx, _ = mesh.grid.nearest(points, mesh.cutoff)
    w = np.zeros((len(idx), mesh.weights.shape[1]))
    hit = idx >= 0
    w[hit] = mesh.weights[idx[hit]]
    w[~hit, mesh.root_joint] = 1.0
    return w, idx


def nearest_vertex_weights(mesh: PosedGuideMesh, x_t):
    w, idx = nearest_vertex_weights_batch(mesh, np.asarray(x_t, dtype=np.float64)[None])
    return w[0], int(idx[0])


def blend_inverse_transforms(weights, transforms: JointTransformSet, mode: str = BLEND_INVERSE):
    """Per-point blended rest-from-posed matrices ``(N, 4, 4)`` with exact affine last row."""
    weights = np.asarray(weights, dtype=np.float64)
    if mode == BLEND_INVERSE:
        T = np.einsum("nj,jab->nab", weights, transforms.inverses)
    elif mode == INVERT_BLEND:
        T = np.linalg.inv(np.einsum("nj,jab->nab", weights, transforms.transforms))
    else:
        raise ValueError(f"unknown blend mode {mode!r}")
    T[:, 3, :] = (0.0, 0.0, 0.0, 1.0)
    return T


def inverse_lbs_batch(points, weights, transforms: JointTransformSet, mode: str = BLEND_INVERSE):
    T = blend_inverse_transforms(weights, transforms, mode)
    pts = np.asarray(points, dtype=np.float64)
    x_p = np.einsum("nab,nb->na", T[:, :3, :3], pts) + T[:, :3, 3]
    return x_p, T


def inverse_lbs(x_t, w, transforms: JointTransformSet, mode: str = BLEND_INVERSE):
    x_p, T = inverse_lbs_batch(np.asarray(x_t, dtype=np.float64)[None],
                               np.asarray(w, dtype=np.float64)[None], transforms, mode)
    return x_p[0], T[0]
