"""Procedural stand-ins for the face blendshape model and the skinned body model.

Canonical space is right-handed, meters, +y up and +z out of the face.  The
head-and-shoulders region is centred on the origin.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from ._binary import (DimensionMismatchError, MalformedHeaderError, ModelFormatError,
                      Reader, TruncatedPayloadError, Writer)

__all__ = [
    "BlendshapeFaceModel", "SkinnedBodyModel", "generate_toy_models", "save_model",
    "load_model", "joint_regressor", "JOINT_NAMES", "CONTROLLED_JOINTS", "HEAD_RADIUS",
    "ModelFormatError", "MalformedHeaderError", "DimensionMismatchError",
    "TruncatedPayloadError",
]

JOINT_NAMES = ("pelvis", "spine", "chest", "neck", "head", "left_collar",
               "right_collar", "left_shoulder", "right_shoulder", "spare")
CONTROLLED_JOINTS = ("head", "neck", "left_collar", "right_collar",
                     "left_shoulder", "right_shoulder")

HEAD_CENTER = np.array([0.0, 0.15, 0.0])
HEAD_RADIUS = 0.10

_REST_JOINTS = np.array([
    [0.0, -0.34, 0.0],
    [0.0, -0.24, 0.0],
    [0.0, -0.14, 0.0],
    [0.0, -0.03, 0.0],
    [0.0, 0.07, 0.0],
    [0.03, -0.06, 0.0],
    [-0.03, -0.06, 0.0],
    [0.15, -0.09, 0.0],
    [-0.15, -0.09, 0.0],
    [0.0, -0.44, 0.0],
])
_PARENTS = np.array([-1, 0, 1, 2, 3, 2, 2, 5, 6, 0])
# far end of the bone owned by each joint; weights fall off with distance to the bone
_BONE_ENDS = np.array([
    [0.0, -0.24, 0.0],
    [0.0, -0.14, 0.0],
    [0.0, -0.03, 0.0],
    [0.0, 0.07, 0.0],
    [0.0, 0.25, 0.0],
    [0.15, -0.09, 0.0],
    [-0.15, -0.09, 0.0],
    [0.26, -0.14, 0.0],
    [-0.26, -0.14, 0.0],
    [0.0, -0.54, 0.0],
])
_SKIN_SIGMA = 0.035
_FACE_RADIUS = 0.094


def _readonly(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class BlendshapeFaceModel:
    """Linear face model ``S = mean + B_id z_id + B_exp z_exp``.

    Bases are stored row-major over flattened ``(V, 3)`` vertex coordinates.
    """

    mean_vertices: np.ndarray
    identity_basis: np.ndarray
    expression_basis: np.ndarray
    landmark_indices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean_vertices", _readonly(self.mean_vertices, np.float32))
        object.__setattr__(self, "identity_basis", _readonly(self.identity_basis, np.float32))
        object.__setattr__(self, "expression_basis", _readonly(self.expression_basis, np.float32))
        object.__setattr__(self, "landmark_indices", _readonly(self.landmark_indices, np.int32))
        object.__setattr__(self, "triangles", _readonly(self.triangles, np.int32))
        v = self.n_vertices
        if self.mean_vertices.ndim != 2 or self.mean_vertices.shape[1] != 3:
            raise ValueError("mean_vertices must be (V, 3)")
        for name in ("identity_basis", "expression_basis"):
            basis = getattr(self, name)
            if basis.ndim != 2 or basis.shape[0] != 3 * v:
                raise ValueError(f"{name} must have 3V = {3 * v} rows")
            if not np.all(np.isfinite(basis)):
                raise ValueError(f"{name} has non-finite entries")
        if np.any(self.landmark_indices < 0) or np.any(self.landmark_indices >= v):
            raise ValueError("landmark index out of range")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= v):
            raise ValueError("triangle references a missing vertex")

    @property
    def n_vertices(self) -> int:
        return self.mean_vertices.shape[0]

    @property
    def d_id(self) -> int:
        return self.identity_basis.shape[1]

    @property
    def d_exp(self) -> int:
        return self.expression_basis.shape[1]

    def expression_offsets(self, z_exp) -> np.ndarray:
        """Per-vertex displacement ``B_exp z_exp`` as a ``(V, 3)`` array."""
        z_exp = np.asarray(z_exp, dtype=np.float64)
        return (self.expression_basis.astype(np.float64) @ z_exp).reshape(-1, 3)

    def shape(self, z_id_face, z_exp) -> np.ndarray:
        z_id_face = np.asarray(z_id_face, dtype=np.float64)
        offsets = self.identity_basis.astype(np.float64) @ z_id_face
        return (self.mean_vertices.astype(np.float64) + offsets.reshape(-1, 3)
                + self.expression_offsets(z_exp))

    def landmarks(self, z_id_face, z_exp) -> np.ndarray:
        return self.shape(z_id_face, z_exp)[self.landmark_indices]


@dataclass(frozen=True, eq=False)
class SkinnedBodyModel:
    template_vertices: np.ndarray
    shape_basis: np.ndarray
    rest_joints: np.ndarray
    parents: np.ndarray
    skinning_weights: np.ndarray
    triangles: np.ndarray
    controlled_joints: np.ndarray
    head_center_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name, dt in (("template_vertices", np.float32), ("shape_basis", np.float32),
                         ("rest_joints", np.float32), ("parents", np.int32),
                         ("skinning_weights", np.float32), ("triangles", np.int32),
                         ("controlled_joints", np.int32), ("head_center_offset", np.float32)):
            object.__setattr__(self, name, _readonly(getattr(self, name), dt))
        v, nj = self.n_vertices, self.n_joints
        if self.shape_basis.ndim != 2 or self.shape_basis.shape[0] != 3 * v:
            raise ValueError("shape_basis must have 3V rows")
        if self.skinning_weights.shape != (v, nj):
            raise ValueError("skinning_weights must be (V, N_J)")
        w = self.skinning_weights.astype(np.float64)
        if np.any(w < 0) or np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-6:
            raise ValueError("skinning weight rows must be nonnegative and sum to 1")
        if self.parents.shape != (nj,):
            raise ValueError("one parent per joint")
        _check_tree(self.parents)
        ctrl = self.controlled_joints
        if ctrl.shape != (6,) or len(set(ctrl.tolist())) != 6 or ctrl.min() < 0 or ctrl.max() >= nj:
            raise ValueError("controlled_joints must be 6 distinct joint indices")
        if self.head_center_offset.shape != (3,):
            raise ValueError("head_center_offset must be a 3-vector")

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.rest_joints.shape[0]

    @property
    def d_shape(self) -> int:
        return self.shape_basis.shape[1]

    @property
    def head_joint(self) -> int:
        return int(self.controlled_joints[0])

    @property
    def root_joint(self) -> int:
        return int(np.flatnonzero(self.parents < 0)[0])

    def shaped_vertices(self, z_body) -> np.ndarray:
        z_body = np.asarray(z_body, dtype=np.float64)
        offsets = (self.shape_basis.astype(np.float64) @ z_body).reshape(-1, 3)
        return self.template_vertices.astype(np.float64) + offsets


def _check_tree(parents):
    roots = np.flatnonzero(parents < 0)
    if len(roots) != 1:
        raise ValueError("joint graph must have exactly one root")
    for j in range(len(parents)):
        seen = set()
        k = j
        while parents[k] >= 0:
            if k in seen or parents[k] >= len(parents):
                raise ValueError("joint parent graph is not a tree")
            seen.add(k)
            k = parents[k]


def joint_regressor(body: SkinnedBodyModel, sigma: float = 0.06) -> np.ndarray:
    """Normalized Gaussian vertex weights around each rest joint, ``(N_J, V)``.

    Shaped joints are ``rest_joints + R @ (shaped - template)``, so the regressor
    reproduces the stored rest joints exactly at zero shape.
    """
    verts = body.template_vertices.astype(np.float64)
    joints = body.rest_joints.astype(np.float64)
    d2 = ((joints[:, None, :] - verts[None, :, :]) ** 2).sum(-1)
    logits = -d2 / sigma ** 2
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# procedural meshes

def _revolve(axial, radius, n_around, axis):
    """Surface of revolution; profile points with zero radius become poles."""
    axial = np.asarray(axial, float)
    radius = np.asarray(radius, float)
    ang = 2 * np.pi * np.arange(n_around) / n_around
    verts, rings = [], []
    for a, r in zip(axial, radius):
        if r <= 1e-12:
            rings.append([len(verts)])
            verts.append((a, 0.0, 0.0))
        else:
            idx = list(range(len(verts), len(verts) + n_around))
            rings.append(idx)
            verts.extend((a, r * np.cos(t), r * np.sin(t)) for t in ang)
    tris = []
    for r0, r1 in zip(rings[:-1], rings[1:]):
        if len(r0) == 1:
            tris.extend((r0[0], r1[(k + 1) % n_around], r1[k]) for k in range(n_around))
        elif len(r1) == 1:
            tris.extend((r0[k], r0[(k + 1) % n_around], r1[0]) for k in range(n_around))
        else:
            for k in range(n_around):
                k1 = (k + 1) % n_around
                tris.append((r0[k], r0[k1], r1[k1]))
                tris.append((r0[k], r1[k1], r1[k]))
    v = np.array(verts)
    # local (axial, c, s) -> world axes
    if axis == "x":
        v = v[:, [0, 1, 2]]
    elif axis == "y":
        v = np.stack([v[:, 2], v[:, 0], v[:, 1]], axis=1)
    else:
        v = np.stack([v[:, 1], v[:, 2], v[:, 0]], axis=1)
    return v, np.array(tris, dtype=np.int64)


def _sphere(center, radius, n_lat, n_around, axis="y"):
    beta = np.linspace(0.0, np.pi, n_lat + 1)
    v, t = _revolve(-radius * np.cos(beta), radius * np.sin(beta), n_around, axis)
    return v + center, t


def _merge(*parts):
    verts, tris, off = [], [], 0
    for v, t in parts:
        verts.append(v)
        tris.append(t + off)
        off += len(v)
    return np.concatenate(verts), np.concatenate(tris)


def _segment_distance(points, a, b):
    ab = b - a
    t = np.clip(((points - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * ab), axis=1)


def _build_body(rng, d_shape):
    head = _sphere(HEAD_CENTER, HEAD_RADIUS, 20, 28, axis="y")
    neck = _revolve(np.linspace(-0.04, 0.08, 7), np.full(7, 0.045), 16, "y")
    half, rad = 0.13, 0.13
    cap = np.linspace(np.pi, np.pi / 2, 7)[:-1]
    axial = np.concatenate([-half + rad * np.cos(cap), np.linspace(-half, half, 9),
                            half - rad * np.cos(cap[::-1])])
    radius = np.concatenate([rad * np.sin(cap), np.full(9, rad), rad * np.sin(cap[::-1])])
    torso_v, torso_t = _revolve(axial, radius, 28, "x")
    torso_v[:, 1] -= 0.14
    torso_v[:, 2] *= 0.65
    verts, tris = _merge(head, (neck[0], neck[1]), (torso_v, torso_t))
    part = np.concatenate([np.zeros(len(head[0])), np.ones(len(neck[0])),
                           np.full(len(torso_v), 2)])
    verts = verts + rng.normal(scale=5e-4, size=verts.shape)

    dist = np.stack([_segment_distance(verts, _REST_JOINTS[j], _BONE_ENDS[j])
                     for j in range(len(_REST_JOINTS))], axis=1)
    logits = -(dist / _SKIN_SIGMA) ** 2
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    w[w < 1e-12] = 0.0
    w /= w.sum(axis=1, keepdims=True)

    modes = np.zeros((len(verts), 3, 4))
    torso = part == 2
    modes[torso, 0, 0] = 0.1 * verts[torso, 0]
    is_head = part == 0
    modes[is_head, :, 1] = 0.08 * (verts[is_head] - HEAD_CENTER)
    lift = np.clip((verts[:, 1] + 0.02) / 0.1, 0.0, 1.0)
    modes[part < 2, 1, 2] = 0.015 * lift[part < 2]
    modes[torso, 2, 3] = 0.12 * verts[torso, 2]
    modes *= rng.uniform(0.9, 1.1, size=4)
    if d_shape <= 4:
        basis = modes[:, :, :d_shape]
    else:
        extra = rng.normal(size=(4, d_shape - 4)) / 4.0
        basis = np.concatenate([modes, modes @ extra], axis=2)
    basis = basis.reshape(3 * len(verts), d_shape)
    return verts, tris, w, basis


def _face_directions(u, v):
    z = np.sqrt(np.maximum(1.0 - u ** 2 - v ** 2, 0.05))
    d = np.stack([u, v, z], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def _landmark_layout():
    a = np.linspace(-1.35, 1.35, 17)
    jaw = np.stack([0.75 * np.sin(a), -0.7 * np.cos(a) + 0.05], 1)
    bu = np.linspace(0.15, 0.55, 5)
    brows = np.concatenate([np.stack([-bu[::-1], 0.4 + 0.04 * np.sin(np.pi * (bu - 0.15) / 0.4)], 1),
                            np.stack([bu, 0.4 + 0.04 * np.sin(np.pi * (bu - 0.15) / 0.4)], 1)])
    bridge = np.stack([np.zeros(4), np.linspace(0.25, -0.02, 4)], 1)
    nostril = np.stack([np.linspace(-0.15, 0.15, 5), np.full(5, -0.12)], 1)
    t6 = 2 * np.pi * np.arange(6) / 6
    eyes = np.concatenate([np.stack([c + 0.11 * np.cos(t6), 0.2 + 0.04 * np.sin(t6)], 1)
                           for c in (-0.33, 0.33)])
    t12 = 2 * np.pi * np.arange(12) / 12
    t8 = 2 * np.pi * np.arange(8) / 8
    mouth = np.concatenate([np.stack([0.28 * np.cos(t12), -0.38 + 0.1 * np.sin(t12)], 1),
                            np.stack([0.18 * np.cos(t8), -0.38 + 0.04 * np.sin(t8)], 1)])
    pts = np.concatenate([jaw, brows, bridge, nostril, eyes, mouth])
    return _face_directions(pts[:, 0], pts[:, 1])


def _bump(dirs, center_uv, width):
    c = _face_directions(np.asarray(center_uv[0]), np.asarray(center_uv[1]))
    return np.exp(-((dirs - c) ** 2).sum(-1) / (2 * width ** 2))


def _build_face(rng, d_id, d_exp):
    verts, tris = _sphere(np.zeros(3), 1.0, 32, 48, axis="y")
    dirs = verts / np.linalg.norm(verts, axis=1, keepdims=True)
    radius = (_FACE_RADIUS + 0.011 * _bump(dirs, (0.0, -0.08), 0.12)
              + 0.004 * _bump(dirs, (0.0, 0.4), 0.2) + 0.004 * _bump(dirs, (0.0, -0.62), 0.15))
    mean = HEAD_CENTER + dirs * radius[:, None]

    lm_dirs = _landmark_layout()
    landmarks = np.argmax(lm_dirs @ dirs.T, axis=1)

    # identity: smooth radial fields from low-order polynomials of the direction
    x, y, z = dirs.T
    polys = np.stack([x, y, z, x * y, y * z, x * z, x * x - y * y, 3 * z * z - 1,
                      x * y * z, y * (5 * z * z - 1)], axis=1)
    mix = rng.normal(size=(polys.shape[1], d_id))
    mix /= np.linalg.norm(mix, axis=0, keepdims=True)
    radial = polys @ mix
    id_basis = 0.003 * radial[:, None, :] * dirs[:, :, None]

    jit = lambda c: (c[0] + rng.normal(scale=0.03), c[1] + rng.normal(scale=0.03))
    # (centre uv, width, direction, amplitude); broad smooth modes as in real blendshape rigs
    patterns = [
        ((0.0, -0.55), 0.5, np.array([0.0, -1.0, 0.0]), 0.024),
        ((0.28, -0.38), 0.24, np.array([0.5, 0.8, 0.0]), 0.016),
        ((0.0, 0.4), 0.5, np.array([0.0, 1.0, 0.0]), 0.012),
        ((0.33, 0.2), 0.2, np.array([0.0, -1.0, 0.0]), 0.008),
        ((0.0, -0.38), 0.3, np.array([0.0, 0.0, 1.0]), 0.016),
        ((0.45, -0.15), 0.3, None, 0.016),
        ((0.0, -0.6), 0.4, np.array([1.0, 0.0, 0.0]), 0.016),
        ((-0.28, -0.38), 0.24, np.array([0.0, -1.0, 0.0]), 0.012),
    ]
    exp_basis = np.zeros((len(mean), 3, d_exp))
    for k in range(d_exp):
        center, width, direction, amp = patterns[k % len(patterns)]
        amp *= rng.uniform(0.8, 1.2)
        c = jit(center)
        w = _bump(dirs, c, width)
        if (k % len(patterns)) in (1, 3, 5):
            # mirrored pair so the pattern is symmetric
            w = w + _bump(dirs, (-c[0], c[1]), width)
        if direction is None:
            disp = dirs * w[:, None]
        else:
            d = np.broadcast_to(direction, dirs.shape).copy()
            if (k % len(patterns)) == 1:
                d[:, 0] *= np.sign(dirs[:, 0])
            disp = d * w[:, None]
        if k >= len(patterns):
            disp = disp * rng.normal()
        exp_basis[:, :, k] = amp * disp
    return (mean, id_basis.reshape(3 * len(mean), d_id),
            exp_basis.reshape(3 * len(mean), d_exp), landmarks, tris)


def generate_toy_models(seed: int = 0, d_id_face: int = 16, d_exp: int = 8,
                        d_id_body: int = 4):
    """Build a deterministic (face, body) pair from ``seed``."""
    rng = np.random.default_rng(seed)
    verts, tris, w, shape_basis = _build_body(rng, d_id_body)
    head = JOINT_NAMES.index
    body = SkinnedBodyModel(
        template_vertices=verts,
        shape_basis=shape_basis,
        rest_joints=_REST_JOINTS,
        parents=_PARENTS,
        skinning_weights=w,
        triangles=tris,
        controlled_joints=[head(n) for n in CONTROLLED_JOINTS],
        head_center_offset=HEAD_CENTER - _REST_JOINTS[head("head")],
    )
    mean, id_basis, exp_basis, landmarks, ftris = _build_face(rng, d_id_face, d_exp)
    face = BlendshapeFaceModel(mean, id_basis, exp_basis, landmarks, ftris)
    return face, body


# ---------------------------------------------------------------------------
# serialization

MAGIC = b"APGM"
VERSION = 1
_KIND_FACE, _KIND_BODY = 1, 2

PathLike = Union[str, Path]


def save_model(model, path: PathLike) -> None:
    buf = io.BytesIO()
    w = Writer(buf)
    w.magic(MAGIC, VERSION)
    if isinstance(model, BlendshapeFaceModel):
        w.words(_KIND_FACE, model.n_vertices, model.d_id, model.d_exp,
                len(model.landmark_indices), len(model.triangles))
        w.section("MEAN", model.mean_vertices)
        w.section("BID", model.identity_basis)
        w.section("BEXP", model.expression_basis)
        w.section("LMKS", model.landmark_indices)
        w.section("TRIS", model.triangles)
    elif isinstance(model, SkinnedBodyModel):
        w.words(_KIND_BODY, model.n_vertices, model.d_shape, model.n_joints,
                len(model.triangles))
        w.section("TMPL", model.template_vertices)
        w.section("BSHP", model.shape_basis)
        w.section("JNTS", model.rest_joints)
        w.section("PRNT", model.parents)
        w.section("SKNW", model.skinning_weights)
        w.section("TRIS", model.triangles)
        w.section("CTRL", model.controlled_joints)
        w.section("HCTR", model.head_center_offset)
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    Path(path).write_bytes(buf.getvalue())


def load_model(path: PathLike):
    r = Reader(Path(path).read_bytes())
    r.magic(MAGIC, versions=(VERSION,))
    (kind,) = r.words(1)
    f32, i32 = np.float32, np.int32
    try:
        if kind == _KIND_FACE:
            v, d_id, d_exp, k, f = r.words(5)
            fields = dict(
                mean_vertices=r.section("MEAN", (v, 3), f32),
                identity_basis=r.section("BID", (3 * v, d_id), f32),
                expression_basis=r.section("BEXP", (3 * v, d_exp), f32),
                landmark_indices=r.section("LMKS", (k,), i32),
                triangles=r.section("TRIS", (f, 3), i32),
            )
            r.finish()
            return BlendshapeFaceModel(**fields)
        if kind == _KIND_BODY:
            v, d, nj, f = r.words(4)
            fields = dict(
                template_vertices=r.section("TMPL", (v, 3), f32),
                shape_basis=r.section("BSHP", (3 * v, d), f32),
                rest_joints=r.section("JNTS", (nj, 3), f32),
                parents=r.section("PRNT", (nj,), i32),
                skinning_weights=r.section("SKNW", (v, nj), f32),
                triangles=r.section("TRIS", (f, 3), i32),
                controlled_joints=r.section("CTRL", (6,), i32),
                head_center_offset=r.section("HCTR", (3,), f32),
            )
            r.finish()
            return SkinnedBodyModel(**fields)
    except ValueError as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise DimensionMismatchError(str(exc)) from exc
    raise MalformedHeaderError(f"unknown model kind {kind}")
