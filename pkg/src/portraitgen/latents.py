"""Generator input codes, their sampling distributions and code-sequence files."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .assets import CONTROLLED_JOINTS
from .geometry import orbit_pose

POSE_DIM = 3 * len(CONTROLLED_JOINTS)


@dataclass
class LatentCodes:
    z_id: np.ndarray
    z_exp: np.ndarray
    z_pose: np.ndarray
    eps: np.ndarray
    camera_pose: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        for name in ("z_id", "z_exp", "z_pose", "eps"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).ravel())
        self.camera_pose = np.asarray(self.camera_pose, dtype=np.float64)
        if self.z_pose.shape != (POSE_DIM,):
            raise ValueError(f"z_pose must have {POSE_DIM} entries")
        if np.any(np.linalg.norm(self.z_pose.reshape(-1, 3), axis=1) > np.pi + 1e-9):
            raise ValueError("axis-angle magnitude exceeds pi")

    def joint_rotation(self, joint: str) -> np.ndarray:
        k = CONTROLLED_JOINTS.index(joint)
        return self.z_pose[3 * k:3 * k + 3]

    def replace(self, **changes) -> "LatentCodes":
        values = dict(z_id=self.z_id, z_exp=self.z_exp, z_pose=self.z_pose,
                      eps=self.eps, camera_pose=self.camera_pose)
        values.update(changes)
        return LatentCodes(**{k: np.array(v, dtype=np.float64) for k, v in values.items()})


@dataclass
class CodeDistribution:
    """Truncated normal per code block plus a uniform yaw/pitch orbit camera.

    ``truncation`` bounds are in units of the block's scale.
    """

    d_id_face: int = 16
    d_id_body: int = 4
    d_exp: int = 8
    d_eps: int = 32
    id_mean: float | np.ndarray = 0.0
    id_scale: float | np.ndarray = 1.0
    exp_mean: float | np.ndarray = 0.0
    exp_scale: float | np.ndarray = 1.0
    pose_mean: float | np.ndarray = 0.0
    pose_scale: float | np.ndarray = 0.15
    code_truncation: Tuple[float, float] = (-2.0, 2.0)
    eps_truncation: Tuple[float, float] = (-np.inf, np.inf)
    yaw_range: Tuple[float, float] = (-0.4, 0.4)
    pitch_range: Tuple[float, float] = (-0.15, 0.15)
    camera_radius: float = 1.3
    camera_target: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for lo, hi in (self.code_truncation, self.eps_truncation, self.yaw_range,
                       self.pitch_range):
            if not lo <= hi:
                raise ValueError("truncation bounds must be ordered")
        for s in (self.id_scale, self.exp_scale, self.pose_scale):
            if np.any(np.asarray(s) < 0):
                raise ValueError("scales must be nonnegative")

    @property
    def d_id(self) -> int:
        return self.d_id_face + self.d_id_body


def _truncated_normal(rng, size, lo, hi):
    x = rng.standard_normal(size)
    bad = (x < lo) | (x > hi)
    while np.any(bad):
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = (x < lo) | (x > hi)
    return x


def _block(rng, n, mean, scale, trunc):
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), (n,))
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (n,))
    return mean + scale * _truncated_normal(rng, n, *trunc)


def sample_codes(rng_seed: int, dist: CodeDistribution) -> LatentCodes:
    rng = np.random.default_rng(rng_seed)
    z_id = _block(rng, dist.d_id, dist.id_mean, dist.id_scale, dist.code_truncation)
    z_exp = _block(rng, dist.d_exp, dist.exp_mean, dist.exp_scale, dist.code_truncation)
    z_pose = _block(rng, POSE_DIM, dist.pose_mean, dist.pose_scale, dist.code_truncation)
    aa = z_pose.reshape(-1, 3)
    norms = np.linalg.norm(aa, axis=1, keepdims=True)
    aa = np.where(norms > np.pi, aa * (np.pi / np.maximum(norms, 1e-300)), aa)
    eps = _truncated_normal(rng, dist.d_eps, *dist.eps_truncation)
    yaw = rng.uniform(*dist.yaw_range) if dist.yaw_range[1] > dist.yaw_range[0] else dist.yaw_range[0]
    pitch = rng.uniform(*dist.pitch_range) if dist.pitch_range[1] > dist.pitch_range[0] else dist.pitch_range[0]
    cam = orbit_pose(yaw, pitch, dist.camera_radius, dist.camera_target)
    return LatentCodes(z_id, z_exp, aa.ravel(), eps, cam)


def worker_seed(base_seed: int, worker_index: int) -> int:
    """Independent per-worker seed stream derived by hashing (base, worker)."""
    return int(np.random.SeedSequence([base_seed, worker_index]).generate_state(1, np.uint64)[0])


def split_identity(z_id, d_id_face: int):
    z_id = np.asarray(z_id)
    if z_id.ndim != 1 or not 0 <= d_id_face <= z_id.shape[0]:
        raise ValueError(f"cannot split identity code of shape {z_id.shape} at {d_id_face}")
    return z_id[:d_id_face], z_id[d_id_face:]


def concat_identity(face_part, body_part) -> np.ndarray:
    return np.concatenate([np.asarray(face_part), np.asarray(body_part)])


# ---------------------------------------------------------------------------
# code-sequence files: one whitespace-delimited record per frame,
#   frame_index  z_exp[0..d_exp)  z_pose[0..18)  yaw  pitch

@dataclass
class SequenceFrame:
    index: int
    z_exp: np.ndarray
    z_pose: np.ndarray
    yaw: float
    pitch: float


def sequence_columns(d_exp: int) -> int:
    return 1 + d_exp + POSE_DIM + 2


def write_code_sequence(path, frames: List[SequenceFrame]) -> None:
    lines = []
    for f in frames:
        values = [str(f.index)] + [repr(float(v)) for v in np.concatenate(
            [f.z_exp, f.z_pose, [f.yaw, f.pitch]])]
        lines.append(" ".join(values))
    Path(path).write_text("\n".join(lines) + "\n")


def read_code_sequence(path, d_exp: int) -> List[SequenceFrame]:
    want = sequence_columns(d_exp)
    frames = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != want:
            raise ValueError(f"{path}:{lineno}: expected {want} columns, found {len(parts)}")
        vals = np.array([float(p) for p in parts[1:]])
        frames.append(SequenceFrame(int(parts[0]), vals[:d_exp],
                                    vals[d_exp:d_exp + POSE_DIM],
                                    float(vals[-2]), float(vals[-1])))
    return frames
