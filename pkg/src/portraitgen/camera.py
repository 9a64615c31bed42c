"""Pinhole cameras, ray sampling and the head-anchored face camera."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assets import HEAD_RADIUS
from .geometry import axis_angle_to_matrix, normalize, rigid


@dataclass
class Camera:
    """Pinhole camera looking down its local -z axis with +y up.

    ``pose`` is world-from-camera.  Pixel ``(i, j)`` has its centre at
    ``(j + 0.5, i + 0.5)`` in image coordinates.
    """

    focal: float
    cx: float
    cy: float
    height: int
    width: int
    pose: np.ndarray
    near: float
    far: float
    n_samples: int = 32

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        if not self.near < self.far:
            raise ValueError("near must be smaller than far")
        if self.n_samples < 2:
            raise ValueError("need at least two samples per ray")

    @property
    def position(self) -> np.ndarray:
        return self.pose[:3, 3].copy()

    @property
    def forward(self) -> np.ndarray:
        return -self.pose[:3, 2]

    @classmethod
    def centered(cls, pose, resolution, focal, near, far, n_samples=32, width=None):
        h = int(resolution)
        w = int(width or resolution)
        return cls(focal, w / 2.0, h / 2.0, h, w, pose, near, far, n_samples)


@dataclass
class Rays:
    origins: np.ndarray      # (H, W, 3)
    directions: np.ndarray   # (H, W, 3), unit length
    t: np.ndarray            # (H, W, D)

    @property
    def points(self) -> np.ndarray:
        return self.origins[..., None, :] + self.t[..., None] * self.directions[..., None, :]

    @property
    def shape(self):
        return self.t.shape


def generate_rays(camera: Camera, jitter: bool = False, seed: int = 0) -> Rays:
    """Pixel-centre rays with ``D`` stratified distances in ``[near, far]``.

    Without jitter each stratum contributes its midpoint, so samples are evenly
    spaced; with jitter the offset inside each stratum is drawn from ``seed``.
    """
    H, W, D = camera.height, camera.width, camera.n_samples
    jj, ii = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    local = np.stack([(jj - camera.cx) / camera.focal, -(ii - camera.cy) / camera.focal,
                      -np.ones_like(jj)], axis=-1)
    dirs = normalize(local @ camera.pose[:3, :3].T)
    origins = np.broadcast_to(camera.pose[:3, 3], dirs.shape).copy()
    step = (camera.far - camera.near) / D
    if jitter:
        u = np.random.default_rng(seed).uniform(size=(H, W, D))
    else:
        u = np.full((H, W, D), 0.5)
    t = camera.near + (np.arange(D) + u) * step
    return Rays(origins, dirs, t)


def portrait_camera(pose, resolution: int = 128, n_samples: int = 32,
                    focal_scale: float = 2.2, depth_range: float = 0.35) -> Camera:
    """Main camera; ``focal_scale`` is focal length in units of image width."""
    pose = np.asarray(pose, dtype=np.float64)
    dist = float(np.linalg.norm(pose[:3, 3]))
    return Camera.centered(pose, resolution, focal_scale * resolution,
                           max(dist - depth_range, 1e-3), dist + depth_range, n_samples)


@dataclass
class FaceCameraConfig:
    """Face camera rig in the head joint's frame.

    ``local_yaw``/``local_pitch`` orbit the camera around the head centre in
    head-local coordinates; zero gives a frontal view.  ``focal=None`` picks the
    focal length so the head sphere spans ``head_fraction`` of the image.
    """

    radius: float = 0.35
    resolution: int = 128
    n_samples: int = 32
    focal: float | None = None
    head_fraction: float = 0.7
    depth_range: float = 0.2
    local_yaw: float = 0.0
    local_pitch: float = 0.0

    def focal_length(self) -> float:
        if self.focal is not None:
            return float(self.focal)
        half_angle = np.arcsin(min(HEAD_RADIUS / self.radius, 0.999))
        return self.head_fraction * (self.resolution / 2.0) / np.tan(half_angle)


_WORLD_UP = np.array([0.0, 1.0, 0.0])


def face_camera_from_head(transforms, config: FaceCameraConfig = None) -> Camera:
    """Camera placed around the posed head and aimed exactly at its centre."""
    config = config or FaceCameraConfig()
    center = np.asarray(transforms.head_center, dtype=np.float64)
    R_head = np.asarray(transforms.head_rotation, dtype=np.float64)
    local = axis_angle_to_matrix([0.0, config.local_yaw, 0.0]) @ \
        axis_angle_to_matrix([-config.local_pitch, 0.0, 0.0])
    R = R_head @ local
    position = center + R @ np.array([0.0, 0.0, config.radius])
    forward = normalize(center - position)
    for up in (R_head @ _WORLD_UP, _WORLD_UP, np.array([0.0, 0.0, 1.0])):
        right = np.cross(forward, up)
        if np.linalg.norm(right) > 1e-6:
            break
    right = normalize(right)
    true_up = np.cross(right, forward)
    pose = rigid(np.stack([right, true_up, -forward], axis=1), position)
    return Camera.centered(pose, config.resolution, config.focal_length(),
                           max(config.radius - config.depth_range, 1e-3),
                           config.radius + config.depth_range, config.n_samples)
