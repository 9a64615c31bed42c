"""Shared scene/code builders for the render tests and the golden-image generator."""
import numpy as np

from portraitgen.latents import POSE_DIM, CodeDistribution, LatentCodes, sample_codes
from portraitgen.render import RenderConfig
from portraitgen.camera import FaceCameraConfig

GOLDEN_FACE = "face_identity_32.ppm"


def identity_codes(scene, camera_pose=None):
    return LatentCodes(np.zeros(scene.d_id), np.zeros(scene.d_exp), np.zeros(POSE_DIM),
                       np.zeros(scene.d_eps), np.eye(4) if camera_pose is None else camera_pose)


def small_config(resolution=32, n_samples=16, **kw):
    face = FaceCameraConfig(resolution=resolution, n_samples=n_samples)
    return RenderConfig(resolution=resolution, n_samples=n_samples, face=face, **kw)


def random_codes(seed=0):
    return sample_codes(seed, CodeDistribution())
