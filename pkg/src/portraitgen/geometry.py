"""Small rigid-transform helpers shared across modules."""
import numpy as np


def axis_angle_to_matrix(aa) -> np.ndarray:
    """Rodrigues' formula; accepts ``(..., 3)`` and returns ``(..., 3, 3)``."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    safe = np.where(theta > 0, theta, 1.0)
    k = aa / safe
    kx, ky, kz = k[..., 0], k[..., 1], k[..., 2]
    zero = np.zeros_like(kx)
    K = np.stack([zero, -kz, ky, kz, zero, -kx, -ky, kx, zero], axis=-1).reshape(aa.shape[:-1] + (3, 3))
    s = np.sin(theta)[..., None]
    c = np.cos(theta)[..., None]
    eye = np.broadcast_to(np.eye(3), K.shape)
    R = eye + s * K + (1 - c) * (K @ K)
    return np.where((theta > 0)[..., None], R, eye)


def rigid(R=None, t=None) -> np.ndarray:
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    if t is not None:
        T[:3, 3] = t
    return T


def rigid_inverse(T) -> np.ndarray:
    """Inverse of ``(..., 4, 4)`` rigid transforms using the transpose of the rotation."""
    T = np.asarray(T, dtype=np.float64)
    R = T[..., :3, :3]
    t = T[..., :3, 3]
    out = np.zeros_like(T)
    Rt = np.swapaxes(R, -1, -2)
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", Rt, t)
    out[..., 3, 3] = 1.0
    return out


def normalize(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-from-camera pose for a camera at ``eye`` looking along -z at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = normalize(np.asarray(target, dtype=np.float64) - eye)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(right)
    if n < 1e-9:
        raise ValueError("up vector is parallel to the viewing direction")
    right /= n
    true_up = np.cross(right, forward)
    return rigid(np.stack([right, true_up, -forward], axis=1), eye)


def orbit_pose(yaw, pitch, radius, target=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Camera on a sphere around ``target``; yaw about +y, pitch lifts toward +y."""
    target = np.asarray(target, dtype=np.float64)
    offset = radius * np.array([np.sin(yaw) * np.cos(pitch), np.sin(pitch),
                                np.cos(yaw) * np.cos(pitch)])
    return look_at(target + offset, target)
