"""Full generator pipeline: posing, two-stage deformation, manifold intersection, compositing."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .assets import BlendshapeFaceModel, SkinnedBodyModel
from .camera import Camera, FaceCameraConfig, face_camera_from_head, generate_rays, portrait_camera
from .deformation import (ExpressionDeformNet, PoseDeformNet, apply_volume, assemble_volume,
                          process_tensor, tensor_to_volume, volume_to_tensor)
from .latents import LatentCodes
from .manifolds import (ManifoldField, RadianceMap, RadianceNet, intersect_batch,
                        rasterize_radiance_map, sample_radiance_map, upsample_radiance_map)
from .skinning import BLEND_INVERSE, JointTransformSet, PosedGuideMesh, pose_to_transforms, skin_vertices

DIRECT = "direct"
MAP = "map"


def set_threads(n: int | None) -> int:
    """Apply a thread budget to torch and numba; ``None`` keeps the hardware default."""
    if n is None:
        return torch.get_num_threads()
    n = max(1, int(n))
    torch.set_num_threads(n)
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return n


class Scene(nn.Module):
    """Parametric models plus the four learned networks of the generator.

    Networks are built under a private RNG seeded by ``seed`` so construction
    never disturbs the global torch generator.
    """

    def __init__(self, face: BlendshapeFaceModel, body: SkinnedBodyModel, d_eps: int = 32,
                 seed: int = 0, background=(1.0, 1.0, 1.0), blend_mode: str = BLEND_INVERSE,
                 pose_hidden: int = 16, field: nn.Module = None, radiance_net: RadianceNet = None,
                 guide_cutoff: float = 0.5):
        super().__init__()
        self.face, self.body = face, body
        self.d_id = face.d_id + body.d_shape
        self.d_exp, self.d_eps = face.d_exp, d_eps
        self.background = tuple(float(b) for b in background)
        self.blend_mode = blend_mode
        self.guide_cutoff = guide_cutoff
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.pose_net = PoseDeformNet(hidden=pose_hidden)
            self.exp_net = ExpressionDeformNet(self.d_id, self.d_exp)
            self.field = field if field is not None else ManifoldField()
            self.radiance_net = radiance_net if radiance_net is not None else RadianceNet(self.d_id, d_eps)
        self._maps = {}

    @property
    def levels(self) -> torch.Tensor:
        return self.field.levels

    @property
    def dtype(self):
        return self.radiance_net.alpha_head.weight.dtype

    def radiance_maps(self, codes: LatentCodes, resolution: int = 128, upsample: bool = True) -> RadianceMap:
        """Rasterized (and optionally 4x upsampled) maps for the codes' ``(z_id, eps)``, cached."""
        key = (codes.z_id.tobytes(), codes.eps.tobytes(), resolution, upsample)
        if key not in self._maps:
            m = rasterize_radiance_map(self.radiance_net, self.field, codes.z_id, codes.eps, resolution)
            self._maps[key] = upsample_radiance_map(m, 4, resolution) if upsample else m
        return self._maps[key]

    def clear_cache(self):
        self._maps.clear()


@dataclass
class PosedScene:
    transforms: JointTransformSet
    guide: PosedGuideMesh


def pose_scene(scene: Scene, codes: LatentCodes, root_transform=None) -> PosedScene:
    transforms = pose_to_transforms(scene.body, codes.z_id, codes.z_pose, root_transform)
    return PosedScene(transforms, skin_vertices(scene.body, transforms, scene.guide_cutoff))


@dataclass
class RenderConfig:
    resolution: int = 128
    n_samples: int = 32
    mode: str = DIRECT
    map_resolution: int = 128
    map_upsample: bool = True
    jitter: bool = False
    jitter_seed: int = 0
    focal_scale: float = 2.2
    depth_range: float = 0.35
    face: FaceCameraConfig = field(default_factory=FaceCameraConfig)

    def __post_init__(self):
        if self.mode not in (DIRECT, MAP):
            raise ValueError(f"render mode must be {DIRECT!r} or {MAP!r}")


@dataclass
class RenderedImage:
    color: np.ndarray          # (H, W, 3) in [0, 1]
    transmittance: np.ndarray  # (H, W) final transmittance

    @property
    def shape(self):
        return self.color.shape[:2]

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.rint(self.color * 255.0), 0, 255).astype(np.uint8)

    def write_ppm(self, path) -> None:
        write_ppm(path, self.to_uint8())

    def write_png(self, path) -> None:
        from PIL import Image

        Image.fromarray(self.to_uint8(), mode="RGB").save(path)


def write_ppm(path, pixels: np.ndarray) -> None:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w = pixels.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6" or int(parts[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(parts[1]), int(parts[2])
    pix = np.frombuffer(parts[4], dtype=np.uint8)
    if pix.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return pix.reshape(h, w, 3)


def composite(alpha, color, background=None):
    """Front-to-back compositing of ``(..., M)`` opacities and ``(..., M, 3)`` colours.

    Returns ``(pixel, T_final)``; with a background the pixel is ``C + T_final * bg``.
    Accumulation happens in float64.
    """
    as_numpy = not torch.is_tensor(alpha)
    a = torch.as_tensor(np.asarray(alpha) if as_numpy else alpha).double()
    c = torch.as_tensor(np.asarray(color) if as_numpy else color).double()
    ones = torch.ones(a.shape[:-1] + (1,), dtype=a.dtype)
    T = torch.cumprod(torch.cat([ones, 1.0 - a], dim=-1), dim=-1)
    weights = T[..., :-1] * a
    C = (weights[..., None] * c).sum(dim=-2)
    T_final = T[..., -1]
    if background is not None:
        C = C + T_final[..., None] * torch.as_tensor(background, dtype=C.dtype)
    if as_numpy:
        return C.numpy(), T_final.numpy()
    return C, T_final


def render_camera(scene: Scene, codes: LatentCodes, camera: Camera, posed: PosedScene,
                  config: RenderConfig = None) -> dict:
    """Differentiable render of one camera; returns torch tensors.

    Keys: ``color`` (H, W, 3) with background, ``transmittance`` (H, W),
    ``weight_sum`` (H, W) the per-pixel sum of ``T * alpha``, ``n_hits``.
    """
    config = config or RenderConfig()
    rays = generate_rays(camera, config.jitter, config.jitter_seed)
    H, W, D = rays.shape
    vol = assemble_volume(rays, posed.guide, posed.transforms, scene.blend_mode)
    dtype = scene.dtype
    T = tensor_to_volume(process_tensor(scene.pose_net, volume_to_tensor(vol.values, dtype)))
    x_p = apply_volume(T, torch.as_tensor(vol.positions, dtype=dtype)).reshape(-1, 3)
    x_c = scene.exp_net(x_p, scene.exp_net.codes(codes.z_id, codes.z_exp)).reshape(H * W, D, 3)
    s = scene.field(x_c)
    hits = intersect_batch(s, x_c, scene.levels.to(s.dtype))
    ray, slot = hits["ray"], hits["slot"]
    pts = hits["points"]
    seg = hits["segment"]
    dirs = F.normalize(x_c[ray, seg + 1] - x_c[ray, seg], dim=-1)
    if config.mode == DIRECT:
        c, a = scene.radiance_net(pts, scene.radiance_net.codes(codes.z_id, codes.eps), dirs)
    else:
        rmap = scene.radiance_maps(codes, config.map_resolution, config.map_upsample)
        c, a = sample_radiance_map(rmap, pts, hits["level"])
    M = hits["max_count"]
    R = H * W
    A = torch.zeros(R, M, dtype=torch.float64).index_put((ray, slot), a.double())
    Cs = torch.zeros(R, M, 3, dtype=torch.float64).index_put((ray, slot), c.double())
    color, T_final = composite(A, Cs, scene.background)
    weight_sum = 1.0 - T_final if M == 0 else _weight_sum(A)
    return dict(color=color.reshape(H, W, 3), transmittance=T_final.reshape(H, W),
                weight_sum=weight_sum.reshape(H, W), n_hits=int(len(ray)))


def _weight_sum(A):
    ones = torch.ones(A.shape[0], 1, dtype=A.dtype)
    T = torch.cumprod(torch.cat([ones, 1.0 - A[:, :-1]], dim=1), dim=1)
    return (T * A).sum(dim=1)


def _to_image(out: dict) -> RenderedImage:
    return RenderedImage(out["color"].detach().numpy().clip(0.0, 1.0),
                         out["transmittance"].detach().numpy())


def main_camera(codes: LatentCodes, config: RenderConfig = None) -> Camera:
    config = config or RenderConfig()
    return portrait_camera(codes.camera_pose, config.resolution, config.n_samples,
                           config.focal_scale, config.depth_range)


def render_portrait(scene: Scene, codes: LatentCodes, camera: Camera = None,
                    config: RenderConfig = None, root_transform=None) -> RenderedImage:
    config = config or RenderConfig()
    camera = camera or main_camera(codes, config)
    posed = pose_scene(scene, codes, root_transform)
    with torch.no_grad():
        return _to_image(render_camera(scene, codes, camera, posed, config))


def face_camera(posed: PosedScene, config: RenderConfig = None) -> Camera:
    config = config or RenderConfig()
    return face_camera_from_head(posed.transforms, config.face)


def render_dual(scene: Scene, codes: LatentCodes, camera: Camera = None,
                config: RenderConfig = None, root_transform=None):
    """Portrait and face images of one posed scene; only the camera differs."""
    config = config or RenderConfig()
    camera = camera or main_camera(codes, config)
    posed = pose_scene(scene, codes, root_transform)
    with torch.no_grad():
        portrait = _to_image(render_camera(scene, codes, camera, posed, config))
        face = _to_image(render_camera(scene, codes, face_camera(posed, config), posed, config))
    return portrait, face


def torso_crop(image):
    """Bottom quarter of the rows, full width; works on arrays, tensors or ``RenderedImage``."""
    if isinstance(image, RenderedImage):
        h = image.color.shape[0]
        if h % 4:
            raise ValueError(f"image height {h} is not divisible by 4")
        return RenderedImage(image.color[h - h // 4:], image.transmittance[h - h // 4:])
    h = image.shape[0]
    if h % 4:
        raise ValueError(f"image height {h} is not divisible by 4")
    return image[h - h // 4:]
