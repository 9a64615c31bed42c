"""Training objectives for the deformation fields and the adversarial toy loop."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .assets import BlendshapeFaceModel
from .deformation import ExpressionDeformNet, PoseDeformNet, process_tensor
from .skinning import SpatialHashGrid, mean_edge_length


@dataclass
class LossWeights:
    whole: float = 0.1
    face: float = 1.0
    torso: float = 0.5
    lm: float = 1.0
    imitation: float = 10.0
    pose_smooth: float = 1.0
    exp_smooth: float = 1.0
    exp_minimal: float = 0.1

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"loss weight {k} must be nonnegative")

    def adversarial(self):
        return {"whole": self.whole, "face": self.face, "torso": self.torso}


def _t(x, dtype):
    return x.to(dtype) if torch.is_tensor(x) else torch.as_tensor(np.asarray(x), dtype=dtype)


# ---------------------------------------------------------------------------
# landmarks

def canonical_landmarks(face: BlendshapeFaceModel, z_id_face) -> np.ndarray:
    """Landmarks of the neutral face; this is where the canonical space keeps them."""
    return face.landmarks(z_id_face, np.zeros(face.d_exp))


def surrogate_landmarks(exp_net: ExpressionDeformNet, face: BlendshapeFaceModel, z_id, z_exp,
                        iterations: int = 10, tol: float = 1e-5, canonical=None) -> torch.Tensor:
    """Pose-aligned landmarks implied by the expression field.

    Solves ``x + dx(x) = lm_canonical`` by the fixed-point iteration
    ``x <- lm_canonical - dx(x)`` starting at ``lm_canonical``.  Stops after
    ``iterations`` updates or once an update moves no point more than ``tol``.
    Differentiable through the unrolled iterations.  ``canonical`` overrides the
    starting landmarks, e.g. to solve for several code sets stacked row-wise
    with per-row codes.
    """
    dtype = exp_net.head.weight.dtype
    if canonical is None:
        canonical = canonical_landmarks(face, np.asarray(z_id)[:face.d_id])
    lm_c = _t(canonical, dtype)
    z = exp_net.codes(_t(z_id, dtype), _t(z_exp, dtype))
    x = lm_c
    for _ in range(iterations):
        x_new = lm_c - exp_net.offset(x, z)
        step = (x_new - x).detach().abs().max()
        x = x_new
        if step <= tol:
            break
    return x


def landmark_loss(face: BlendshapeFaceModel, z_id_face, z_exp, generated) -> torch.Tensor:
    """Mean over landmarks of the squared distance to the expressive 3DMM landmarks."""
    return landmark_loss_to(generated, face.landmarks(np.asarray(z_id_face)[:face.d_id], z_exp))


def landmark_loss_to(generated, target) -> torch.Tensor:
    gen = generated if torch.is_tensor(generated) else torch.as_tensor(np.asarray(generated, dtype=np.float64))
    target = np.asarray(target)
    if tuple(gen.shape) != target.shape:
        raise ValueError(f"expected {target.shape[0]} landmarks, got {tuple(gen.shape)}")
    diff = gen - torch.as_tensor(target, dtype=gen.dtype)
    return (diff ** 2).sum(dim=-1).mean()


def landmark_error(face, z_id, z_exp, generated) -> float:
    """Mean Euclidean landmark distance (a report metric, not a loss)."""
    target = face.landmarks(np.asarray(z_id)[:face.d_id], z_exp)
    gen = generated.detach().double().numpy() if torch.is_tensor(generated) else np.asarray(generated)
    return float(np.linalg.norm(gen - target, axis=1).mean())


# ---------------------------------------------------------------------------
# expression field

def face_grid(face: BlendshapeFaceModel, z_id_face, z_exp) -> tuple:
    """Expressive face vertices, a grid over them, and their reference offsets."""
    verts = face.shape(z_id_face, z_exp)
    grid = SpatialHashGrid(verts, 2.0 * mean_edge_length(verts, face.triangles))
    return verts, grid, -face.expression_offsets(z_exp)


def imitation_targets(face: BlendshapeFaceModel, x_p, z_id, z_exp) -> np.ndarray:
    """``-B_exp z_exp`` at the vertex of ``S(z_id, z_exp)`` closest to each point."""
    _, grid, ref = face_grid(face, np.asarray(z_id)[:face.d_id], z_exp)
    pts = x_p.detach().double().numpy() if torch.is_tensor(x_p) else np.asarray(x_p, dtype=np.float64)
    idx, _ = grid.nearest(pts)
    return ref[idx]


def imitation_loss(exp_net: ExpressionDeformNet, face: BlendshapeFaceModel, x_p, z_id, z_exp,
                   targets=None) -> torch.Tensor:
    """Mean of ``||dx(x_p) - dx_ref||^2``; ``targets`` may be precomputed."""
    dtype = exp_net.head.weight.dtype
    x = _t(x_p, dtype)
    ref = imitation_targets(face, x, z_id, z_exp) if targets is None else targets
    dx = exp_net.offset(x, exp_net.codes(_t(z_id, dtype), _t(z_exp, dtype)))
    return ((dx - _t(ref, dtype)) ** 2).sum(dim=-1).mean()


def uniform_perturbation(shape, delta: float, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-delta, delta, size=shape)


def exp_smooth_loss(exp_net: ExpressionDeformNet, x_p, z_id, z_exp, delta: float = 1e-2,
                    seed: int = 0) -> torch.Tensor:
    """Mean of ``||D(x) - D(x + u)||^2`` with ``u ~ U[-delta, delta]^3`` drawn from ``seed``."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    dtype = exp_net.head.weight.dtype
    x = _t(x_p, dtype)
    z = exp_net.codes(_t(z_id, dtype), _t(z_exp, dtype))
    u = torch.as_tensor(uniform_perturbation(tuple(x.shape), delta, seed), dtype=dtype)
    return ((exp_net(x, z) - exp_net(x + u, z)) ** 2).sum(dim=-1).mean()


def exp_minimal_loss(exp_net: ExpressionDeformNet, x_p, z_id, z_exp) -> torch.Tensor:
    dtype = exp_net.head.weight.dtype
    x = _t(x_p, dtype)
    dx = exp_net.offset(x, exp_net.codes(_t(z_id, dtype), _t(z_exp, dtype)))
    return (dx ** 2).sum(dim=-1).mean()


# ---------------------------------------------------------------------------
# pose volume

def avg_pool_volume(vol: torch.Tensor, kernel: int = 3) -> torch.Tensor:
    """Stride-1 box filter over ``(B, C, H, W, D)`` with replicate padding."""
    p = kernel // 2
    return F.avg_pool3d(F.pad(vol, (p,) * 6, mode="replicate"), kernel, stride=1)


def sample_cells(shape, fraction: float, seed: int):
    """Boolean mask over ``(H, W, D)`` selecting ``fraction`` of the cells."""
    if not 0 < fraction <= 1:
        raise ValueError("sampling fraction must be in (0, 1]")
    n = int(np.prod(shape))
    if fraction == 1:
        return None
    keep = np.random.default_rng(seed).permutation(n)[:max(1, int(round(fraction * n)))]
    mask = np.zeros(n, dtype=bool)
    mask[keep] = True
    return torch.as_tensor(mask.reshape(shape))


def pose_smooth_loss(pose_net: PoseDeformNet, volume: torch.Tensor, fraction: float = 1.0,
                     seed: int = 0) -> torch.Tensor:
    """Mean squared difference between ``D^p(T)`` and the 3x3x3 box-filtered input.

    The mean runs over all 16 channels of every (sampled) cell.
    """
    vol = volume.to(next(pose_net.parameters()).dtype)
    diff = process_tensor(pose_net, vol) - avg_pool_volume(vol)
    mask = sample_cells(vol.shape[2:], fraction, seed)
    if mask is None:
        return (diff ** 2).mean()
    return (diff.permute(0, 2, 3, 4, 1)[:, mask] ** 2).mean()


def pose_data_loss(pose_net: PoseDeformNet, volume: torch.Tensor, mask) -> torch.Tensor:
    """Mean squared change ``D^p(T) - T`` over the masked (body-interior) cells."""
    vol = volume.to(next(pose_net.parameters()).dtype)
    diff = (process_tensor(pose_net, vol) - vol).permute(0, 2, 3, 4, 1)
    m = torch.as_tensor(mask, dtype=torch.bool)
    if m.dim() == 3:
        m = m.expand(vol.shape[0], *m.shape)
    if not bool(m.any()):
        return diff.sum() * 0.0
    return (diff[m] ** 2).mean()


# ---------------------------------------------------------------------------
# adversarial

def gan_losses(real_logits, fake_logits):
    """Non-saturating losses ``(g, d)``."""
    g = F.softplus(-fake_logits).mean()
    d = F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()
    return g, d


def r1_penalty(input_grad: torch.Tensor) -> torch.Tensor:
    """Half the mean over samples of the squared input-gradient norm."""
    g = input_grad.reshape(input_grad.shape[0], -1)
    return 0.5 * (g ** 2).sum(dim=1).mean()


LOSS_NAMES = ("landmark_loss", "imitation_loss", "pose_smooth_loss", "exp_smooth_loss",
              "exp_minimal_loss", "gan_losses", "r1_penalty")
