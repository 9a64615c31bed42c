"""Two-stage deformation from target space to canonical space.

Stage one gathers per-sample inverse-skinning matrices into an ``(H, W, D, 16)``
volume and refines it with a residual 3D CNN.  Stage two offsets the
pose-aligned points with a code-conditioned FiLM SIREN field.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .camera import Rays
from .skinning import (BLEND_INVERSE, JointTransformSet, PosedGuideMesh,
                       blend_inverse_transforms, nearest_vertex_weights_batch)

IDENTITY_16 = np.eye(4).reshape(16)


@dataclass
class DeformationVolume:
    values: np.ndarray      # (H, W, D, 16), flattened row-major 4x4 per sample
    positions: np.ndarray   # (H, W, D, 3) target-space sample positions

    def __post_init__(self):
        if self.values.shape[-1] != 16 or self.values.shape[:-1] != self.positions.shape[:-1]:
            raise ValueError("values must be (H, W, D, 16) matching positions (H, W, D, 3)")

    @property
    def shape(self):
        return self.values.shape[:3]

    def matrices(self) -> np.ndarray:
        return self.values.reshape(self.values.shape[:3] + (4, 4))


def assemble_volume(rays: Rays, guide_mesh: PosedGuideMesh, transforms: JointTransformSet,
                    mode: str = BLEND_INVERSE) -> DeformationVolume:
    """Blend the inverse joint transforms with nearest-vertex weights at every sample."""
    pts = rays.points
    flat = pts.reshape(-1, 3)
    weights, _ = nearest_vertex_weights_batch(guide_mesh, flat)
    T = blend_inverse_transforms(weights, transforms, mode)
    return DeformationVolume(T.reshape(pts.shape[:3] + (16,)), pts)


class PoseDeformNet(nn.Module):
    """Residual pair of 3D convolutions over the transformation volume.

    The second convolution starts at zero, so a fresh network is the identity.
    The first convolution sees the deviation from the identity transform; under
    replicate padding that only shifts its bias, but it keeps the hidden
    activations small where the volume is rigid, which lets Adam take larger steps.
    """

    def __init__(self, channels: int = 16, hidden: int = 16, kernel=(9, 9, 5),
                 negative_slope: float = 0.2):
        super().__init__()
        self.channels = channels
        self.kernel = tuple(kernel)
        self.conv1 = nn.Conv3d(channels, hidden, self.kernel)
        self.conv2 = nn.Conv3d(hidden, channels, self.kernel)
        self.negative_slope = negative_slope
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        ident = torch.as_tensor(IDENTITY_16 if channels == 16 else np.zeros(channels), dtype=torch.float32)
        self.register_buffer("identity", ident.view(1, channels, 1, 1, 1))

    def _pad(self, x):
        kh, kw, kd = self.kernel
        # F.pad takes the last dimension first
        return F.pad(x, (kd // 2, kd // 2, kw // 2, kw // 2, kh // 2, kh // 2), mode="replicate")

    def forward(self, x):
        """``x`` is ``(B, 16, H, W, D)``."""
        h = F.leaky_relu(self.conv1(self._pad(x - self.identity.to(x.dtype))), self.negative_slope)
        return x + self.conv2(self._pad(h))


def volume_to_tensor(values, dtype=torch.float32) -> torch.Tensor:
    v = torch.as_tensor(np.ascontiguousarray(values), dtype=dtype)
    return v.permute(3, 0, 1, 2).unsqueeze(0)


def tensor_to_volume(t: torch.Tensor) -> torch.Tensor:
    return t.squeeze(0).permute(1, 2, 3, 0)


def process_tensor(net: PoseDeformNet, vol: torch.Tensor) -> torch.Tensor:
    """Differentiable ``(B, 16, H, W, D)`` processing with the affine row restored."""
    if vol.dim() != 5 or vol.shape[1] != net.channels:
        raise ValueError(f"expected (B, {net.channels}, H, W, D), got {tuple(vol.shape)}")
    out = net(vol)
    last = torch.tensor([0.0, 0.0, 0.0, 1.0], dtype=out.dtype).view(1, 4, 1, 1, 1)
    return torch.cat([out[:, :12], last.expand(out.shape[0], 4, *out.shape[2:])], dim=1)


def process_volume(net: PoseDeformNet, vol: DeformationVolume) -> DeformationVolume:
    if vol.values.shape[-1] != net.channels:
        raise ValueError("volume channel count does not match the network")
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        out = process_tensor(net, volume_to_tensor(vol.values, dtype))
    values = tensor_to_volume(out).double().numpy()
    return DeformationVolume(values, vol.positions)


def apply_volume(values, positions):
    """``x_p = M x_t`` per cell, for numpy arrays or torch tensors of ``(..., 16)``/``(..., 3)``."""
    if torch.is_tensor(values):
        M = values.reshape(values.shape[:-1] + (4, 4))
        return torch.einsum("...ab,...b->...a", M[..., :3, :3], positions) + M[..., :3, 3]
    M = np.asarray(values).reshape(np.shape(values)[:-1] + (4, 4))
    return np.einsum("...ab,...b->...a", M[..., :3, :3], positions) + M[..., :3, 3]


class FiLMSineLayer(nn.Module):
    def __init__(self, in_features, out_features, omega: float, first: bool = False):
        super().__init__()
        self.omega = omega
        self.linear = nn.Linear(in_features, out_features)
        bound = 1.0 / in_features if first else np.sqrt(6.0 / in_features) / omega
        with torch.no_grad():
            self.linear.weight.uniform_(-bound, bound)
            self.linear.bias.uniform_(-bound, bound)

    def forward(self, x, gamma, beta):
        return torch.sin(self.omega * (1.0 + gamma) * self.linear(x) + beta)


class ExpressionDeformNet(nn.Module):
    """Offset field ``dx(x, z_id, z_exp)``; canonical point is ``x + dx``.

    A two-layer mapping network turns the codes into per-layer frequency and
    phase modulations for three FiLM SIREN layers.  The output head is zero at
    construction.  Points outside ``box`` get no offset.
    """

    def __init__(self, d_id: int, d_exp: int, hidden: int = 64, map_hidden: int = 128,
                 n_layers: int = 3, first_omega: float = 10.0,
                 box=((-0.15, 0.0, -0.15), (0.15, 0.3, 0.2))):
        super().__init__()
        self.d_id, self.d_exp, self.hidden, self.n_layers = d_id, d_exp, hidden, n_layers
        self.mapping = nn.Sequential(
            nn.Linear(d_id + d_exp, map_hidden), nn.LeakyReLU(0.2),
            nn.Linear(map_hidden, 2 * n_layers * hidden))
        with torch.no_grad():
            self.mapping[2].weight.mul_(0.25)
            self.mapping[2].bias.zero_()
        layers = [FiLMSineLayer(3, hidden, first_omega, first=True)]
        layers += [FiLMSineLayer(hidden, hidden, 1.0) for _ in range(n_layers - 1)]
        self.layers = nn.ModuleList(layers)
        self.head = nn.Linear(hidden, 3)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.register_buffer("box_lo", torch.tensor(box[0], dtype=torch.float32))
        self.register_buffer("box_hi", torch.tensor(box[1], dtype=torch.float32))

    def codes(self, z_id, z_exp):
        z = torch.cat([torch.as_tensor(z_id), torch.as_tensor(z_exp)], dim=-1)
        return z.to(self.head.weight.dtype)

    def offset(self, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """``x`` is ``(N, 3)``; ``z`` is ``(d_id + d_exp,)`` or ``(N, d_id + d_exp)``."""
        inside = ((x >= self.box_lo) & (x <= self.box_hi)).all(dim=-1)
        idx = torch.nonzero(inside, as_tuple=True)[0]
        if z.dim() > 1:
            z = z[idx]
        mod = self.mapping(z)
        mod = mod.reshape(mod.shape[:-1] + (self.n_layers, 2, self.hidden))
        # SIREN frequencies assume inputs in [-1, 1]; rescale the box to that cube
        h = (x[idx] - 0.5 * (self.box_lo + self.box_hi)) * (2.0 / (self.box_hi - self.box_lo))
        for i, layer in enumerate(self.layers):
            h = layer(h, mod[..., i, 0, :], mod[..., i, 1, :])
        # only in-box points are evaluated; the rest keep a zero offset
        return x.new_zeros(x.shape).index_put((idx,), self.head(h))

    def forward(self, x, z):
        return x + self.offset(x, z)


def expression_deform(net: ExpressionDeformNet, x_p, z_id, z_exp):
    """Canonical points ``x_p + dx``; numpy in gives numpy out (no gradient)."""
    if torch.is_tensor(x_p):
        return net(x_p, net.codes(z_id, z_exp))
    dtype = net.head.weight.dtype
    x_p = np.asarray(x_p, dtype=np.float64)
    x = torch.as_tensor(x_p.reshape(-1, 3), dtype=dtype)
    with torch.no_grad():
        z = torch.as_tensor(np.concatenate([np.ravel(z_id), np.ravel(z_exp)]), dtype=dtype)
        dx = net.offset(x, z)
    return x_p + dx.double().numpy().reshape(x_p.shape)
