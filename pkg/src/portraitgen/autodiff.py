"""Reverse-mode gradients over a closed primitive set, plus a finite-difference checker.

Gradients come from torch's tape; ``backward`` walks the recorded graph first
and refuses anything outside the primitive families below.  The checker is
independent of the tape: plain central differences on perturbed parameters.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping

import numpy as np
import torch
from torch import nn

PRIMITIVES = {
    "affine": {"Addmm", "Mm", "Bmm", "Mv", "Dot", "T", "Convolution", "Linear"},
    "elementwise": {"Add", "Sub", "Rsub", "Mul", "Div", "Neg", "Pow", "Sin", "Cos", "Exp", "Log",
                    "Sqrt", "Rsqrt", "Abs", "Clamp", "ClampMin", "ClampMax", "Maximum", "Minimum",
                    "Where", "LinalgVectorNorm", "Norm", "Reciprocal"},
    "squashing": {"Sigmoid", "Tanh", "Softplus", "LeakyRelu", "Relu"},
    "reduction": {"Sum", "Mean", "Cumprod", "Prod", "AvgPool3D", "AvgPool2D"},
    "sampling": {"Index", "IndexPut", "Gather", "Select", "Slice", "ReplicationPad3D",
                 "ReplicationPad2D", "GridSampler2D"},
    "layout": {"View", "ReshapeAlias", "UnsafeView", "Permute", "Expand", "Cat", "Stack", "Squeeze",
               "Unsqueeze", "Unbind", "Clone", "ToCopy", "Copy", "CopySlices", "Split",
               "SplitWithSizes", "Transpose", "AccumulateGrad"},
}
_SUPPORTED = set().union(*PRIMITIVES.values())
_SUFFIX = re.compile(r"Backward\d*$")


class UnsupportedPrimitiveError(RuntimeError):
    pass


@dataclass
class ParamSet:
    """Named parameter blocks; shapes are fixed once registered."""

    tensors: Dict[str, torch.Tensor] = field(default_factory=dict)

    def register(self, name: str, tensor: torch.Tensor) -> None:
        if name in self.tensors:
            raise ValueError(f"parameter {name!r} already registered")
        self.tensors[name] = tensor

    @classmethod
    def from_modules(cls, modules: Mapping[str, nn.Module] | nn.Module) -> "ParamSet":
        if isinstance(modules, nn.Module):
            modules = {"": modules}
        ps = cls()
        for prefix, mod in modules.items():
            for n, p in mod.named_parameters():
                if p.requires_grad:
                    ps.register(f"{prefix}.{n}" if prefix else n, p)
        return ps

    @property
    def names(self):
        return list(self.tensors)

    @property
    def shapes(self):
        return {k: tuple(v.shape) for k, v in self.tensors.items()}

    def flat(self, name: str) -> np.ndarray:
        return self.tensors[name].detach().double().numpy().ravel().copy()

    def __len__(self):
        return len(self.tensors)

    def __iter__(self):
        return iter(self.tensors.items())


def primitive_names(output: torch.Tensor) -> set:
    names, seen, stack = set(), set(), [output.grad_fn]
    while stack:
        fn = stack.pop()
        if fn is None or fn in seen:
            continue
        seen.add(fn)
        names.add(_SUFFIX.sub("", type(fn).__name__))
        stack.extend(nxt for nxt, _ in fn.next_functions)
    return names


def check_primitives(output: torch.Tensor) -> None:
    bad = primitive_names(output) - _SUPPORTED
    if bad:
        raise UnsupportedPrimitiveError("unsupported primitive(s): " + ", ".join(sorted(bad)))


def backward(loss_fn: Callable[[], torch.Tensor], params: ParamSet) -> Dict[str, np.ndarray]:
    """Gradients of the scalar ``loss_fn()`` for every block, as float64 arrays.

    Blocks the loss does not reach get zeros.
    """
    loss = loss_fn()
    if loss.dim() != 0:
        raise ValueError("loss must be a scalar")
    check_primitives(loss)
    names = params.names
    tensors = [params.tensors[n] for n in names]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return {n: (np.zeros(t.shape) if g is None else g.detach().double().numpy())
            for n, t, g in zip(names, tensors, grads)}


@dataclass
class GradReport:
    max_rel_error: Dict[str, float]
    n_coords: Dict[str, int]
    n_evals: int
    worst: Dict[str, tuple] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_error < tol

    def rows(self):
        for name, err in self.max_rel_error.items():
            a, b = self.worst.get(name, (0.0, 0.0))
            yield name, self.n_coords[name], err, a, b

    def table(self) -> str:
        lines = [f"{'parameter':40s} {'coords':>6s} {'max_rel_err':>12s}"]
        lines += [f"{n:40s} {k:6d} {e:12.3e}" for n, k, e, _, _ in self.rows()]
        return "\n".join(lines)

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["parameter", "coords", "max_rel_error", "analytic", "numeric"])
            for row in self.rows():
                w.writerow([row[0], row[1], repr(row[2]), repr(row[3]), repr(row[4])])


def relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(loss_fn: Callable[[], torch.Tensor], params: ParamSet, step: float = 1e-4,
               n_coords: int = 64, seed: int = 0, grads: Dict[str, np.ndarray] = None,
               names: Iterable[str] = None) -> GradReport:
    """Compare analytic gradients to central differences on sampled coordinates.

    Samples ``n_coords`` coordinates per block (all of them for small blocks).
    ``grads`` overrides the analytic side, e.g. to feed a corrupted gradient.
    """
    if grads is None:
        grads = backward(loss_fn, params)
    rng = np.random.default_rng(seed)
    errors, counts, worst, evals = {}, {}, {}, 0
    for name in (names or params.names):
        t = params.tensors[name]
        flat = t.data.view(-1)
        size = flat.numel()
        coords = np.arange(size) if size <= n_coords else rng.choice(size, n_coords, replace=False)
        g = np.asarray(grads[name], dtype=np.float64).ravel()
        numeric = np.empty(len(coords))
        with torch.no_grad():
            for k, c in enumerate(coords):
                orig = flat[c].item()
                flat[c] = orig + step
                hi = float(loss_fn())
                flat[c] = orig - step
                lo = float(loss_fn())
                flat[c] = orig
                numeric[k] = (hi - lo) / (2.0 * step)
                evals += 2
        err = relative_error(g[coords], numeric)
        i = int(np.argmax(err))
        errors[name] = float(err[i])
        counts[name] = len(coords)
        worst[name] = (float(g[coords][i]), float(numeric[i]))
    return GradReport(errors, counts, evals, worst)


def _randomize(module: nn.Module, scale: float, generator: torch.Generator):
    """Overwrite zero-initialised layers so every block carries signal."""
    with torch.no_grad():
        for p in module.parameters():
            if not bool(p.abs().max() > 0):
                p.copy_(scale * torch.randn(p.shape, generator=generator, dtype=p.dtype))


def loss_problems(seed: int = 0) -> Dict[str, tuple]:
    """Small random networks and data for every training loss.

    Returns ``name -> (loss_fn, ParamSet)``; all tensors are float64.
    """
    from .assets import generate_toy_models
    from .deformation import ExpressionDeformNet, PoseDeformNet
    from .losses import (canonical_landmarks, exp_minimal_loss, exp_smooth_loss, gan_losses,
                         imitation_loss, imitation_targets, landmark_loss_to, pose_smooth_loss,
                         r1_penalty, surrogate_landmarks)

    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    face, _ = generate_toy_models(seed)
    d_id, d_exp = face.d_id + 4, face.d_exp
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        exp_net = ExpressionDeformNet(d_id, d_exp, hidden=8, map_hidden=8).double()
        pose_net = PoseDeformNet(hidden=4, kernel=(3, 3, 3)).double()
        disc = nn.Sequential(nn.Linear(12, 8), nn.LeakyReLU(0.2), nn.Linear(8, 1)).double()
    _randomize(exp_net, 0.05, gen)
    _randomize(pose_net, 0.05, gen)

    z_id = 0.5 * rng.standard_normal(d_id)
    z_exp = 0.5 * rng.standard_normal(d_exp)
    verts = face.shape(z_id[:face.d_id], z_exp)
    x_p = verts[rng.integers(len(verts), size=32)] + rng.normal(0, 0.003, (32, 3))
    targets = imitation_targets(face, x_p, z_id, z_exp)
    lm_c = canonical_landmarks(face, z_id[:face.d_id])
    lm_target = face.landmarks(z_id[:face.d_id], z_exp)
    vol = torch.as_tensor(np.eye(4).reshape(1, 16, 1, 1, 1) + 0.1 * rng.standard_normal((1, 16, 6, 6, 4)))
    real = torch.randn(4, 12, generator=gen, dtype=torch.float64)
    fake = torch.randn(4, 12, generator=gen, dtype=torch.float64, requires_grad=True)
    input_grad = torch.randn(4, 12, generator=gen, dtype=torch.float64, requires_grad=True)
    noise = torch.randn(4, 12, generator=gen, dtype=torch.float64)

    exp_params = ParamSet.from_modules({"exp_net": exp_net})
    d_params = ParamSet.from_modules({"D": disc})

    def d_out(x):
        return disc(x).squeeze(-1)

    g_params = ParamSet.from_modules({"D": disc})
    g_params.register("fake", fake)
    r1_params = ParamSet.from_modules({"D": disc})
    r1_params.register("input_grad", input_grad)
    sigma = 1e-2

    return {
        "landmark_surrogate": (lambda: landmark_loss_to(
            surrogate_landmarks(exp_net, face, z_id, z_exp, tol=0.0, canonical=lm_c), lm_target),
            exp_params),
        "imitation": (lambda: imitation_loss(exp_net, face, x_p, z_id, z_exp, targets), exp_params),
        "pose_smooth": (lambda: pose_smooth_loss(pose_net, vol), ParamSet.from_modules({"pose_net": pose_net})),
        "exp_smooth": (lambda: exp_smooth_loss(exp_net, x_p, z_id, z_exp, seed=seed), exp_params),
        "exp_minimal": (lambda: exp_minimal_loss(exp_net, x_p, z_id, z_exp), exp_params),
        "gan_generator": (lambda: gan_losses(d_out(real), d_out(fake))[0], g_params),
        "gan_discriminator": (lambda: gan_losses(d_out(real), d_out(fake))[1], d_params),
        "r1": (lambda: r1_penalty(input_grad)
               + 0.5 * ((d_out(real + sigma * noise) - d_out(real)) ** 2).mean() / sigma ** 2,
               r1_params),
    }


def run_gradient_suite(seed: int = 0, n_coords: int = 64, step: float = 1e-4) -> Dict[str, GradReport]:
    """``grad_check`` on every entry of ``loss_problems``."""
    return {name: grad_check(fn, ps, step=step, n_coords=n_coords, seed=seed)
            for name, (fn, ps) in loss_problems(seed).items()}
