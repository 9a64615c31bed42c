"""Desk-scale optimization of the deformation fields and a toy adversarial loop."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted
from torch import nn

from .assets import BlendshapeFaceModel
from .checkpoint import load_module, save_module
from .deformation import ExpressionDeformNet, PoseDeformNet, process_tensor, volume_to_tensor
from .latents import CodeDistribution, sample_codes
from .losses import (LossWeights, avg_pool_volume, canonical_landmarks, exp_minimal_loss,
                     exp_smooth_loss, gan_losses, imitation_loss, imitation_targets, landmark_loss_to,
                     pose_data_loss, pose_smooth_loss, r1_penalty, surrogate_landmarks)


class DivergenceError(RuntimeError):
    pass


class NonFiniteGradientError(RuntimeError):
    def __init__(self, subnetwork: str, step: int):
        super().__init__(f"non-finite gradient in {subnetwork} at step {step}")
        self.subnetwork = subnetwork
        self.step = step


@dataclass
class FitConfig:
    lr: float = 2e-4
    betas: tuple = (0.0, 0.9)
    batch_size: int = 128
    codes_per_step: int = 16
    steps: int = 2000
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    delta: float = 1e-2
    point_noise: float = 0.005
    use_landmarks: bool = True
    smooth_fraction: float = 1.0
    data_weight: float = 1.0
    eval_every: int = 100
    divergence_factor: float = 1e3
    lr_schedule: str = "cosine"
    lr_final: float = 0.0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.betas = tuple(self.betas)
        if not self.lr > 0 or self.batch_size < 1 or self.steps < 1 or self.codes_per_step < 1:
            raise ValueError("lr, batch_size, codes_per_step and steps must be positive")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError("lr_schedule must be 'cosine' or 'constant'")

    def optimizer(self, params):
        return torch.optim.Adam(params, lr=self.lr, betas=self.betas)

    def lr_at(self, step: int) -> float:
        """Learning rate for ``step``; cosine decays from ``lr`` to ``lr * lr_final``."""
        if self.lr_schedule == "constant":
            return self.lr
        frac = min(max(step / self.steps, 0.0), 1.0)
        return self.lr * (self.lr_final + (1.0 - self.lr_final) * 0.5 * (1.0 + np.cos(np.pi * frac)))

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# the pose processor is fit to a handful of fixed volumes, so it wants momentum
POSE_FIT_DEFAULTS = {"lr": 3e-4, "betas": (0.9, 0.999), "steps": 2000}


def pose_fit_config(**kwargs) -> FitConfig:
    """``FitConfig`` with the pose-processor defaults; ``kwargs`` override them."""
    return FitConfig(**{**POSE_FIT_DEFAULTS, **kwargs})


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def write_history(path, history: List[dict]) -> None:
    if not history:
        return
    keys = list(dict.fromkeys(k for row in history for k in row))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, restval="")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _check_finite(module: nn.Module, name: str, step: int):
    for p in module.parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteGradientError(name, step)


# ---------------------------------------------------------------------------
# expression field

@dataclass
class ExpressionBatch:
    """Points with per-point codes; rows of one code set are contiguous."""

    z_id: np.ndarray       # (C, d_id)
    z_exp: np.ndarray      # (C, d_exp)
    points: np.ndarray     # (C * n, 3)
    targets: np.ndarray    # (C * n, 3)

    @property
    def n_codes(self) -> int:
        return len(self.z_id)

    def point_codes(self):
        n = len(self.points) // self.n_codes
        return np.repeat(self.z_id, n, axis=0), np.repeat(self.z_exp, n, axis=0)


class CodePool:
    """Draws ``(z_id, z_exp)`` rows uniformly from a fixed array instead of a distribution."""

    def __init__(self, z_id, z_exp):
        self.z_id = np.atleast_2d(np.asarray(z_id, dtype=np.float64))
        self.z_exp = np.atleast_2d(np.asarray(z_exp, dtype=np.float64))

    def draw(self, rng):
        k = int(rng.integers(len(self.z_id)))
        return self.z_id[k], self.z_exp[k]


def _draw_codes(source, rng):
    if isinstance(source, CodePool):
        return source.draw(rng)
    codes = sample_codes(int(rng.integers(2 ** 63)), source)
    return codes.z_id, codes.z_exp


def expression_batch(face: BlendshapeFaceModel, rng, dist, n_points: int, noise: float,
                     n_codes: int = 1) -> ExpressionBatch:
    """Codes from ``dist`` (a distribution or a ``CodePool``) and points around each face."""
    z_id, z_exp, pts, tgt = [], [], [], []
    for _ in range(n_codes):
        zi, ze = _draw_codes(dist, rng)
        verts = face.shape(zi[:face.d_id], ze)
        p = verts[rng.integers(len(verts), size=n_points)] + rng.normal(0.0, noise, (n_points, 3))
        z_id.append(zi)
        z_exp.append(ze)
        pts.append(p)
        tgt.append(imitation_targets(face, p, zi, ze))
    return ExpressionBatch(np.stack(z_id), np.stack(z_exp), np.concatenate(pts), np.concatenate(tgt))


def batched_surrogate_landmarks(net, face, batch: ExpressionBatch):
    """Surrogate landmarks of every code set at once, ``(C * K, 3)``."""
    lm_c = np.concatenate([canonical_landmarks(face, z[:face.d_id]) for z in batch.z_id])
    k = len(face.landmark_indices)
    z_id, z_exp = np.repeat(batch.z_id, k, axis=0), np.repeat(batch.z_exp, k, axis=0)
    return surrogate_landmarks(net, face, z_id, z_exp, canonical=lm_c)


def _landmark_targets(face, batch: ExpressionBatch):
    return np.concatenate([face.landmarks(zi[:face.d_id], ze)
                           for zi, ze in zip(batch.z_id, batch.z_exp)])


def _face_distribution(face, dist):
    if dist is None:
        return CodeDistribution(d_id_face=face.d_id, d_id_body=4, d_exp=face.d_exp)
    return dist


def expression_objective(net, face, batch: ExpressionBatch, config: FitConfig, seed: int) -> dict:
    w = config.weights
    z_id, z_exp = batch.point_codes()
    terms = {"imitation_loss": imitation_loss(net, face, batch.points, z_id, z_exp, batch.targets),
             "exp_smooth_loss": exp_smooth_loss(net, batch.points, z_id, z_exp, config.delta, seed),
             "exp_minimal_loss": exp_minimal_loss(net, batch.points, z_id, z_exp)}
    total = (w.imitation * terms["imitation_loss"] + w.exp_smooth * terms["exp_smooth_loss"]
             + w.exp_minimal * terms["exp_minimal_loss"])
    if config.use_landmarks and w.lm > 0:
        lm = batched_surrogate_landmarks(net, face, batch)
        terms["landmark_loss"] = landmark_loss_to(lm, _landmark_targets(face, batch))
        total = total + w.lm * terms["landmark_loss"]
    terms["total"] = total
    return terms


def evaluate_expression(net, face, batch: ExpressionBatch) -> dict:
    """Held-out imitation loss and mean surrogate-landmark error."""
    z_id, z_exp = batch.point_codes()
    with torch.no_grad():
        imit = float(imitation_loss(net, face, batch.points, z_id, z_exp, batch.targets))
        lm = batched_surrogate_landmarks(net, face, batch).double().numpy()
    err = np.linalg.norm(lm - _landmark_targets(face, batch), axis=1).mean()
    return {"eval_imitation": imit, "eval_landmark_error": float(err)}


def fit_expression_field(net: ExpressionDeformNet, face: BlendshapeFaceModel, config: FitConfig = None,
                         dist=None, n_eval: int = 8, start_step: int = 0,
                         optimizer_state: dict = None, final_checkpoint=None):
    """Train ``net`` toward the blendshape displacements; returns ``(net, history)``.

    Each step draws ``codes_per_step`` code sets and ``batch_size`` points per
    set from an RNG derived from ``(seed, step)``, so resumed runs see the same
    data as uninterrupted ones.  Evaluation uses a fixed held-out batch.
    ``final_checkpoint`` saves parameters and optimizer moments at the end.
    """
    config = config or FitConfig()
    dist = _face_distribution(face, dist)
    eval_batch = expression_batch(face, np.random.default_rng([config.seed, 2 ** 31]), dist,
                                  config.batch_size, config.point_noise, n_eval)
    opt = config.optimizer(net.parameters())
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    history, initial = [], None
    for step in range(start_step, config.steps + 1):
        row = {"step": step}
        if config.eval_every and (step % config.eval_every == 0 or step == config.steps):
            row.update(evaluate_expression(net, face, eval_batch))
        if step == config.steps:
            history.append(row)
            break
        rng = np.random.default_rng([config.seed, step])
        batch = expression_batch(face, rng, dist, config.batch_size, config.point_noise,
                                 config.codes_per_step)
        _set_lr(opt, config.lr_at(step))
        opt.zero_grad()
        terms = expression_objective(net, face, batch, config, seed=int(rng.integers(2 ** 31)))
        terms["total"].backward()
        _check_finite(net, "expression_field", step)
        values = {k: float(v.detach()) for k, v in terms.items()}
        if initial is None:
            initial = values["total"]
        elif not values["total"] <= config.divergence_factor * max(initial, 1e-30):
            raise DivergenceError(f"loss {values['total']:.3e} exceeds {config.divergence_factor:g}x "
                                  f"the initial {initial:.3e} at step {step}")
        opt.step()
        row.update(values)
        history.append(row)
        if config.checkpoint_every and config.checkpoint_dir and (step + 1) % config.checkpoint_every == 0:
            save_checkpoint(net, opt, step + 1, Path(config.checkpoint_dir) / f"exp_{step + 1:06d}.apgn")
    if final_checkpoint is not None:
        save_checkpoint(net, opt, config.steps, final_checkpoint)
    return net, history


def save_checkpoint(net: nn.Module, opt: torch.optim.Optimizer, step: int, path) -> None:
    """Network parameters plus Adam moments, all in one APGN container."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    extra = {"meta/step": np.array([step], dtype=np.int32)}
    state = opt.state_dict()["state"]
    for i, s in state.items():
        for k in ("exp_avg", "exp_avg_sq"):
            extra[f"adam/{i}/{k}"] = s[k].detach().numpy()
        extra[f"adam/{i}/step"] = np.array([float(s["step"])])
    save_module(net, path, extra)


def load_checkpoint(net: nn.Module, path, config: FitConfig = None):
    """Restore parameters; returns ``(step, optimizer_state_dict)``."""
    extra = load_module(net, path)
    opt = (config or FitConfig()).optimizer(net.parameters())
    sd = opt.state_dict()
    state = {}
    for i in range(len(sd["param_groups"][0]["params"])):
        if f"adam/{i}/step" in extra:
            state[i] = {"step": torch.tensor(float(extra[f"adam/{i}/step"][0])),
                        "exp_avg": torch.as_tensor(extra[f"adam/{i}/exp_avg"]),
                        "exp_avg_sq": torch.as_tensor(extra[f"adam/{i}/exp_avg_sq"])}
    sd["state"] = state
    return int(extra["meta/step"][0]), sd


# ---------------------------------------------------------------------------
# pose volume processor

def adjacent_differences(values) -> list:
    """Max-abs channel difference between neighbouring cells along each grid axis."""
    v = np.asarray(values, dtype=np.float64)
    return [np.abs(np.diff(v, axis=a)).max(axis=-1) for a in range(3)]


def max_adjacent_difference(values, mask=None) -> float:
    """Largest neighbour difference; with ``mask``, only pairs touching a masked cell."""
    best = 0.0
    for a, d in enumerate(adjacent_differences(values)):
        if mask is not None:
            m = np.asarray(mask)
            sl0 = [slice(None)] * 3
            sl1 = [slice(None)] * 3
            sl0[a], sl1[a] = slice(None, -1), slice(1, None)
            d = d[m[tuple(sl0)] | m[tuple(sl1)]]
        if d.size:
            best = max(best, float(d.max()))
    return best


def total_variation(values, mask=None) -> float:
    """Sum of max-abs neighbour differences, optionally restricted as above."""
    total = 0.0
    for a, d in enumerate(adjacent_differences(values)):
        if mask is not None:
            m = np.asarray(mask)
            sl0 = [slice(None)] * 3
            sl1 = [slice(None)] * 3
            sl0[a], sl1[a] = slice(None, -1), slice(1, None)
            d = d[m[tuple(sl0)] | m[tuple(sl1)]]
        total += float(d.sum())
    return total


def interior_mask(values, tol: float = 1e-3, margin: int = 1) -> np.ndarray:
    """Cells away from transform discontinuities: the anchor set of the data term.

    A cell is in the band if any neighbour differs by more than ``tol``; the
    band is grown by ``margin`` cells and the complement returned.
    """
    v = np.asarray(values, dtype=np.float64)
    band = np.zeros(v.shape[:3], dtype=bool)
    for a, d in enumerate(adjacent_differences(v)):
        jump = d > tol
        sl0 = [slice(None)] * 3
        sl1 = [slice(None)] * 3
        sl0[a], sl1[a] = slice(None, -1), slice(1, None)
        band[tuple(sl0)] |= jump
        band[tuple(sl1)] |= jump
    for _ in range(margin):
        grown = band.copy()
        for a in range(3):
            sl0 = [slice(None)] * 3
            sl1 = [slice(None)] * 3
            sl0[a], sl1[a] = slice(None, -1), slice(1, None)
            grown[tuple(sl0)] |= band[tuple(sl1)]
            grown[tuple(sl1)] |= band[tuple(sl0)]
        band = grown
    return ~band


def synthetic_discontinuity_volume(shape=(16, 16, 10), jump: float = 0.2, n_impulses: int = 4,
                                   seed: int = 0):
    """Identity transforms with a translation step across ``i = H/2`` and isolated spikes.

    Mimics the two failure modes of nearest-vertex skinning: a sharp seam
    between body parts and single cells snapped to the wrong part.
    Returns ``(values (H, W, D, 16), interior mask)``.
    """
    rng = np.random.default_rng(seed)
    H, W, D = shape
    vals = np.broadcast_to(np.eye(4).reshape(16), shape + (16,)).copy()
    vals[H // 2:, :, :, 3] += jump
    for _ in range(n_impulses):
        i = int(rng.integers(2, H // 2 - 2)) if rng.random() < 0.5 else int(rng.integers(H // 2 + 2, H - 2))
        j, k = int(rng.integers(2, W - 2)), int(rng.integers(2, D - 2))
        vals[i, j, k, [3, 7, 11]] += rng.uniform(-jump, jump, 3)
    return vals, interior_mask(vals)


def _as_volume_batch(volumes):
    if torch.is_tensor(volumes):
        v = volumes
    else:
        v = torch.as_tensor(np.asarray(volumes, dtype=np.float64))
    if v.dim() == 4:
        v = v.unsqueeze(0)
    if v.dim() != 5 or v.shape[-1] != 16:
        raise ValueError(f"expected (N, H, W, D, 16) volumes, got {tuple(v.shape)}")
    return v.permute(0, 4, 1, 2, 3).contiguous()


def fit_pose_processor(net: PoseDeformNet, volumes, masks=None, config: FitConfig = None):
    """Train ``net`` on ``lambda_smooth * pose smooth + data_weight * interior anchoring``.

    ``volumes`` is ``(N, H, W, D, 16)``; ``masks`` is ``(N, H, W, D)`` and
    defaults to ``interior_mask`` of each volume.  One volume per step, cycling.
    Returns ``(net, history)``.
    """
    config = config or FitConfig()
    vols = _as_volume_batch(volumes).to(next(net.parameters()).dtype)
    if masks is None:
        masks = np.stack([interior_mask(v) for v in np.asarray(tensor_volumes(vols))])
    masks = torch.as_tensor(np.asarray(masks, dtype=bool))
    if masks.dim() == 3:
        masks = masks.unsqueeze(0)
    opt = config.optimizer(net.parameters())
    history, initial = [], None
    w = config.weights
    for step in range(config.steps):
        k = step % vols.shape[0]
        _set_lr(opt, config.lr_at(step))
        opt.zero_grad()
        smooth = pose_smooth_loss(net, vols[k:k + 1], config.smooth_fraction, seed=config.seed + step)
        data = pose_data_loss(net, vols[k:k + 1], masks[k])
        total = w.pose_smooth * smooth + config.data_weight * data
        total.backward()
        _check_finite(net, "pose_processor", step)
        value = float(total.detach())
        if initial is None:
            initial = max(value, 1e-30)
        elif not value <= config.divergence_factor * initial:
            raise DivergenceError(f"loss {value:.3e} exceeds {config.divergence_factor:g}x the "
                                  f"initial {initial:.3e} at step {step}")
        opt.step()
        history.append({"step": step, "pose_smooth_loss": float(smooth.detach()),
                        "pose_data_loss": float(data.detach()), "total": value})
        if config.checkpoint_every and config.checkpoint_dir and (step + 1) % config.checkpoint_every == 0:
            save_checkpoint(net, opt, step + 1, Path(config.checkpoint_dir) / f"pose_{step + 1:06d}.apgn")
    return net, history


def tensor_volumes(t: torch.Tensor) -> torch.Tensor:
    """``(N, 16, H, W, D)`` back to ``(N, H, W, D, 16)``."""
    return t.detach().permute(0, 2, 3, 4, 1)


def apply_processor(net: PoseDeformNet, volumes) -> np.ndarray:
    vols = _as_volume_batch(volumes).to(next(net.parameters()).dtype)
    with torch.no_grad():
        out = torch.cat([process_tensor(net, vols[k:k + 1]) for k in range(vols.shape[0])])
    return tensor_volumes(out).double().numpy()


def scene_volumes(scene, n_poses: int, seed: int = 0, resolution: int = 24, n_samples: int = 12,
                  dist: CodeDistribution = None) -> np.ndarray:
    """Raw nearest-vertex volumes ``(N, H, W, D, 16)`` for poses sampled from ``seed``."""
    from .camera import generate_rays
    from .deformation import assemble_volume
    from .render import RenderConfig, main_camera, pose_scene

    dist = dist or CodeDistribution(d_id_face=scene.face.d_id, d_id_body=scene.body.d_shape,
                                    d_exp=scene.d_exp, d_eps=scene.d_eps)
    cfg = RenderConfig(resolution=resolution, n_samples=n_samples)
    out = []
    for k in range(n_poses):
        codes = sample_codes(int(np.random.SeedSequence([seed, k]).generate_state(1)[0]), dist)
        posed = pose_scene(scene, codes)
        rays = generate_rays(main_camera(codes, cfg))
        out.append(assemble_volume(rays, posed.guide, posed.transforms, scene.blend_mode).values)
    return np.stack(out)


# ---------------------------------------------------------------------------
# estimator front ends

class PoseVolumeSmoother(BaseEstimator, TransformerMixin):
    """Fits a fresh pose processor to deformation volumes; ``transform`` applies it.

    ``X`` is ``(N, H, W, D, 16)`` (or a single ``(H, W, D, 16)`` volume).
    """

    def __init__(self, lr=3e-4, steps=2000, betas=(0.9, 0.999), smooth_weight=1.0, data_weight=1.0,
                 hidden=16, kernel=(9, 9, 5), smooth_fraction=1.0, mask_tol=1e-3, seed=0):
        self.lr = lr
        self.steps = steps
        self.betas = betas
        self.smooth_weight = smooth_weight
        self.data_weight = data_weight
        self.hidden = hidden
        self.kernel = kernel
        self.smooth_fraction = smooth_fraction
        self.mask_tol = mask_tol
        self.seed = seed

    def _validate(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 4:
            X = X[None]
        if X.ndim != 5 or X.shape[-1] != 16:
            raise ValueError(f"expected (N, H, W, D, 16) volumes, got shape {X.shape}")
        check_array(X.reshape(-1, 16))
        return X

    def fit(self, X, y=None, masks=None):
        X = self._validate(X)
        if masks is None:
            masks = np.stack([interior_mask(v, self.mask_tol) for v in X])
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            net = PoseDeformNet(hidden=self.hidden, kernel=self.kernel)
        cfg = FitConfig(lr=self.lr, steps=self.steps, betas=self.betas, seed=self.seed,
                        data_weight=self.data_weight,
                        smooth_fraction=self.smooth_fraction,
                        weights=LossWeights(pose_smooth=self.smooth_weight))
        self.net_, self.history_ = fit_pose_processor(net, X, masks, cfg)
        self.n_features_in_ = 16
        return self

    def transform(self, X):
        check_is_fitted(self, "net_")
        X = self._validate(X)
        return apply_processor(self.net_, X)


class ExpressionFieldFitter(BaseEstimator, TransformerMixin):
    """Fits an expression field to a blendshape face model.

    ``fit(X)`` takes training code rows ``[z_id | z_exp]`` (or ``None`` to
    sample from the default code distribution); ``transform(X)`` maps rows
    ``[x, y, z | z_id | z_exp]`` to canonical points.
    """

    def __init__(self, face=None, d_id_body=4, lr=2e-4, steps=2000, batch_size=128,
                 codes_per_step=16, weights=None, delta=1e-2, point_noise=0.005,
                 use_landmarks=True, eval_every=100, seed=0):
        self.face = face
        self.d_id_body = d_id_body
        self.lr = lr
        self.steps = steps
        self.batch_size = batch_size
        self.codes_per_step = codes_per_step
        self.weights = weights
        self.delta = delta
        self.point_noise = point_noise
        self.use_landmarks = use_landmarks
        self.eval_every = eval_every
        self.seed = seed

    @property
    def _d_id(self):
        return self.face.d_id + self.d_id_body

    def config(self) -> FitConfig:
        return FitConfig(lr=self.lr, steps=self.steps, batch_size=self.batch_size,
                         codes_per_step=self.codes_per_step,
                         weights=self.weights if self.weights is not None else LossWeights(),
                         delta=self.delta, point_noise=self.point_noise,
                         use_landmarks=self.use_landmarks, eval_every=self.eval_every, seed=self.seed)

    def fit(self, X=None, y=None):
        if self.face is None:
            raise ValueError("face model is required")
        d_id, d_exp = self._d_id, self.face.d_exp
        source = None
        if X is not None:
            X = check_array(X, dtype=np.float64)
            if X.shape[1] != d_id + d_exp:
                raise ValueError(f"code rows need {d_id + d_exp} columns, got {X.shape[1]}")
            source = CodePool(X[:, :d_id], X[:, d_id:])
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            net = ExpressionDeformNet(d_id, d_exp)
        dist = source or CodeDistribution(d_id_face=self.face.d_id, d_id_body=self.d_id_body,
                                          d_exp=d_exp)
        self.net_, self.history_ = fit_expression_field(net, self.face, self.config(), dist)
        self.n_features_in_ = d_id + d_exp
        return self

    def transform(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        want = 3 + self._d_id + self.face.d_exp
        if X.shape[1] != want:
            raise ValueError(f"rows need {want} columns (point, z_id, z_exp), got {X.shape[1]}")
        dtype = self.net_.head.weight.dtype
        with torch.no_grad():
            x = torch.as_tensor(X[:, :3], dtype=dtype)
            z = torch.as_tensor(X[:, 3:], dtype=dtype)
            dx = self.net_.offset(x, z)
        return X[:, :3] + dx.double().numpy()


# ---------------------------------------------------------------------------
# toy adversarial round

class ToyDiscriminator(nn.Module):
    """Average-pool then a two-layer perceptron; the output layer starts at zero."""

    def __init__(self, height: int, width: int, pool: int = 2, hidden: int = 64):
        super().__init__()
        self.pool = pool
        self.net = nn.Sequential(nn.Linear(3 * (height // pool) * (width // pool), hidden),
                                 nn.LeakyReLU(0.2), nn.Linear(hidden, 1))
        nn.init.zeros_(self.net[2].weight)
        nn.init.zeros_(self.net[2].bias)

    def forward(self, images):
        """``images`` is ``(B, H, W, 3)``; returns ``(B,)`` logits."""
        x = F.avg_pool2d(images.permute(0, 3, 1, 2), self.pool)
        return self.net(x.reshape(x.shape[0], -1)).squeeze(-1)


def make_discriminators(resolution: int = 32, pool: int = 2, hidden: int = 64, seed: int = 0):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return nn.ModuleDict({
            "whole": ToyDiscriminator(resolution, resolution, pool, hidden),
            "face": ToyDiscriminator(resolution, resolution, pool, hidden),
            "torso": ToyDiscriminator(resolution // 4, resolution, pool, hidden),
        }).double()


@dataclass
class ToyGANConfig:
    steps: int = 100
    resolution: int = 32
    n_samples: int = 8
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    betas: tuple = (0.0, 0.9)
    weights: LossWeights = field(default_factory=LossWeights)
    r1_gamma: float = 1.0
    r1_sigma: float = 1e-2
    n_real: int = 4
    real_seed: int = 1
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.betas = tuple(self.betas)
        if self.resolution % 4:
            raise ValueError("resolution must be divisible by 4 for the torso crop")


def _generator_modules(scene):
    return {"pose_net": scene.pose_net, "exp_net": scene.exp_net, "field": scene.field,
            "radiance_net": scene.radiance_net}


def _dual_tensors(scene, codes, cfg):
    from .render import RenderConfig, face_camera, main_camera, pose_scene, render_camera

    rc = RenderConfig(resolution=cfg.resolution, n_samples=cfg.n_samples)
    rc.face.resolution = cfg.resolution
    rc.face.n_samples = cfg.n_samples
    posed = pose_scene(scene, codes)
    portrait = render_camera(scene, codes, main_camera(codes, rc), posed, rc)["color"]
    face = render_camera(scene, codes, face_camera(posed, rc), posed, rc)["color"]
    return {"whole": portrait, "face": face, "torso": portrait[portrait.shape[0] * 3 // 4:]}


def _code_dist(scene):
    return CodeDistribution(d_id_face=scene.face.d_id, d_id_body=scene.body.d_shape,
                            d_exp=scene.d_exp, d_eps=scene.d_eps)


def real_image_pool(teacher, config: ToyGANConfig) -> List[dict]:
    """Dual renders of a separately seeded scene stand in for the real data."""
    dist = _code_dist(teacher)
    with torch.no_grad():
        return [{k: v.detach().clone() for k, v in
                 _dual_tensors(teacher, sample_codes(int(np.random.SeedSequence(
                     [config.real_seed, k]).generate_state(1)[0]), dist), config).items()}
                for k in range(config.n_real)]


def _r1_surrogate(D, real, sigma, generator):
    """``0.5 * E[(D(x + s n) - D(x))^2] / s^2`` estimates ``0.5 * ||grad D||^2`` to first order.

    Its parameter gradient needs only first-order backpropagation.
    """
    noise = torch.randn(real.shape, generator=generator, dtype=real.dtype)
    return 0.5 * ((D(real + sigma * noise) - D(real)) ** 2).mean() / sigma ** 2


def toy_adversarial_round(scene, discriminators=None, config: ToyGANConfig = None, real=None,
                          mirror_real: bool = False) -> List[dict]:
    """Alternating generator/discriminator steps on small dual renders.

    The generator loss is the weighted sum of the three non-saturating terms.
    The portrait branch (whole image plus torso crop) and the face branch are
    back-propagated separately so each one's gradient norm can be reported; a
    branch whose weights are all zero is skipped.  The discriminator loss adds
    an R1 term on real inputs.  ``mirror_real`` feeds each step's fake images
    as the real batch, the symmetric setting.  The generator keeps the scene's
    dtype; discriminators run in float64.
    """
    config = config or ToyGANConfig()
    D = discriminators if discriminators is not None else make_discriminators(config.resolution, seed=config.seed)
    D = D.double()
    gen = _generator_modules(scene)
    g_params = [p for m in gen.values() for p in m.parameters()]
    opt_g = torch.optim.Adam(g_params, lr=config.lr_g, betas=config.betas)
    opt_d = torch.optim.Adam(D.parameters(), lr=config.lr_d, betas=config.betas)
    if real is None and not mirror_real:
        from .render import Scene

        teacher = Scene(scene.face, scene.body, d_eps=scene.d_eps, seed=config.real_seed + 1000).to(scene.dtype)
        real = real_image_pool(teacher, config)
    lam = config.weights.adversarial()
    dist = _code_dist(scene)
    noise_gen = torch.Generator().manual_seed(config.seed)
    history = []
    for step in range(config.steps):
        codes = sample_codes(int(np.random.SeedSequence([config.seed, step]).generate_state(1)[0]), dist)
        fake = {k: v.double() for k, v in _dual_tensors(scene, codes, config).items()}
        row = {"step": step}

        # generator
        opt_g.zero_grad()
        g_terms = {name: F.softplus(-D[name](img[None])).mean() for name, img in fake.items()}
        for name, g_b in g_terms.items():
            row[f"g_{name}"] = float(g_b.detach())
        total = [torch.zeros_like(p) for p in g_params]
        for branch, names in (("portrait", ("whole", "torso")), ("face", ("face",))):
            norm = 0.0
            active = [n for n in names if lam[n] > 0]
            if active:
                loss = sum(lam[n] * g_terms[n] for n in active)
                grads = torch.autograd.grad(loss, g_params, retain_graph=True, allow_unused=True)
                for acc, g in zip(total, grads):
                    if g is not None:
                        acc += g
                norm = float(torch.sqrt(sum((g.double() ** 2).sum() for g in grads if g is not None)))
            row[f"gen_grad_norm_{branch}"] = norm
        for p, g in zip(g_params, total):
            p.grad = g
        for mname, m in gen.items():
            _check_finite(m, f"generator.{mname}", step)
        opt_g.step()

        # discriminators
        opt_d.zero_grad()
        real_b = fake if mirror_real else real[step % len(real)]
        d_total = 0.0
        for name in ("whole", "face", "torso"):
            x_real = real_b[name][None].detach().double().clone().requires_grad_(True)
            x_fake = fake[name][None].detach()
            real_logit = D[name](x_real)
            _, d_b = gan_losses(real_logit, D[name](x_fake))
            (grad_in,) = torch.autograd.grad(real_logit.sum(), x_real, retain_graph=True)
            row[f"d_{name}"] = float(d_b.detach())
            row[f"r1_{name}"] = float(r1_penalty(grad_in))
            if lam[name] > 0:
                penalty = _r1_surrogate(D[name], x_real.detach(), config.r1_sigma, noise_gen)
                d_total = d_total + lam[name] * (d_b + config.r1_gamma * penalty)
        if torch.is_tensor(d_total):
            d_total.backward()
        for name in D:
            _check_finite(D[name], f"D_{name}", step)
        opt_d.step()
        row["finite"] = True
        history.append(row)
    return history
