"""Command-line driver: ``python -m portraitgen <subcommand> ...``.

Exit codes: 0 success, 1 unexpected failure, 2 usage error, 3 bad
configuration, 4 file I/O failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._binary import ModelFormatError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    pass


class _UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration

@dataclass
class RunConfig:
    """JSON run configuration; every key is optional and unknown keys are errors.

    ``face_model``/``body_model``: APGM files, toy models from ``asset_seed``
    when absent.  ``scene_seed`` seeds network initialisation, ``seed`` the
    latent codes.  ``exp_checkpoint``/``pose_checkpoint`` load trained
    deformation networks.  ``distribution``, ``render``, ``weights``, ``fit``,
    ``pose_fit`` and ``gan`` are objects whose keys are the fields of
    ``CodeDistribution``, ``RenderConfig`` (with a nested ``face`` camera
    object), ``LossWeights``, ``FitConfig`` (expression field), ``FitConfig``
    (pose processor, own defaults) and ``ToyGANConfig``.
    """

    face_model: str | None = None
    body_model: str | None = None
    asset_seed: int = 0
    scene_seed: int = 0
    seed: int | None = None
    d_eps: int = 32
    background: tuple = (1.0, 1.0, 1.0)
    exp_checkpoint: str | None = None
    pose_checkpoint: str | None = None
    distribution: dict = field(default_factory=dict)
    render: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    fit: dict = field(default_factory=dict)
    pose_fit: dict = field(default_factory=dict)
    gan: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        _check_keys(cls, data, "config")
        cfg = cls(**data)
        # validate nested blocks eagerly so errors surface before any work
        cfg.code_distribution(20, 8)
        cfg.render_config()
        cfg.loss_weights()
        cfg.fit_config()
        cfg.pose_fit_config()
        cfg.gan_config()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
        return cls.from_dict(data)

    def code_distribution(self, d_id_face: int, d_exp: int, d_id_body: int = 4):
        from .latents import CodeDistribution

        base = dict(d_id_face=d_id_face, d_id_body=d_id_body, d_exp=d_exp, d_eps=self.d_eps)
        _check_keys(CodeDistribution, self.distribution, "distribution")
        base.update({k: (tuple(v) if isinstance(v, list) and k.endswith(("range", "truncation", "target"))
                         else v) for k, v in self.distribution.items()})
        return _build(CodeDistribution, base, "distribution")

    def render_config(self, **overrides):
        from .camera import FaceCameraConfig
        from .render import RenderConfig

        block = dict(self.render)
        _check_keys(RenderConfig, block, "render")
        face = block.pop("face", {})
        if not isinstance(face, dict):
            raise ConfigError("render.face must be an object")
        _check_keys(FaceCameraConfig, face, "render.face")
        block.update({k: v for k, v in overrides.items() if v is not None})
        block["face"] = _build(FaceCameraConfig, face, "render.face")
        return _build(RenderConfig, block, "render")

    def loss_weights(self):
        from .losses import LossWeights

        _check_keys(LossWeights, self.weights, "weights")
        return _build(LossWeights, self.weights, "weights")

    def fit_config(self, **overrides):
        from .fit import FitConfig

        block = dict(self.fit)
        _check_keys(FitConfig, block, "fit")
        if "weights" in block:
            raise ConfigError("fit.weights: put loss weights in the top-level 'weights' object")
        block.update({k: v for k, v in overrides.items() if v is not None})
        block["weights"] = self.loss_weights()
        return _build(FitConfig, block, "fit")

    def pose_fit_config(self, **overrides):
        from .fit import POSE_FIT_DEFAULTS, FitConfig

        block = dict(self.pose_fit)
        _check_keys(FitConfig, block, "pose_fit")
        if "weights" in block:
            raise ConfigError("pose_fit.weights: put loss weights in the top-level 'weights' object")
        block = {**POSE_FIT_DEFAULTS, **block}
        block.update({k: v for k, v in overrides.items() if v is not None})
        block["weights"] = self.loss_weights()
        return _build(FitConfig, block, "pose_fit")

    def gan_config(self, **overrides):
        from .fit import ToyGANConfig

        block = dict(self.gan)
        _check_keys(ToyGANConfig, block, "gan")
        if "weights" in block:
            raise ConfigError("gan.weights: put loss weights in the top-level 'weights' object")
        block.update({k: v for k, v in overrides.items() if v is not None})
        block["weights"] = self.loss_weights()
        return _build(ToyGANConfig, block, "gan")


def _check_keys(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")


def _build(cls, kwargs, where):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def resolve_seed(flag, config: RunConfig) -> int:
    """``--seed`` wins, then the config's ``seed``, then ``APG_SEED``, then 0."""
    if flag is not None:
        return int(flag)
    if config.seed is not None:
        return int(config.seed)
    env = os.environ.get("APG_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"APG_SEED={env!r} is not an integer") from exc
    return 0


# ---------------------------------------------------------------------------
# shared helpers

def _load_models(cfg: RunConfig):
    from .assets import BlendshapeFaceModel, SkinnedBodyModel, generate_toy_models, load_model

    face, body = None, None
    if cfg.face_model is None or cfg.body_model is None:
        face, body = generate_toy_models(cfg.asset_seed)
    if cfg.face_model is not None:
        face = load_model(cfg.face_model)
        if not isinstance(face, BlendshapeFaceModel):
            raise ConfigError(f"{cfg.face_model} is not a face model")
    if cfg.body_model is not None:
        body = load_model(cfg.body_model)
        if not isinstance(body, SkinnedBodyModel):
            raise ConfigError(f"{cfg.body_model} is not a body model")
    return face, body


def _build_scene(cfg: RunConfig):
    from .checkpoint import load_module
    from .render import Scene

    face, body = _load_models(cfg)
    scene = Scene(face, body, d_eps=cfg.d_eps, seed=cfg.scene_seed, background=tuple(cfg.background))
    if cfg.exp_checkpoint:
        load_module(scene.exp_net, cfg.exp_checkpoint)
    if cfg.pose_checkpoint:
        load_module(scene.pose_net, cfg.pose_checkpoint)
    return scene


def _codes(scene, cfg: RunConfig, seed: int):
    from .latents import sample_codes

    dist = cfg.code_distribution(scene.face.d_id, scene.d_exp, scene.body.d_shape)
    return sample_codes(seed, dist), dist


def parse_dim(name: str, codes):
    """``z_pose.<joint>.<x|y|z>``, ``z_exp.<k>``, ``z_id.<k>`` or ``eps.<k>`` -> (block, index)."""
    from .latents import CONTROLLED_JOINTS

    parts = name.split(".")
    block = parts[0]
    if block == "z_pose" and len(parts) == 3:
        if parts[1] not in CONTROLLED_JOINTS or parts[2] not in ("x", "y", "z"):
            raise _UsageError(f"unknown pose dimension {name!r}; joints: {', '.join(CONTROLLED_JOINTS)}")
        return block, 3 * CONTROLLED_JOINTS.index(parts[1]) + "xyz".index(parts[2])
    if block in ("z_exp", "z_id", "eps") and len(parts) == 2 and parts[1].isdigit():
        k = int(parts[1])
        if k >= len(getattr(codes, block)):
            raise _UsageError(f"{name!r} is out of range ({block} has {len(getattr(codes, block))} entries)")
        return block, k
    raise _UsageError(f"cannot parse code dimension {name!r}")


def set_dim(codes, name: str, value: float):
    block, k = parse_dim(name, codes)
    arr = getattr(codes, block).copy()
    arr[k] = value
    return codes.replace(**{block: arr})


def _parse_set(items, codes):
    for item in items or ():
        if "=" not in item:
            raise _UsageError(f"--set expects DIM=VALUE, got {item!r}")
        dim, val = item.split("=", 1)
        try:
            codes = set_dim(codes, dim, float(val))
        except ValueError as exc:
            raise _UsageError(f"--set {item}: {exc}") from exc
    return codes


def _write_image(img, path: Path, png: bool):
    path.parent.mkdir(parents=True, exist_ok=True)
    img.write_ppm(path)
    written = [path]
    if png:
        img.write_png(path.with_suffix(".png"))
        written.append(path.with_suffix(".png"))
    return written


def _write_manifest(directory: Path, lines):
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def _render_cfg(cfg: RunConfig, args):
    return cfg.render_config(resolution=getattr(args, "resolution", None),
                             n_samples=getattr(args, "samples", None), mode=getattr(args, "mode", None))


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_assets(args, cfg):
    from .assets import generate_toy_models, save_model

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    face, body = generate_toy_models(args.asset_seed if args.asset_seed is not None else cfg.asset_seed)
    save_model(face, out / "face.apgm")
    save_model(body, out / "body.apgm")
    print(f"wrote {out / 'face.apgm'} and {out / 'body.apgm'}")


def cmd_render(args, cfg):
    from .render import render_portrait

    scene = _build_scene(cfg)
    codes, _ = _codes(scene, cfg, resolve_seed(args.seed, cfg))
    codes = _parse_set(args.set, codes)
    img = render_portrait(scene, codes, config=_render_cfg(cfg, args))
    for p in _write_image(img, Path(args.out), args.png):
        print(f"wrote {p}")


def cmd_dual_render(args, cfg):
    from .render import render_dual, torso_crop

    scene = _build_scene(cfg)
    codes, _ = _codes(scene, cfg, resolve_seed(args.seed, cfg))
    codes = _parse_set(args.set, codes)
    portrait, face = render_dual(scene, codes, config=_render_cfg(cfg, args))
    out = Path(args.out)
    names = []
    for name, img in (("portrait", portrait), ("face", face), ("torso", torso_crop(portrait))):
        names += [p.name for p in _write_image(img, out / f"{name}.ppm", args.png)]
    _write_manifest(out, names)
    print(f"wrote {len(names)} files to {out}")


def cmd_sweep(args, cfg):
    from .render import render_portrait

    if args.frames < 1:
        raise _UsageError("--frames must be at least 1")
    scene = _build_scene(cfg)
    codes, _ = _codes(scene, cfg, resolve_seed(args.seed, cfg))
    codes = _parse_set(args.set, codes)
    parse_dim(args.dim, codes)
    rcfg = _render_cfg(cfg, args)
    values = np.linspace(args.from_, args.to, args.frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, v in enumerate(values):
        img = render_portrait(scene, set_dim(codes, args.dim, float(v)), config=rcfg)
        _write_image(img, out / f"frame_{k:03d}.ppm", args.png)
        lines.append(f"frame_{k:03d}.ppm {args.dim}={float(v)!r}")
    _write_manifest(out, lines)
    print(f"wrote {len(values)} frames to {out}")


def cmd_retarget(args, cfg):
    from .geometry import orbit_pose
    from .latents import read_code_sequence
    from .render import render_portrait

    scene = _build_scene(cfg)
    codes, dist = _codes(scene, cfg, resolve_seed(args.seed, cfg))
    try:
        frames = read_code_sequence(args.sequence, scene.d_exp)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rcfg = _render_cfg(cfg, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, fr in enumerate(frames):
        cam = orbit_pose(fr.yaw, fr.pitch, dist.camera_radius, dist.camera_target)
        try:
            c = codes.replace(z_exp=fr.z_exp, z_pose=fr.z_pose, camera_pose=cam)
        except ValueError as exc:
            raise ConfigError(f"{args.sequence}: frame {fr.index}: {exc}") from exc
        img = render_portrait(scene, c, config=rcfg)
        _write_image(img, out / f"frame_{k:03d}.ppm", args.png)
        lines.append(f"frame_{k:03d}.ppm source_index={fr.index}")
    _write_manifest(out, lines)
    print(f"wrote {len(frames)} frames to {out}")


def cmd_fit_exp(args, cfg):
    import torch

    from .fit import fit_expression_field, load_checkpoint, write_history

    face, body = _load_models(cfg)
    fcfg = cfg.fit_config(steps=args.steps, seed=args.seed, lr=args.lr,
                          checkpoint_every=args.checkpoint_every, checkpoint_dir=args.checkpoint_dir)
    from .deformation import ExpressionDeformNet

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(fcfg.seed)
        net = ExpressionDeformNet(face.d_id + body.d_shape, face.d_exp)
    start, opt_state = 0, None
    if args.resume:
        start, opt_state = load_checkpoint(net, args.resume, fcfg)
    dist = cfg.code_distribution(face.d_id, face.d_exp, body.d_shape)
    net, history = fit_expression_field(net, face, fcfg, dist, start_step=start, optimizer_state=opt_state,
                                        final_checkpoint=args.out)
    if args.history:
        write_history(args.history, history)
    evals = [h for h in history if "eval_imitation" in h]
    if evals:
        print(f"imitation {evals[0]['eval_imitation']:.4e} -> {evals[-1]['eval_imitation']:.4e}; "
              f"landmark error {evals[0]['eval_landmark_error']:.4e} -> {evals[-1]['eval_landmark_error']:.4e}")
    print(f"wrote {args.out}")


def cmd_fit_pose(args, cfg):
    import torch

    from .checkpoint import save_module
    from .deformation import PoseDeformNet
    from .fit import (fit_pose_processor, apply_processor, interior_mask, scene_volumes,
                      total_variation, write_history)

    scene = _build_scene(cfg)
    seed = resolve_seed(args.seed, cfg)
    fcfg = cfg.pose_fit_config(steps=args.steps, seed=seed, lr=args.lr)
    train = scene_volumes(scene, args.poses, seed=seed, resolution=args.resolution, n_samples=args.samples)
    held = scene_volumes(scene, 2, seed=seed + 1, resolution=args.resolution, n_samples=args.samples)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = PoseDeformNet()
    net, history = fit_pose_processor(net, train, None, fcfg)
    out = apply_processor(net, held)
    for k, (raw, proc) in enumerate(zip(held, out)):
        band = ~interior_mask(raw)
        print(f"held-out pose {k}: band total variation {total_variation(raw, band):.4f} -> "
              f"{total_variation(proc, band):.4f}")
    save_module(net, args.out)
    if args.history:
        write_history(args.history, history)
    print(f"wrote {args.out}")


def cmd_toy_gan(args, cfg):
    from .fit import toy_adversarial_round, write_history

    scene = _build_scene(cfg)
    gcfg = cfg.gan_config(steps=args.steps, seed=resolve_seed(args.seed, cfg))
    history = toy_adversarial_round(scene, config=gcfg)
    if args.history:
        write_history(args.history, history)
    first, last = history[0], history[-1]
    for name in ("whole", "face", "torso"):
        print(f"D_{name}: loss {first[f'd_{name}']:.6f} -> {last[f'd_{name}']:.6f}")
    print(f"{len(history)} steps, all gradients finite")


def cmd_gradcheck(args, cfg):
    from .autodiff import run_gradient_suite

    reports = run_gradient_suite(seed=resolve_seed(args.seed, cfg), n_coords=args.coords)
    worst = 0.0
    rows = []
    for loss, rep in reports.items():
        print(f"[{loss}]")
        print(rep.table())
        worst = max(worst, rep.max_error)
        rows += [(loss,) + r for r in rep.rows()]
    if args.csv:
        import csv

        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["loss", "parameter", "coords", "max_rel_error", "analytic", "numeric"])
            w.writerows(rows)
    ok = worst < args.tol
    print(f"max relative error {worst:.3e} ({'pass' if ok else 'FAIL'} at tol {args.tol:g})")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_info(args, cfg):
    import numba
    import torch

    from . import __version__
    from .manifolds import N_LEVELS

    face, body = _load_models(cfg)
    print(f"portraitgen {__version__}")
    print(f"face model: {face.n_vertices} vertices, d_id={face.d_id}, d_exp={face.d_exp}, "
          f"{len(face.landmark_indices)} landmarks")
    print(f"body model: {body.n_vertices} vertices, {body.n_joints} joints, d_shape={body.d_shape}")
    print(f"latent dims: z_id={face.d_id + body.d_shape} z_exp={face.d_exp} z_pose=18 eps={cfg.d_eps}")
    print(f"manifolds: {N_LEVELS}")
    print(f"threads: torch={torch.get_num_threads()} numba={numba.get_num_threads()} cpus={os.cpu_count()}")


# ---------------------------------------------------------------------------
# parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_common(p):
    p.add_argument("--config", metavar="PATH", help="JSON run configuration (unknown keys are rejected)")
    p.add_argument("--seed", type=int, help="latent-code seed (falls back to config seed, then APG_SEED, then 0)")
    p.add_argument("--threads", type=int, help="thread budget for torch and numba (default: all hardware threads)")


def _add_render(p, out_help):
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("--resolution", type=int, help="image width and height in pixels")
    p.add_argument("--samples", type=int, help="samples per ray")
    p.add_argument("--mode", choices=("direct", "map"), help="radiance from the network or from radiance maps")
    p.add_argument("--png", action="store_true", help="also write a PNG next to every PPM")
    p.add_argument("--set", action="append", metavar="DIM=VALUE",
                   help="override one code dimension, e.g. z_pose.head.y=0.2 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="portraitgen", description="Toy 3D-aware portrait generator.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-assets", help="write the toy face and body models")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory for face.apgm and body.apgm")
    p.add_argument("--asset-seed", type=int, help="model generator seed (default: config asset_seed)")
    p.set_defaults(func=cmd_gen_assets)

    p = sub.add_parser("render", help="render one portrait")
    _add_common(p)
    _add_render(p, "output PPM path")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("dual-render", help="render portrait, face camera and torso crop")
    _add_common(p)
    _add_render(p, "output directory")
    p.set_defaults(func=cmd_dual_render)

    p = sub.add_parser("sweep", help="vary one code dimension with the others fixed")
    _add_common(p)
    _add_render(p, "output directory")
    p.add_argument("--dim", required=True, help="code dimension, e.g. z_pose.head.y, z_exp.0, eps.3")
    p.add_argument("--from", dest="from_", type=float, required=True, help="first value")
    p.add_argument("--to", type=float, required=True, help="last value")
    p.add_argument("--frames", type=int, required=True, help="number of frames")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("retarget", help="render a code-sequence file frame by frame")
    _add_common(p)
    _add_render(p, "output directory")
    p.add_argument("sequence", help="code-sequence text file")
    p.set_defaults(func=cmd_retarget)

    p = sub.add_parser("fit-exp", help="fit the expression field to the face model")
    _add_common(p)
    p.add_argument("--out", required=True, help="output checkpoint (APGN)")
    p.add_argument("--steps", type=int, help="optimizer steps")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--history", help="write the loss history CSV here")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--checkpoint-every", type=int, help="save a checkpoint every N steps")
    p.add_argument("--checkpoint-dir", help="directory for periodic checkpoints")
    p.set_defaults(func=cmd_fit_exp)

    p = sub.add_parser("fit-pose", help="fit the pose volume processor")
    _add_common(p)
    p.add_argument("--out", required=True, help="output checkpoint (APGN)")
    p.add_argument("--steps", type=int, help="optimizer steps")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--poses", type=int, default=4, help="training poses (default 4)")
    p.add_argument("--resolution", type=int, default=24, help="volume width and height (default 24)")
    p.add_argument("--samples", type=int, default=12, help="volume depth (default 12)")
    p.add_argument("--history", help="write the loss history CSV here")
    p.set_defaults(func=cmd_fit_pose)

    p = sub.add_parser("toy-gan", help="run the toy adversarial round")
    _add_common(p)
    p.add_argument("--steps", type=int, help="generator/discriminator step pairs")
    p.add_argument("--history", help="write per-step diagnostics CSV here")
    p.set_defaults(func=cmd_toy_gan)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    _add_common(p)
    p.add_argument("--coords", type=int, default=64, help="coordinates checked per parameter block (default 64)")
    p.add_argument("--tol", type=float, default=1e-3, help="pass threshold on relative error (default 1e-3)")
    p.add_argument("--csv", help="write the per-block table as CSV")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("info", help="print model and runtime information")
    _add_common(p)
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        from .render import set_threads

        set_threads(args.threads)
        cfg = RunConfig.load(args.config)
        code = args.func(args, cfg)
        return EXIT_OK if code is None else int(code)
    except _UsageError as exc:
        print(f"portraitgen {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"portraitgen {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ModelFormatError) as exc:
        print(f"portraitgen {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001
        print(f"portraitgen {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
