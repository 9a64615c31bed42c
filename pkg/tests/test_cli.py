import argparse
import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from portraitgen.assets import load_model
from portraitgen.cli import (EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_USAGE, RunConfig, build_parser, main,
                             resolve_seed)
from portraitgen.latents import POSE_DIM, SequenceFrame, write_code_sequence
from portraitgen.render import read_ppm

SUBCOMMANDS = ["gen-assets", "render", "dual-render", "sweep", "retarget", "fit-exp", "fit-pose",
               "toy-gan", "gradcheck", "info"]


@pytest.fixture
def cfg_path(tmp_path):
    cfg = {"render": {"resolution": 16, "n_samples": 8, "face": {"resolution": 16, "n_samples": 8}},
           "fit": {"batch_size": 16, "codes_per_step": 2, "eval_every": 2}}
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    return str(p)


def _subparsers():
    parser = build_parser()
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return action.choices


def test_all_subcommands_present():
    assert sorted(_subparsers()) == sorted(SUBCOMMANDS)


@pytest.mark.parametrize("name", SUBCOMMANDS)
def test_help_lists_every_flag(name, capsys):
    sub = _subparsers()[name]
    assert main([name, "--help"]) == EXIT_OK
    text = capsys.readouterr().out
    flags = [o for a in sub._actions for o in a.option_strings]
    assert "--threads" in flags and "--seed" in flags and "--config" in flags
    for flag in flags:
        assert flag in text, f"{name}: {flag} missing from --help"
    for a in sub._actions:
        if a.option_strings and a.help is not argparse.SUPPRESS and "-h" not in a.option_strings:
            assert a.help, f"{name}: {a.option_strings} is undocumented"


def test_top_level_help_lists_subcommands(capsys):
    assert main(["--help"]) == EXIT_OK
    out = capsys.readouterr().out
    for name in SUBCOMMANDS:
        assert name in out


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "portraitgen", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "render" in r.stdout


# ---------------------------------------------------------------------------
# exit codes

def test_unknown_flag_exit_2(tmp_path, capsys):
    assert main(["render", "--out", str(tmp_path / "a.ppm"), "--bogus"]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE


def test_unknown_config_key_exit_3(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"render": {"resolutoin": 8}}))
    assert main(["render", "--config", str(p), "--out", str(tmp_path / "a.ppm")]) == EXIT_CONFIG
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "resolutoin" in err[0]


def test_invalid_json_exit_3(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{render: 1")
    assert main(["info", "--config", str(p)]) == EXIT_CONFIG


def test_missing_config_exit_4(tmp_path, capsys):
    assert main(["info", "--config", str(tmp_path / "nope.json")]) == EXIT_IO


def test_bad_model_file_exit_4(tmp_path, capsys):
    bad = tmp_path / "face.apgm"
    bad.write_bytes(b"XXXX" + bytes(40))
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"face_model": str(bad)}))
    assert main(["info", "--config", str(p)]) == EXIT_IO


def test_bad_dim_exit_2(tmp_path, cfg_path, capsys):
    args = ["sweep", "--config", cfg_path, "--out", str(tmp_path), "--dim", "z_pose.tail.y",
            "--from", "0", "--to", "1", "--frames", "2"]
    assert main(args) == EXIT_USAGE


def test_config_rejects_unknown_nested_face_key():
    with pytest.raises(ValueError):
        RunConfig.from_dict({"render": {"face": {"radius": 0.3, "zoom": 2}}})
    with pytest.raises(ValueError):
        RunConfig.from_dict({"colour": 1})


def test_seed_precedence(monkeypatch):
    monkeypatch.delenv("APG_SEED", raising=False)
    assert resolve_seed(None, RunConfig()) == 0
    monkeypatch.setenv("APG_SEED", "17")
    assert resolve_seed(None, RunConfig()) == 17
    assert resolve_seed(None, RunConfig(seed=5)) == 5
    assert resolve_seed(3, RunConfig(seed=5)) == 3


# ---------------------------------------------------------------------------
# subcommands

def test_gen_assets_roundtrip(tmp_path, capsys, face):
    assert main(["gen-assets", "--out", str(tmp_path), "--asset-seed", "0"]) == EXIT_OK
    loaded = load_model(tmp_path / "face.apgm")
    np.testing.assert_array_equal(loaded.mean_vertices, face.mean_vertices)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"face_model": str(tmp_path / "face.apgm"),
                               "body_model": str(tmp_path / "body.apgm")}))
    assert main(["info", "--config", str(cfg)]) == EXIT_OK
    assert "d_exp=8" in capsys.readouterr().out


def test_render_deterministic(tmp_path, cfg_path, capsys):
    a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
    assert main(["render", "--seed", "0", "--config", cfg_path, "--out", str(a), "--threads", "1"]) == 0
    assert main(["render", "--seed", "0", "--config", cfg_path, "--out", str(b), "--threads", "1"]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert read_ppm(a).shape == (16, 16, 3)


def test_render_env_seed(tmp_path, cfg_path, monkeypatch, capsys):
    monkeypatch.setenv("APG_SEED", "4")
    assert main(["render", "--config", cfg_path, "--out", str(tmp_path / "e.ppm")]) == 0
    assert main(["render", "--seed", "4", "--config", cfg_path, "--out", str(tmp_path / "s.ppm")]) == 0
    assert (tmp_path / "e.ppm").read_bytes() == (tmp_path / "s.ppm").read_bytes()


def test_render_png_and_flags(tmp_path, cfg_path, capsys):
    out = tmp_path / "r.ppm"
    assert main(["render", "--config", cfg_path, "--out", str(out), "--resolution", "8", "--samples", "6",
                 "--mode", "direct", "--png"]) == 0
    assert read_ppm(out).shape == (8, 8, 3) and out.with_suffix(".png").exists()


def test_dual_render_outputs(tmp_path, cfg_path, capsys):
    assert main(["dual-render", "--config", cfg_path, "--out", str(tmp_path)]) == 0
    assert read_ppm(tmp_path / "portrait.ppm").shape == (16, 16, 3)
    assert read_ppm(tmp_path / "face.ppm").shape == (16, 16, 3)
    torso = read_ppm(tmp_path / "torso.ppm")
    assert torso.shape == (4, 16, 3)
    np.testing.assert_array_equal(torso, read_ppm(tmp_path / "portrait.ppm")[12:])
    assert (tmp_path / "manifest.txt").read_text().split() == ["portrait.ppm", "face.ppm", "torso.ppm"]


def test_sweep_midpoint_matches_render(tmp_path, cfg_path, capsys):
    sweep = tmp_path / "sweep"
    assert main(["sweep", "--seed", "0", "--config", cfg_path, "--out", str(sweep), "--dim", "z_pose.head.y",
                 "--from", "-0.5", "--to", "0.5", "--frames", "5"]) == 0
    frames = sorted(p.name for p in sweep.glob("frame_*.ppm"))
    assert frames == [f"frame_{k:03d}.ppm" for k in range(5)]
    direct = tmp_path / "mid.ppm"
    assert main(["render", "--seed", "0", "--config", cfg_path, "--out", str(direct),
                 "--set", "z_pose.head.y=0.0"]) == 0
    assert (sweep / "frame_002.ppm").read_bytes() == direct.read_bytes()
    assert (sweep / "frame_000.ppm").read_bytes() != direct.read_bytes()
    assert len((sweep / "manifest.txt").read_text().splitlines()) == 5


def test_retarget_three_rows(tmp_path, cfg_path, capsys):
    rng = np.random.default_rng(0)
    frames = [SequenceFrame(k, rng.normal(size=8), 0.1 * rng.normal(size=POSE_DIM), 0.1 * k, 0.0)
              for k in range(3)]
    seq = tmp_path / "seq.txt"
    write_code_sequence(seq, frames)
    out = tmp_path / "frames"
    assert main(["retarget", str(seq), "--config", cfg_path, "--out", str(out)]) == 0
    assert sorted(p.name for p in out.glob("*.ppm")) == ["frame_000.ppm", "frame_001.ppm", "frame_002.ppm"]


def test_retarget_bad_sequence_exit_3(tmp_path, cfg_path, capsys):
    seq = tmp_path / "seq.txt"
    seq.write_text("0 1 2 3\n")
    assert main(["retarget", str(seq), "--config", cfg_path, "--out", str(tmp_path)]) == EXIT_CONFIG


def _read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_fit_exp_resume_bitwise(tmp_path, cfg_path, capsys):
    full = tmp_path / "full.csv"
    assert main(["fit-exp", "--config", cfg_path, "--steps", "6", "--out", str(tmp_path / "full.apgn"),
                 "--history", str(full), "--checkpoint-every", "3",
                 "--checkpoint-dir", str(tmp_path / "ck")]) == 0
    resumed = tmp_path / "resumed.csv"
    assert main(["fit-exp", "--config", cfg_path, "--steps", "6", "--out", str(tmp_path / "res.apgn"),
                 "--resume", str(tmp_path / "ck" / "exp_000003.apgn"), "--history", str(resumed)]) == 0
    a, b = _read_csv(full), _read_csv(resumed)
    assert [r["step"] for r in b] == ["3", "4", "5", "6"]
    assert a[3:] == b
    assert (tmp_path / "full.apgn").read_bytes() == (tmp_path / "res.apgn").read_bytes()


def test_gradcheck_cli(tmp_path, capsys):
    out = tmp_path / "g.csv"
    assert main(["gradcheck", "--coords", "8", "--csv", str(out)]) == 0
    rows = _read_csv(out)
    assert {r["loss"] for r in rows} >= {"imitation", "r1", "pose_smooth"}
    assert "pass" in capsys.readouterr().out


def test_fit_pose_cli(tmp_path, cfg_path, capsys):
    hist = tmp_path / "p.csv"
    assert main(["fit-pose", "--config", cfg_path, "--steps", "3", "--poses", "1", "--resolution", "8",
                 "--samples", "6", "--out", str(tmp_path / "p.apgn"), "--history", str(hist)]) == 0
    rows = _read_csv(hist)
    assert len(rows) == 3 and {"pose_smooth_loss", "pose_data_loss"} <= set(rows[0])
    assert "band total variation" in capsys.readouterr().out


def test_toy_gan_cli(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"gan": {"resolution": 8, "n_samples": 6, "n_real": 2}}))
    hist = tmp_path / "g.csv"
    assert main(["toy-gan", "--config", str(p), "--steps", "2", "--history", str(hist)]) == 0
    assert len(_read_csv(hist)) == 2
