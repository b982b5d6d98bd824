"""Tests for the videodepth command line."""

import json

import pytest

from src.videodepth.cli import build_parser, main

SCENE = """
seed = 0
num_frames = 4
width = 16
height = 16
trajectory = "dolly"
motion = 0.5
back_wall = false

[[primitives]]
kind = "plane"
center = [0.0, 0.0, 3.0]
normal = [0.0, 0.0, -1.0]
texture = 1.0
"""

TRAIN = """
stage = 1
steps = 2
clip_len = 4
batch_size = 1
data_dir = "data"
run_dir = "runs/cli"
checkpoint_every = 1

[model]
patch_size = 4
embed_dim = 16
encoder_layers = 4
encoder_heads = 2
decoder_channels = 8
gem_layers = 2
gem_heads = 2
max_frames = 4

[model.astt]
num_blocks = 1
heads = 2
head_dim = 4
"""


@pytest.fixture
def workdir(tmp_path):
    """Working directory holding a scene file and a training config."""
    (tmp_path / "scene.toml").write_text(SCENE)
    (tmp_path / "train.toml").write_text(TRAIN)
    return tmp_path


def _run(workdir, *args):
    return main(["--workdir", str(workdir), "--no-progress", *args])


class TestParser:
    def test_commands(self):
        """Test that every subcommand parses."""
        parser = build_parser()
        for argv in (
            ["gen-data", "--spec", "s.toml", "--out", "d", "--count", "1"],
            ["train", "--config", "t.toml", "--stage", "2"],
            ["eval", "--ckpt", "none", "--data", "d", "--oracle-gt"],
            ["gradcheck", "--module", "tensor"],
            ["ablate-placement", "--config", "t.toml", "--seeds", "0,1"],
        ):
            assert parser.parse_args(argv).command == argv[0]

    def test_metric_list(self):
        """Test that --metrics is split and validated."""
        args = build_parser().parse_args(
            ["eval", "--ckpt", "x", "--data", "d", "--metrics", "absrel, tae"]
        )
        assert args.metrics == ("absrel", "tae")
        with pytest.raises(SystemExit):
            build_parser().parse_args(["eval", "--ckpt", "x", "--data", "d", "--metrics", "rmse"])

    def test_seed_list(self):
        """Test comma-separated seeds."""
        args = build_parser().parse_args(["ablate-placement", "--config", "t", "--seeds", "3,4"])
        assert args.seeds == (3, 4)


class TestCommands:
    """End-to-end runs through main()."""

    def test_gen_data_then_oracle_eval(self, workdir, capsys):
        """Test that generated clips score perfectly against themselves."""
        code = _run(workdir, "gen-data", "--spec", "scene.toml", "--out", "data", "--count", "2")
        assert code == 0
        assert sorted(p.name for p in (workdir / "data").iterdir()) == ["clip_00000", "clip_00001"]
        code = _run(
            workdir,
            "eval",
            "--ckpt",
            "none",
            "--oracle-gt",
            "--data",
            "data",
            "--metrics",
            "absrel,delta1",
            "--report",
            "report.json",
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "clip_00001" in out
        report = json.loads((workdir / "report.json").read_text())
        assert report["mean"]["delta1"] == 1.0
        assert report["checkpoint"] is None

    def test_train_then_eval(self, workdir, capsys):
        """Test a two-step stage-1 run and scoring its checkpoint."""
        _run(workdir, "gen-data", "--spec", "scene.toml", "--out", "data", "--count", "1")
        assert _run(workdir, "train", "--config", "train.toml") == 0
        assert (workdir / "runs" / "cli" / "checkpoints" / "step_000002").is_dir()
        capsys.readouterr()
        code = _run(
            workdir, "eval", "--ckpt", "runs/cli", "--data", "data", "--metrics", "absrel"
        )
        assert code == 0
        assert "Checkpoint stage: 1" in capsys.readouterr().out

    def test_gradcheck_tensor(self, workdir, capsys):
        """Test that the primitive suite passes and reports a summary."""
        assert _run(workdir, "gradcheck", "--module", "tensor") == 0
        assert "checks passed" in capsys.readouterr().out


class TestFailures:
    """Errors become one line on stderr and exit status 1."""

    def test_oracle_needs_flag(self, workdir, capsys):
        """Test that --ckpt none without --oracle-gt is refused."""
        assert _run(workdir, "eval", "--ckpt", "none", "--data", "data") == 1
        assert "--oracle-gt" in capsys.readouterr().err

    def test_missing_data(self, workdir, capsys):
        """Test a missing clip directory."""
        assert _run(workdir, "eval", "--ckpt", "none", "--oracle-gt", "--data", "absent") == 1
        assert capsys.readouterr().err.startswith("error:")

    def test_bad_config(self, workdir, capsys):
        """Test that an invalid config value is reported."""
        (workdir / "bad.toml").write_text("stage = 3\n")
        assert _run(workdir, "train", "--config", "bad.toml") == 1
        assert "stage must be 1 or 2" in capsys.readouterr().err

    def test_stage_two_without_init(self, workdir, capsys):
        """Test that stage 2 needs a checkpoint to start from."""
        _run(workdir, "gen-data", "--spec", "scene.toml", "--out", "data", "--count", "1")
        assert _run(workdir, "train", "--config", "train.toml", "--stage", "2") == 1
        assert "stage-1 checkpoint" in capsys.readouterr().err

    def test_unknown_log_level(self, workdir):
        """Test that a bad --log-level exits through argparse."""
        with pytest.raises(SystemExit):
            main(["--log-level", "chatty", "gradcheck", "--module", "tensor"])
