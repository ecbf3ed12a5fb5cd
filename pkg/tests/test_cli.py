"""End-to-end command-line flows at tiny scale, run in process."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from maskmotion import cli, data

from conftest import TINY_CONFIG


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Config file, generated dataset, and one finished training run."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "tiny.json"
    cfg_path.write_text(json.dumps(TINY_CONFIG))
    ds = root / "ds"
    rc = cli.main(["gen-data", "--config", str(cfg_path), "--out", str(ds)])
    assert rc == 0
    run = root / "run"
    rc = cli.main(["train", "--config", str(cfg_path), "--data", str(ds), "--out", str(run)])
    assert rc == 0
    return {"root": root, "cfg": cfg_path, "ds": ds, "run": run}


def args_with(workspace, command, *extra):
    return [command, "--config", str(workspace["cfg"]), *extra]


class TestGenData:
    def test_dataset_layout_and_echo(self, workspace):
        ds = workspace["ds"]
        assert (ds / "train" / "manifest.json").exists()
        assert (ds / "val" / "manifest.json").exists()
        echoed = json.loads((ds / "config.json").read_text())
        assert echoed["world"]["train_scenes"] == TINY_CONFIG["world"]["train_scenes"]

    def test_refuses_to_overwrite(self, workspace, capsys):
        rc = cli.main(args_with(workspace, "gen-data", "--out", str(workspace["ds"])))
        assert rc == 1
        assert "already holds" in capsys.readouterr().err
        # The refusal must not brand the existing dataset as failed.
        assert not (workspace["ds"] / "failed.marker").exists()

    def test_force_regenerates(self, workspace, tmp_path):
        out = tmp_path / "ds2"
        assert cli.main(args_with(workspace, "gen-data", "--out", str(out))) == 0
        before = (out / "train" / "sample_00000" / "video.rgb24").read_bytes()
        assert cli.main(args_with(workspace, "gen-data", "--out", str(out), "--force")) == 0
        assert (out / "train" / "sample_00000" / "video.rgb24").read_bytes() == before

    def test_seed_env_override(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setenv("COMOGEN_SEED", "123")
        out = tmp_path / "ds_seeded"
        assert cli.main(args_with(workspace, "gen-data", "--out", str(out))) == 0
        echoed = json.loads((out / "config.json").read_text())
        assert echoed["seed"] == 123
        assert echoed["world"]["seed"] == 123

    def test_seed_env_invalid(self, workspace, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("COMOGEN_SEED", "abc")
        rc = cli.main(args_with(workspace, "gen-data", "--out", str(tmp_path / "x")))
        assert rc == 1
        assert "COMOGEN_SEED" in capsys.readouterr().err


class TestTrain:
    def test_artifacts(self, workspace):
        run = workspace["run"]
        report = json.loads((run / "report.json").read_text())
        assert report["final_val_loss"] < report["init_val_loss"]
        for name in ("base", "stage1", "final"):
            assert (run / "checkpoints" / name / "manifest.json").exists()
        assert (run / "ranking.json").exists()
        assert (run / "loss.csv").exists()
        assert (run / "config.json").exists()

    def test_missing_dataset_leaves_marker(self, workspace, tmp_path, capsys):
        out = tmp_path / "broken"
        rc = cli.main(
            args_with(workspace, "train", "--data", str(tmp_path / "nowhere"), "--out", str(out))
        )
        assert rc == 1
        assert (out / "failed.marker").exists()


class TestRankLayers:
    def test_writes_ranking(self, workspace, tmp_path, capsys):
        out = tmp_path / "ranking"
        rc = cli.main(
            args_with(
                workspace,
                "rank-layers",
                "--ckpt", str(workspace["run"] / "checkpoints" / "base"),
                "--data", str(workspace["ds"]),
                "--out", str(out),
            )
        )
        assert rc == 0
        ranking = json.loads((out / "ranking.json").read_text())
        assert len(ranking["scores"]) == TINY_CONFIG["model"]["depth"]
        assert ranking["selected"]
        assert "layer" in capsys.readouterr().out

    def test_matches_training_ranking(self, workspace, tmp_path):
        out = tmp_path / "ranking2"
        cli.main(
            args_with(
                workspace,
                "rank-layers",
                "--ckpt", str(workspace["run"] / "checkpoints" / "base"),
                "--data", str(workspace["ds"]),
                "--out", str(out),
            )
        )
        standalone = json.loads((out / "ranking.json").read_text())
        from_train = json.loads((workspace["run"] / "ranking.json").read_text())
        assert standalone == from_train


class TestSkipAblate:
    def test_full_flow(self, workspace, tmp_path):
        out = tmp_path / "skips"
        rc = cli.main(
            args_with(
                workspace,
                "skip-ablate",
                "--ckpt", str(workspace["run"] / "checkpoints" / "final"),
                "--ranking", str(workspace["run"] / "ranking.json"),
                "--data", str(workspace["ds"]),
                "--out", str(out),
            )
        )
        assert rc == 0
        result = json.loads((out / "ablation.json").read_text())
        assert set(result["aggregate"]) == {"skip_motion", "skip_other"}
        assert "skip_motion" in (out / "table.txt").read_text()
        videos = list((out / "videos").rglob("video.rgb24"))
        assert videos

    def test_unconditioned_checkpoint_rejected(self, workspace, tmp_path, capsys):
        out = tmp_path / "skips_bad"
        rc = cli.main(
            args_with(
                workspace,
                "skip-ablate",
                "--ckpt", str(workspace["run"] / "checkpoints" / "base"),
                "--ranking", str(workspace["run"] / "ranking.json"),
                "--data", str(workspace["ds"]),
                "--out", str(out),
            )
        )
        assert rc == 1
        assert "adapter" in capsys.readouterr().err
        assert "adapter" in (out / "failed.marker").read_text()


class TestSample:
    def test_from_dataset_sample_and_gray8(self, workspace, tmp_path):
        ref = workspace["ds"] / "val" / "sample_00000"
        out = tmp_path / "gen"
        rc = cli.main(
            args_with(
                workspace,
                "sample",
                "--ckpt", str(workspace["run"] / "checkpoints" / "final"),
                "--first-frame", str(ref),
                "--mask", str(ref / "mask.gray8"),
                "--steps", "4",
                "--out", str(out),
            )
        )
        assert rc == 0
        run = json.loads((out / "run.json").read_text())
        assert run["steps"] == 4 and run["schedule"] == "cosine"
        video = data.read_rgb24(out / "video.rgb24", run["T"], run["H"], run["W"])
        assert video.shape == (8, 32, 32, 3)
        assert (out / "mask_used.gray8").exists()

    def test_transform_mask_and_skip(self, workspace, tmp_path):
        ref = workspace["ds"] / "val" / "sample_00000"
        frames = TINY_CONFIG["world"]["frames"]
        spec = tmp_path / "moves.json"
        spec.write_text(json.dumps([{"dx": i, "dy": 0} for i in range(frames)]))
        out = tmp_path / "gen_transform"
        rc = cli.main(
            args_with(
                workspace,
                "sample",
                "--ckpt", str(workspace["run"] / "checkpoints" / "final"),
                "--first-frame", str(ref),
                "--mask", str(spec),
                "--steps", "4",
                "--skip", "0,2",
                "--no-cosine",
                "--out", str(out),
            )
        )
        assert rc == 0
        run = json.loads((out / "run.json").read_text())
        assert run["skip_layers"] == [0, 2] and run["schedule"] == "constant"

    def test_wrong_transform_count(self, workspace, tmp_path, capsys):
        ref = workspace["ds"] / "val" / "sample_00000"
        spec = tmp_path / "short.json"
        spec.write_text(json.dumps([{"dx": 1}]))
        rc = cli.main(
            args_with(
                workspace,
                "sample",
                "--ckpt", str(workspace["run"] / "checkpoints" / "final"),
                "--first-frame", str(ref),
                "--mask", str(spec),
                "--out", str(tmp_path / "gen_bad"),
            )
        )
        assert rc == 1
        assert "transforms" in capsys.readouterr().err


class TestEval:
    def test_scores_generated_directory(self, workspace, tmp_path):
        gen_root = tmp_path / "gen"
        for name in ("sample_00000", "sample_00001"):
            ref = workspace["ds"] / "val" / name
            rc = cli.main(
                args_with(
                    workspace,
                    "sample",
                    "--ckpt", str(workspace["run"] / "checkpoints" / "final"),
                    "--first-frame", str(ref),
                    "--mask", str(ref / "mask.gray8"),
                    "--steps", "4",
                    "--out", str(gen_root / name),
                )
            )
            assert rc == 0
        out = tmp_path / "scores"
        rc = cli.main(
            args_with(
                workspace,
                "eval",
                "--gen", str(gen_root),
                "--ref", str(workspace["ds"] / "val"),
                "--out", str(out),
            )
        )
        assert rc == 0
        report = json.loads((out / "metrics.json").read_text())
        assert set(report["per_sample"]) == {"sample_00000", "sample_00001"}
        for row in report["per_sample"].values():
            for key in ("psnr", "ssim", "J", "F", "JF", "mask_iou"):
                assert np.isfinite(row[key])
        assert "mean" in (out / "metrics.txt").read_text()

    def test_empty_gen_dir_fails(self, workspace, tmp_path, capsys):
        empty = tmp_path / "none"
        empty.mkdir()
        rc = cli.main(
            args_with(
                workspace,
                "eval",
                "--gen", str(empty),
                "--ref", str(workspace["ds"] / "val"),
                "--out", str(tmp_path / "scores_none"),
            )
        )
        assert rc == 1
        assert "run.json" in capsys.readouterr().err


class TestAblate:
    def test_three_rows(self, workspace, tmp_path):
        out = tmp_path / "rows"
        rc = cli.main(
            args_with(workspace, "ablate", "--data", str(workspace["ds"]), "--out", str(out))
        )
        assert rc == 0
        report = json.loads((out / "rows.json").read_text())
        assert set(report["rows"]) == {"full", "constant_injection", "lora_lowest"}
        table = (out / "table.txt").read_text()
        for name in ("full", "constant_injection", "lora_lowest"):
            assert name in table
