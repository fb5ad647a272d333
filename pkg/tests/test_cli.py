"""Command-line behavior: exit codes, outputs, and override precedence."""

from __future__ import annotations

import json

import numpy as np
import pytest

from piareid import cli, pnm
from piareid.cli import (
    EXIT_CHECK_FAILURE,
    EXIT_CONFIG_ERROR,
    EXIT_IO_ERROR,
    EXIT_OK,
    main,
)

TINY_DATA = [
    "--n-identities", "4",
    "--images-per-identity-per-modality", "2",
    "--image-height", "16",
    "--image-width", "8",
    "--seed", "9",
]
TINY_NET = [
    "--widths", "4,4",
    "--strides", "2,1",
    "--attention-kernel-size", "3",
]
TINY_TRAIN = TINY_DATA + TINY_NET + [
    "--epochs", "2",
    "--stage2-start", "1",
    "--ids-per-batch", "2",
    "--instances-per-modality", "1",
    "--eval-every", "0",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One generated dataset and trained checkpoint shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    run = root / "run"
    assert main(["gen-data", "--out", str(data)] + TINY_DATA) == EXIT_OK
    assert (
        main(["train", "--data-dir", str(data), "--out", str(run)] + TINY_TRAIN)
        == EXIT_OK
    )
    return root


class TestGenData:
    def test_writes_dataset_and_summary(self, tmp_path, capsys):
        rc = main(["gen-data", "--out", str(tmp_path / "d")] + TINY_DATA)
        out = capsys.readouterr().out
        assert rc == EXIT_OK
        assert "rows: 16" in out
        assert "fingerprint:" in out
        assert (tmp_path / "d" / "manifest.csv").is_file()
        assert (tmp_path / "d" / "run_config.txt").is_file()

    def test_invalid_generation_config(self, tmp_path, capsys):
        rc = main(["gen-data", "--out", str(tmp_path / "d"), "--n-identities", "1"])
        assert rc == EXIT_CONFIG_ERROR
        assert "error:" in capsys.readouterr().err

    def test_refuses_nonempty_output(self, tmp_path, capsys):
        target = tmp_path / "d"
        assert main(["gen-data", "--out", str(target)] + TINY_DATA) == EXIT_OK
        rc = main(["gen-data", "--out", str(target)] + TINY_DATA)
        assert rc == EXIT_IO_ERROR


class TestTrain:
    def test_writes_outputs(self, workspace):
        run = workspace / "run"
        assert (run / "checkpoint.bin").is_file()
        assert (run / "train_log.jsonl").is_file()
        assert (run / "run_config.txt").is_file()

    def test_resolved_config_reflects_overrides(self, workspace):
        text = (workspace / "run" / "run_config.txt").read_text()
        assert "epochs = 2\n" in text
        assert "stage2_start_epoch = 1\n" in text
        assert "widths = 4,4\n" in text

    def test_log_is_jsonl(self, workspace):
        lines = (workspace / "run" / "train_log.jsonl").read_text().splitlines()
        assert len(lines) == 2
        record = json.loads(lines[0])
        assert record["epoch"] == 0 and record["stage"] == 1

    def test_ablation_preset_applies(self, workspace, tmp_path, capsys):
        run = tmp_path / "base_run"
        rc = main([
            "train", "--data-dir", str(workspace / "data"),
            "--out", str(run), "--ablation", "base",
        ] + TINY_TRAIN)
        assert rc == EXIT_OK
        text = (run / "run_config.txt").read_text()
        assert "use_dbdl = false\n" in text
        assert "use_inter = false\n" in text

    def test_missing_dataset(self, tmp_path, capsys):
        rc = main([
            "train", "--data-dir", str(tmp_path / "nope"), "--out", str(tmp_path / "r"),
        ] + TINY_TRAIN)
        assert rc == EXIT_IO_ERROR

    def test_bad_override_value(self, tmp_path, capsys):
        rc = main([
            "train", "--data-dir", str(tmp_path), "--out", str(tmp_path / "r"),
            "--epochs", "soon",
        ])
        assert rc == EXIT_CONFIG_ERROR

    def test_invalid_architecture_is_config_error(self, workspace, tmp_path, capsys):
        # a final stride other than 1 breaks mask resolution and must be
        # rejected up front, not crash mid-run
        rc = main([
            "train", "--data-dir", str(workspace / "data"),
            "--out", str(tmp_path / "r"),
            "--widths", "4,4", "--strides", "2,2",
        ] + TINY_DATA)
        assert rc == EXIT_CONFIG_ERROR
        assert "stride" in capsys.readouterr().err


class TestEval:
    def test_reports_both_directions(self, workspace, tmp_path, capsys):
        out = tmp_path / "eval"
        rc = main([
            "eval",
            "--config", str(workspace / "run" / "run_config.txt"),
            "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
            "--data-dir", str(workspace / "data"),
            "--out", str(out),
            "--direction", "both",
        ])
        assert rc == EXIT_OK
        printed = capsys.readouterr().out
        assert '"direction": "v2i"' in printed
        assert '"direction": "i2v"' in printed
        for name in ("eval_v2i.json", "eval_i2v.json"):
            report = json.loads((out / name).read_text())
            assert 0.0 <= report["rank1"] <= 1.0
            assert 0.0 <= report["mean_ap"] <= 1.0
            assert report["num_query"] > 0

    def test_single_direction(self, workspace, tmp_path, capsys):
        out = tmp_path / "eval"
        rc = main([
            "eval",
            "--config", str(workspace / "run" / "run_config.txt"),
            "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
            "--data-dir", str(workspace / "data"),
            "--out", str(out),
            "--direction", "v2i",
        ])
        assert rc == EXIT_OK
        assert (out / "eval_v2i.json").is_file()
        assert not (out / "eval_i2v.json").exists()

    def test_missing_checkpoint_flag(self, workspace, tmp_path, capsys):
        rc = main([
            "eval",
            "--config", str(workspace / "run" / "run_config.txt"),
            "--data-dir", str(workspace / "data"),
            "--out", str(tmp_path / "e"),
        ])
        assert rc == EXIT_CONFIG_ERROR

    def test_corrupt_checkpoint(self, workspace, tmp_path, capsys):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"not a checkpoint")
        rc = main([
            "eval",
            "--config", str(workspace / "run" / "run_config.txt"),
            "--checkpoint", str(bad),
            "--data-dir", str(workspace / "data"),
            "--out", str(tmp_path / "e"),
        ])
        assert rc == EXIT_IO_ERROR

    def test_untrained_model_scores_chance_level(self, tmp_path, capsys):
        # a 12-identity set splits 8 train / 4 test, so random features
        # should land near rank1 = 1/4 on the test identities
        data = tmp_path / "data"
        run = tmp_path / "run"
        args = [
            "--n-identities", "12",
            "--images-per-identity-per-modality", "2",
            "--image-height", "16",
            "--image-width", "8",
            "--seed", "0",
        ]
        assert main(["gen-data", "--out", str(data)] + args) == EXIT_OK
        rc = main([
            "train", "--data-dir", str(data), "--out", str(run),
            "--epochs", "1", "--stage2-start", "1",
            "--ids-per-batch", "2", "--instances-per-modality", "1",
            "--base-lr", "1e-12", "--eval-every", "0",
        ] + args + TINY_NET)
        assert rc == EXIT_OK
        capsys.readouterr()
        rc = main([
            "eval",
            "--config", str(run / "run_config.txt"),
            "--checkpoint", str(run / "checkpoint.bin"),
            "--data-dir", str(data),
            "--out", str(tmp_path / "e"),
            "--direction", "v2i",
        ])
        assert rc == EXIT_OK
        report = json.loads(capsys.readouterr().out)
        assert abs(report["rank1"] - 0.25) <= 0.15


class TestGradcheck:
    def test_single_op_passes(self, capsys):
        rc = main(["gradcheck", "--only", "relu", "--configs", "2"])
        out = capsys.readouterr().out
        assert rc == EXIT_OK
        assert "relu" in out and "PASS" in out

    def test_unknown_name(self, capsys):
        rc = main(["gradcheck", "--only", "no_such_op"])
        assert rc == EXIT_CONFIG_ERROR
        assert "unknown check" in capsys.readouterr().err


class TestDumpAttention:
    def test_writes_masks(self, workspace, tmp_path, capsys):
        sample = workspace / "data" / "images" / "V" / "0000" / "000.ppm"
        out = tmp_path / "attn"
        rc = main([
            "dump-attention",
            "--config", str(workspace / "run" / "run_config.txt"),
            "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
            "--out", str(out),
            "--sample", str(sample),
        ])
        assert rc == EXIT_OK
        clothing = pnm.read_pgm(out / "m_c.pgm")
        identity = pnm.read_pgm(out / "m_id.pgm")
        assert clothing.shape == identity.shape
        assert clothing.dtype == np.uint8

    def test_requires_dual_branch_checkpoint(self, workspace, tmp_path, capsys):
        data = workspace / "data"
        run = tmp_path / "base_run"
        rc = main([
            "train", "--data-dir", str(data), "--out", str(run),
            "--ablation", "base",
        ] + TINY_TRAIN)
        assert rc == EXIT_OK
        rc = main([
            "dump-attention",
            "--config", str(run / "run_config.txt"),
            "--checkpoint", str(run / "checkpoint.bin"),
            "--out", str(tmp_path / "attn"),
            "--sample", str(data / "images" / "V" / "0000" / "000.ppm"),
        ])
        assert rc == EXIT_CONFIG_ERROR

    def test_missing_sample(self, workspace, tmp_path, capsys):
        rc = main([
            "dump-attention",
            "--config", str(workspace / "run" / "run_config.txt"),
            "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
            "--out", str(tmp_path / "attn"),
            "--sample", str(tmp_path / "missing.ppm"),
        ])
        assert rc == EXIT_IO_ERROR


class TestConfigPrecedence:
    def test_cli_beats_file(self, tmp_path, capsys):
        config = tmp_path / "cfg.txt"
        config.write_text("n_identities = 6\nseed = 1\n")
        rc = main([
            "gen-data", "--config", str(config), "--out", str(tmp_path / "d"),
            "--n-identities", "4",
            "--images-per-identity-per-modality", "2",
            "--image-height", "16", "--image-width", "8",
        ])
        assert rc == EXIT_OK
        resolved = (tmp_path / "d" / "run_config.txt").read_text()
        assert "n_identities = 4\n" in resolved
        assert "seed = 1\n" in resolved

    def test_missing_config_file(self, tmp_path, capsys):
        rc = main(["gen-data", "--config", str(tmp_path / "nope.txt"),
                   "--out", str(tmp_path / "d")])
        assert rc == EXIT_IO_ERROR

    def test_config_file_syntax_error(self, tmp_path, capsys):
        config = tmp_path / "cfg.txt"
        config.write_text("this is not a pair\n")
        rc = main(["gen-data", "--config", str(config), "--out", str(tmp_path / "d")])
        assert rc == EXIT_CONFIG_ERROR
