"""Tests for the guided-attn command line."""

from unittest.mock import patch

import pytest
import yaml

from guided_attention.cli import build_parser, grid_configs, main
from guided_attention.attention import FusionOrder
from guided_attention.decoder import DecoderConfig
from guided_attention.errors import NumericError
from guided_attention.metrics import read_manifest, write_predictions

TINY_CONFIG = """\
epochs: 1
seed: 3
encoder:
  num_blocks: 3
  layers_per_block: 1
  growth_rate: 4
  dropout: 0.0
  out_dim: 16
decoder:
  num_layers: 3
  d_model: 16
  d_ff: 32
  heads: 2
  dropout: 0.0
  phi_kernel: 3
  phi_channels: 4
  max_len: 8
data:
  batch_size: 2
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY_CONFIG, encoding="utf-8")
    return path


@pytest.fixture
def corpus(tmp_path):
    out = tmp_path / "data"
    assert main(["gen", "--out", str(out), "--train", "4", "--val", "2", "--test", "3", "--stress", "2", "--seed", "3"]) == 0
    return out


@pytest.fixture
def checkpoint(tmp_path, corpus, tiny_config):
    path = tmp_path / "model.ckpt"
    assert main(["-q", "train", "--config", str(tiny_config), "--data", str(corpus), "--out", str(path)]) == 0
    return path


class TestGen:
    """Test corpus generation."""

    def test_deterministic(self, tmp_path, capsys):
        args = ["--train", "2", "--val", "1", "--test", "1", "--stress", "1", "--seed", "9"]
        assert main(["gen", "--out", str(tmp_path / "a"), *args]) == 0
        assert main(["gen", "--out", str(tmp_path / "b"), *args]) == 0
        for name in ("train/manifest.txt", "train/train_00001.pgm", "stress/stress_00000.pgm"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert "seed 9" in capsys.readouterr().out

    def test_zero_samples(self, tmp_path):
        out = tmp_path / "empty"
        assert main(["gen", "--out", str(out), "--train", "0", "--val", "0", "--test", "0", "--stress", "0"]) == 0
        assert read_manifest(out / "train" / "manifest.txt") == {}

    def test_seed_from_environment(self, tmp_path, capsys):
        with patch.dict("os.environ", {"GUIDED_ATTN_SEED": "21"}):
            main(["gen", "--out", str(tmp_path), "--train", "0", "--val", "0", "--test", "0", "--stress", "0"])
        assert "seed 21" in capsys.readouterr().out


class TestExitCodes:
    """Test error reporting."""

    def test_bad_arguments(self):
        assert main(["gen"]) == 1
        assert main(["unknown"]) == 1

    def test_missing_data(self, tmp_path, tiny_config, capsys):
        code = main(["train", "--config", str(tiny_config), "--data", str(tmp_path / "none"), "--out", str(tmp_path / "m")])
        assert code == 2
        assert "DataError" in capsys.readouterr().err

    def test_invalid_config(self, tmp_path, corpus):
        path = tmp_path / "bad.yaml"
        path.write_text("decoder:\n  heads: 3\n", encoding="utf-8")
        assert main(["train", "--config", str(path), "--data", str(corpus), "--out", str(tmp_path / "m")]) == 1

    def test_missing_checkpoint(self, tmp_path, corpus):
        assert main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--data", str(corpus)]) == 2

    def test_numeric_failure(self, tmp_path, corpus, tiny_config):
        with patch("guided_attention.cli.train", side_effect=NumericError("Loss became nan in epoch 1.")):
            code = main(["train", "--config", str(tiny_config), "--data", str(corpus), "--out", str(tmp_path / "m")])
        assert code == 3

    def test_os_error_is_a_one_line_diagnostic(self, tmp_path, capsys):
        target = tmp_path / "taken"
        target.write_text("", encoding="utf-8")
        code = main(["gen", "--out", str(target), "--train", "1", "--val", "0", "--test", "0", "--stress", "0"])
        assert code == 2
        err = capsys.readouterr().err
        assert err.startswith("✗ InputError:")
        assert "Traceback" not in err


class TestScore:
    """Test scoring a predictions manifest."""

    def test_scores_and_writes_report(self, tmp_path, capsys):
        ref = write_predictions(tmp_path / "ref.txt", {"a": ["x", "^", "{", "2", "}"], "b": ["1", "+", "2"]})
        pred = write_predictions(tmp_path / "pred.txt", {"a": ["y", "^", "{", "2", "}"], "b": ["1", "+"]})
        report = tmp_path / "score.yaml"
        assert main(["score", "--pred", str(pred), "--ref", str(ref), "--report", str(report)]) == 0
        body = yaml.safe_load(report.read_text(encoding="utf-8"))
        assert body["metrics"]["count"] == 2
        assert body["metrics"]["exprate"] == 0.0
        assert body["metrics"]["exprate_le1"] == 100.0
        assert body["metrics"]["strurate"] == 50.0
        assert "Scored 2 references" in capsys.readouterr().out

    def test_counts_malformed_predictions(self, tmp_path, capsys):
        ref = write_predictions(tmp_path / "ref.txt", {"a": ["x", "^", "{", "2", "}"]})
        pred = write_predictions(tmp_path / "pred.txt", {"a": ["x", "^"]})
        assert main(["score", "--pred", str(pred), "--ref", str(ref)]) == 0
        assert "1 predictions do not parse" in capsys.readouterr().out

    def test_missing_reference(self, tmp_path):
        pred = write_predictions(tmp_path / "pred.txt", {"a": ["1"]})
        assert main(["score", "--pred", str(pred), "--ref", str(tmp_path / "none.txt")]) == 2


class TestGrid:
    """Test evaluation grids."""

    def test_table1(self):
        rows = grid_configs(DecoderConfig(), "table1")
        assert [r["label"] for r in rows] == [
            {"self": False, "neighbor": False},
            {"self": False, "neighbor": True},
            {"self": True, "neighbor": False},
            {"self": True, "neighbor": True},
        ]
        assert not rows[0]["cfg"].self_active(2) and not rows[0]["cfg"].neighbor_active(2)
        assert rows[3]["cfg"].fusion_order is FusionOrder.NEIGHBOR_FIRST
        assert all(r["cfg"].fusion_order is FusionOrder.SELF_FIRST for r in rows[:3])

    def test_table2(self):
        rows = grid_configs(DecoderConfig(), "table2")
        assert len(rows) == 6
        assert {r["label"]["alpha"] for r in rows} == {1.0, 2.5, 5.0}

    def test_parser_defaults(self):
        args = build_parser().parse_args(["eval", "--ckpt", "m", "--data", "d"])
        assert (args.split, args.beam, args.grid) == ("test", 1, "none")


@pytest.mark.slow
class TestEndToEnd:
    """Train a tiny model and drive every subcommand."""

    def test_eval_table1_report(self, tmp_path, checkpoint, corpus):
        report = tmp_path / "table1.yaml"
        args = ["eval", "--ckpt", str(checkpoint), "--data", str(corpus), "--grid", "table1", "--report", str(report)]
        assert main(args) == 0
        body = yaml.safe_load(report.read_text(encoding="utf-8"))
        assert body["grid"] == "table1"
        assert len(body["rows"]) == 4
        assert all(row["count"] == 3 for row in body["rows"])

    def test_zero_alpha_equals_neighbor_off(self, tmp_path, checkpoint, corpus):
        common = ["eval", "--ckpt", str(checkpoint), "--data", str(corpus), "--split", "stress", "--beam", "2"]
        assert main([*common, "--alpha", "0", "--predictions", str(tmp_path / "a.txt")]) == 0
        assert main([*common, "--neighbor", "off", "--predictions", str(tmp_path / "b.txt")]) == 0
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    def test_negative_alpha_warns_and_runs(self, checkpoint, corpus, capsys):
        args = ["eval", "--ckpt", str(checkpoint), "--data", str(corpus), "--alpha", "-1", "--limit", "2"]
        assert main(args) == 0
        captured = capsys.readouterr()
        assert "outside the tested range" in captured.err
        assert "ExpRate" in captured.out

    def test_predictions_round_trip_through_score(self, tmp_path, checkpoint, corpus, capsys):
        preds = tmp_path / "preds.txt"
        report = tmp_path / "eval.yaml"
        common = ["--ckpt", str(checkpoint), "--data", str(corpus)]
        assert main(["eval", *common, "--predictions", str(preds), "--report", str(report)]) == 0
        scored = tmp_path / "score.yaml"
        assert main(["score", "--pred", str(preds), "--ref", str(corpus / "test" / "manifest.txt"), "--report", str(scored)]) == 0
        row = yaml.safe_load(report.read_text(encoding="utf-8"))["rows"][0]
        metrics = yaml.safe_load(scored.read_text(encoding="utf-8"))["metrics"]
        assert metrics == {k: row[k] for k in metrics}

    def test_dump_attention(self, tmp_path, checkpoint, corpus, capsys):
        out = tmp_path / "maps"
        image = corpus / "test" / "test_00000.pgm"
        assert main(["dump-attention", "--ckpt", str(checkpoint), "--image", str(image), "--out", str(out)]) == 0
        assert (out / "trace.json").is_file()
        assert list(out.glob("step000_layer1_head*.pgm"))
        assert "Decoded:" in capsys.readouterr().out

    def test_float32_training(self, tmp_path, corpus, tiny_config):
        path = tmp_path / "f32.ckpt"
        assert main(["-q", "train", "--config", str(tiny_config), "--data", str(corpus), "--out", str(path), "--precision", "float32"]) == 0
        assert main(["eval", "--ckpt", str(path), "--data", str(corpus), "--limit", "2"]) == 0
