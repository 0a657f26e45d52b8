"""Tests for parameter records and checkpoints."""

import io

import numpy as np
import pytest

from guided_attention import tensor as T
from guided_attention.config import RunConfig
from guided_attention.errors import DataError
from guided_attention.model import GuidedAttentionModel
from guided_attention.serialization import (
    MAGIC,
    load_checkpoint,
    read_checkpoint,
    read_params,
    read_record,
    save_checkpoint,
    write_params,
    write_record,
)
from guided_attention.synth import render
from guided_attention.tokens import Vocabulary


@pytest.fixture
def run_cfg(tiny_encoder_cfg, tiny_decoder_cfg) -> RunConfig:
    return RunConfig(encoder=tiny_encoder_cfg, decoder=tiny_decoder_cfg, seed=3)


@pytest.fixture
def model(run_cfg) -> GuidedAttentionModel:
    return GuidedAttentionModel(Vocabulary(), run_cfg.encoder, run_cfg.decoder, seed=run_cfg.seed)


class TestRecords:
    """Test the binary record layout."""

    def test_layout(self):
        buffer = io.BytesIO()
        write_record(buffer, "w", np.array([[1.0, 2.0]]))
        raw = buffer.getvalue()
        assert len(raw) == 8 + 1 + 8 + 2 * 8 + 2 * 8
        assert raw[:8] == (1).to_bytes(8, "little")
        buffer.seek(0)
        name, array = read_record(buffer)
        assert name == "w"
        np.testing.assert_array_equal(array, [[1.0, 2.0]])

    def test_scalar_record(self):
        buffer = io.BytesIO()
        write_params(buffer, {"s": np.array(4.5), "v": np.arange(3.0)})
        buffer.seek(0)
        params = read_params(buffer)
        assert params["s"].shape == ()
        assert float(params["s"]) == 4.5
        assert list(params) == ["s", "v"]

    def test_truncated_record(self):
        buffer = io.BytesIO()
        write_record(buffer, "w", np.ones((3, 3)))
        with pytest.raises(DataError, match="Truncated"):
            read_record(io.BytesIO(buffer.getvalue()[:-4]))


class TestCheckpoint:
    """Test saving and restoring whole models."""

    def test_restored_model_decodes_identically(self, tmp_path, model, run_cfg):
        """Test that a reloaded model has the same weights and decodes the same way."""
        image = render("x + 1", seed=0)
        model.eval()
        before = model.recognize(image).tokens
        path = save_checkpoint(tmp_path / "model.ckpt", model, run_cfg, epoch=2)
        restored, cfg = load_checkpoint(path)
        assert cfg == run_cfg
        assert restored.recognize(image).tokens == before
        for name, array in model.state_dict().items():
            np.testing.assert_array_equal(restored.state_dict()[name], array)

    def test_header(self, tmp_path, model, run_cfg):
        path = save_checkpoint(tmp_path / "model.ckpt", model, run_cfg, epoch=2, val_exprate=None)
        header, state = read_checkpoint(path)
        assert header["epoch"] == 2
        assert header["parameter_count"] == model.num_parameters()
        assert header["vocabulary"][:3] == ["0", "1", "2"]
        assert set(state) == set(model.state_dict())

    def test_batch_norm_statistics_are_saved(self, tmp_path, model, run_cfg):
        state = model.state_dict()
        running = [name for name in state if "running" in name]
        assert running
        state[running[0]][...] = 0.25
        restored, _ = load_checkpoint(save_checkpoint(tmp_path / "m.ckpt", model, run_cfg))
        np.testing.assert_array_equal(restored.state_dict()[running[0]], 0.25)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"NOTACKPT" + bytes(16))
        with pytest.raises(DataError, match="not a checkpoint"):
            read_checkpoint(path)

    def test_wrong_version(self, tmp_path):
        header = b"format_version: 99\n"
        path = tmp_path / "x.ckpt"
        path.write_bytes(MAGIC + len(header).to_bytes(8, "little") + header + bytes(8))
        with pytest.raises(DataError, match="version"):
            read_checkpoint(path)

    def test_truncated_file(self, tmp_path, model, run_cfg):
        path = save_checkpoint(tmp_path / "m.ckpt", model, run_cfg)
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(DataError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "none.ckpt")

    def test_float32_run(self, tmp_path, tiny_encoder_cfg, tiny_decoder_cfg):
        """Test that loading a float32 checkpoint switches precision."""
        cfg = RunConfig(encoder=tiny_encoder_cfg, decoder=tiny_decoder_cfg, precision="float32")
        model = GuidedAttentionModel(Vocabulary(), cfg.encoder, cfg.decoder)
        restored, _ = load_checkpoint(save_checkpoint(tmp_path / "m.ckpt", model, cfg))
        assert T.get_default_dtype() == np.float32
        assert restored.features(render("1", seed=0)).features.dtype == np.float32
