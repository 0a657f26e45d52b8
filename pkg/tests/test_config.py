"""Tests for run configuration loading, overrides and seed resolution."""

from pathlib import Path
from unittest.mock import patch

import pytest

from guided_attention.attention import FusionOrder
from guided_attention.config import (
    DEFAULT_SEED,
    SEED_ENV,
    OptimizerConfig,
    RunConfig,
    config_from_dict,
    load_config,
    resolve_seed,
    with_overrides,
)
from guided_attention.errors import ConfigError, DataError

DESK_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "desk.yaml"


class TestLoadConfig:
    """Test YAML configuration files."""

    def test_defaults(self):
        cfg = load_config(None)
        assert cfg == RunConfig()
        assert cfg.decoder.alpha == 2.5
        assert cfg.decoder.fusion_order is FusionOrder.SELF_FIRST

    def test_shipped_desk_config(self):
        """Test that the scaled-down configuration loads and is consistent."""
        cfg = load_config(DESK_CONFIG)
        assert cfg.precision == "float32"
        assert cfg.encoder.out_dim == cfg.decoder.d_model == 64
        assert cfg.data.val_limit == 100

    def test_guidance_section(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text(
            "guidance:\n  neighbor: false\n  order: neighbor-first\n  alpha: 1.0\n  self_layers: [3]\n",
            encoding="utf-8",
        )
        decoder = load_config(path).decoder
        assert not decoder.neighbor_guide
        assert decoder.fusion_order is FusionOrder.NEIGHBOR_FIRST
        assert decoder.alpha == 1.0
        assert decoder.self_guide_layers == (3,)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_config(tmp_path / "absent.yaml")

    def test_unparsable_file(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("encoder: [unclosed\n", encoding="utf-8")
        with pytest.raises(DataError, match="Failed to parse"):
            load_config(path)

    def test_document_must_be_mapping(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(path)


class TestConfigFromDict:
    """Test validation of nested mappings."""

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="schedule"):
            config_from_dict({"schedule": {}})

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="growth"):
            config_from_dict({"encoder": {"growth": 12}})

    def test_unknown_guidance_key(self):
        with pytest.raises(ConfigError):
            config_from_dict({"guidance": {"beta": 1.0}})

    def test_dimension_mismatch(self):
        """Test that encoder.out_dim must equal decoder.d_model."""
        with pytest.raises(ConfigError, match="out_dim"):
            config_from_dict({"encoder": {"out_dim": 32}})

    def test_invalid_precision(self):
        with pytest.raises(ConfigError):
            config_from_dict({"precision": "float16"})

    def test_round_trip_through_plain_data(self):
        """Test that to_dict output rebuilds the same configuration."""
        cfg = config_from_dict({"guidance": {"order": "neighbor-first"}, "seed": 3})
        assert config_from_dict(cfg.to_dict()) == cfg

    def test_optimizer_validation(self):
        with pytest.raises(ConfigError):
            OptimizerConfig(momentum=1.0)


class TestOverrides:
    """Test dotted flag overrides."""

    def test_nested_and_scalar(self):
        cfg = with_overrides(RunConfig(), optimizer__lr=0.01, epochs=2, decoder__alpha=None)
        assert cfg.optimizer.lr == 0.01
        assert cfg.epochs == 2
        assert cfg.decoder.alpha == 2.5

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            with_overrides(RunConfig(), **{"optimizer.beta": 0.1})

    def test_unknown_section(self):
        with pytest.raises(ConfigError):
            with_overrides(RunConfig(), schedule__warmup=3)


class TestResolveSeed:
    """Test seed precedence: flag, then environment, then default."""

    def test_flag_wins(self):
        with patch.dict("os.environ", {SEED_ENV: "99"}):
            assert resolve_seed(5, load_env=False) == 5

    def test_environment(self):
        with patch.dict("os.environ", {SEED_ENV: "99"}):
            assert resolve_seed(None, load_env=False) == 99

    def test_default(self):
        with patch.dict("os.environ", {}, clear=True):
            assert resolve_seed(None, load_env=False) == DEFAULT_SEED
            assert resolve_seed(None, default=11, load_env=False) == 11

    def test_invalid_environment_value(self):
        with patch.dict("os.environ", {SEED_ENV: "seven"}):
            with pytest.raises(ConfigError):
                resolve_seed(None, load_env=False)

    def test_dotenv_is_loaded(self):
        with patch("guided_attention.config.load_dotenv") as mock_load, patch.dict("os.environ", {}, clear=True):
            resolve_seed(None)
        mock_load.assert_called_once()
