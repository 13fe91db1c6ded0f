"""
Tests for environment configuration and the run configuration models
"""

import logging
import os
from unittest.mock import patch

import pytest
from config import (
    ABLATION_FLAGS,
    ConfigError,
    EnvironmentConfig,
    GenerationConfig,
    LossConfig,
    ModelConfig,
    TrainConfig,
    full_preset,
    get_config,
    log_resolved,
    preset,
    tiny_preset,
    validate_startup_environment,
)
from pydantic import ValidationError


class TestEnvironmentConfig:
    """Test EnvironmentConfig initialization and validation"""

    def test_default_configuration(self):
        """Defaults apply when no environment variables are set"""
        with patch.dict(os.environ, {}, clear=True), patch("config.load_dotenv"):
            config = EnvironmentConfig()

            assert config.threads >= 1
            assert config.deterministic is True
            assert config.log_level == "INFO"
            assert config.data_root == "data/toy"
            assert config.fpfh_radius == 0.05
            assert config.fpfh_bins == 36
            assert config.fpfh_voxel == 0.04
            assert config.otel_enabled is False
            assert config.otel_service_name == "few-point-completion"

    def test_environment_variable_parsing(self):
        """Environment variables override defaults"""
        env_vars = {
            "FSC_THREADS": "3",
            "FSC_DETERMINISTIC": "false",
            "LOG_LEVEL": "debug",
            "FSC_DATA_ROOT": "/tmp/data",
            "FSC_FPFH_RADIUS": "0.08",
            "FSC_FPFH_BINS": "11",
            "FSC_FPFH_VOXEL": "0.02",
            "OTEL_ENABLED": "true",
            "OTEL_SERVICE_NAME": "custom-service",
            "OTEL_CONSOLE_EXPORT": "true",
        }
        with patch.dict(os.environ, env_vars, clear=True), patch("config.load_dotenv"):
            config = EnvironmentConfig()

            assert config.threads == 3
            assert config.deterministic is False
            assert config.log_level == "DEBUG"
            assert config.data_root == "/tmp/data"
            assert config.fpfh_radius == 0.08
            assert config.fpfh_bins == 11
            assert config.fpfh_voxel == 0.02
            assert config.otel_enabled is True
            assert config.otel_service_name == "custom-service"
            assert config.otel_console_export is True

    def test_validation_passes_for_defaults(self):
        with patch.dict(os.environ, {}, clear=True), patch("config.load_dotenv"):
            assert EnvironmentConfig().validate_environment() == []

    @pytest.mark.parametrize(
        "name,value,fragment",
        [
            ("FSC_THREADS", "0", "FSC_THREADS"),
            ("LOG_LEVEL", "CHATTY", "LOG_LEVEL"),
            ("FSC_FPFH_RADIUS", "-1", "FSC_FPFH_RADIUS"),
            ("FSC_FPFH_BINS", "1", "FSC_FPFH_BINS"),
            ("FSC_FPFH_VOXEL", "0", "FSC_FPFH_VOXEL"),
        ],
    )
    def test_validation_reports_each_issue(self, name, value, fragment):
        with patch.dict(os.environ, {name: value}, clear=True), patch("config.load_dotenv"):
            issues = EnvironmentConfig().validate_environment()
        assert len(issues) == 1
        assert fragment in issues[0]

    def test_as_dict_is_json_ready(self):
        with patch.dict(os.environ, {"FSC_THREADS": "2"}, clear=True), patch("config.load_dotenv"):
            payload = EnvironmentConfig().as_dict()
        assert payload["threads"] == 2
        assert set(payload) >= {"deterministic", "fpfh_radius", "otel_enabled"}


class TestStartupValidation:
    """Test startup validation and the global accessor"""

    def test_invalid_environment_raises(self):
        with (
            patch.dict(os.environ, {"FSC_THREADS": "0"}, clear=True),
            patch("config.load_dotenv"),
            pytest.raises(ConfigError),
        ):
            validate_startup_environment()

    def test_config_error_exits_with_three(self):
        assert ConfigError("x").exit_code == 3

    def test_get_config_is_cached(self):
        with (
            patch.dict(os.environ, {"FSC_DETERMINISTIC": "false"}, clear=True),
            patch("config.load_dotenv"),
        ):
            first = get_config()
            second = get_config()
        assert first is second

    def test_apply_runtime_sets_threads(self):
        with (
            patch.dict(os.environ, {"FSC_THREADS": "2", "FSC_DETERMINISTIC": "false"}, clear=True),
            patch("config.load_dotenv"),
            patch("torch.set_num_threads") as set_threads,
        ):
            EnvironmentConfig().apply_runtime()
        set_threads.assert_called_once_with(2)

    def test_log_resolved_emits_sorted_json(self, caplog):
        with caplog.at_level(logging.INFO, logger="config"):
            log_resolved("demo", {"b": 1, "a": 2})
        assert 'Resolved demo config: {"a": 2, "b": 1}' in caplog.text


class TestModelConfig:
    """Test presets, validation and ablation switches"""

    def test_tiny_preset_shapes(self):
        config = tiny_preset()
        assert config.feature_width == 128
        assert config.m_detail == 64 * 4

    def test_full_preset_matches_defaults(self):
        config = full_preset()
        assert config.n_coarse == 512
        assert config.m_detail == 2048
        assert config.feature_width == 1024

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="Unknown preset"):
            preset("huge")

    def test_odd_branch_width_rejected(self):
        with pytest.raises(ValidationError):
            ModelConfig(d1=63)

    def test_heads_must_divide_width(self):
        with pytest.raises(ValidationError):
            ModelConfig(d2=66, heads=4)

    def test_disabling_both_branches_is_a_config_error(self):
        with pytest.raises(ConfigError):
            tiny_preset().with_disabled(["extensive_branch", "salient_branch"])

    def test_unknown_flag(self):
        with pytest.raises(ConfigError, match="Unknown ablation flags"):
            tiny_preset().with_disabled(["magic"])

    @pytest.mark.parametrize("flag", ABLATION_FLAGS)
    def test_each_flag_can_be_disabled(self, flag):
        config = tiny_preset().with_disabled([flag])
        assert getattr(config, flag) is False


class TestRunConfigs:
    """Test training, loss and generation configuration"""

    def test_alpha_ramp(self):
        loss = LossConfig(alpha_start=0.0, alpha_end=1.0, alpha_ramp_steps=10)
        assert loss.alpha(0) == 0.0
        assert loss.alpha(5) == pytest.approx(0.5)
        assert loss.alpha(10) == 1.0
        assert loss.alpha(1000) == 1.0

    def test_alpha_without_ramp(self):
        assert LossConfig(alpha_ramp_steps=0).alpha(0) == 1.0

    def test_decreasing_ramp_rejected(self):
        with pytest.raises(ValidationError):
            LossConfig(alpha_start=2.0, alpha_end=1.0)

    def test_train_config_round_trips_through_json(self):
        config = TrainConfig(steps=5, levels=[32, 16])
        assert TrainConfig.model_validate_json(config.model_dump_json()) == config

    def test_generation_resolutions(self):
        config = GenerationConfig(partial_points=256, levels=[128, 64])
        assert config.resolutions == [256, 128, 64]

    def test_levels_must_be_below_partial(self):
        with pytest.raises(ValidationError):
            GenerationConfig(partial_points=64, levels=[64, 32])
