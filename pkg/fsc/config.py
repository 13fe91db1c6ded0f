"""
Configuration and environment validation for the few-point completion toolkit
"""

import json
import logging
import os
import sys

import psutil
import torch
from dotenv import load_dotenv
from errors import FscError, InputError
from pydantic import BaseModel, Field, field_validator, model_validator

logger = logging.getLogger(__name__)

ABLATION_FLAGS = (
    "extensive_branch",
    "salient_branch",
    "salient_attention",
    "feature_revision",
    "point_revision",
    "pointnetpp_fusion",
    "transformer_fusion",
)

PARTIAL_LEVELS = (1024, 512, 256, 128, 64)


class ConfigError(FscError):
    """Configuration validation error"""

    exit_code = 3


class CheckpointMismatch(ConfigError):
    """A checkpoint does not fit the configuration it is loaded under"""


class PointCountOutOfRange(ConfigError, InputError):
    """An input cloud is larger or smaller than the model was configured for"""


def _default_threads() -> int:
    return psutil.cpu_count(logical=False) or 1


class EnvironmentConfig:
    """Environment configuration with validation"""

    def __init__(self):
        """Initialize configuration from environment variables"""
        load_dotenv()

        # Runtime
        threads = os.getenv("FSC_THREADS")
        self.threads = int(threads) if threads else _default_threads()
        self.deterministic = os.getenv("FSC_DETERMINISTIC", "true").lower() == "true"
        self.log_level = os.getenv("LOG_LEVEL", "INFO").upper()
        self.data_root = os.getenv("FSC_DATA_ROOT", "data/toy")

        # Descriptor defaults (normalized units)
        self.fpfh_radius = float(os.getenv("FSC_FPFH_RADIUS", "0.05"))
        self.fpfh_bins = int(os.getenv("FSC_FPFH_BINS", "36"))
        self.fpfh_voxel = float(os.getenv("FSC_FPFH_VOXEL", "0.04"))

        # OpenTelemetry Configuration
        self.otel_enabled = os.getenv("OTEL_ENABLED", "false").lower() == "true"
        self.otel_service_name = os.getenv("OTEL_SERVICE_NAME", "few-point-completion")
        self.otel_console_export = (
            os.getenv("OTEL_CONSOLE_EXPORT", "false").lower() == "true"
        )

    def validate_environment(self) -> list[str]:
        """Validate environment configuration and return list of issues"""
        issues = []

        if self.threads < 1:
            issues.append(f"Invalid FSC_THREADS: {self.threads}. Use 1 or more")

        if self.log_level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            issues.append(f"Invalid LOG_LEVEL: {self.log_level}")

        if self.fpfh_radius <= 0:
            issues.append(f"Invalid FSC_FPFH_RADIUS: {self.fpfh_radius}. Must be > 0")
        if self.fpfh_bins < 2:
            issues.append(f"Invalid FSC_FPFH_BINS: {self.fpfh_bins}. Must be >= 2")
        if self.fpfh_voxel <= 0:
            issues.append(f"Invalid FSC_FPFH_VOXEL: {self.fpfh_voxel}. Must be > 0")

        return issues

    def setup_logging(self):
        """Configure logging based on environment settings"""
        logging.basicConfig(
            level=getattr(logging, self.log_level, logging.INFO),
            format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
            handlers=[logging.StreamHandler(sys.stderr)],
        )

    def apply_runtime(self):
        """Apply thread caps and deterministic kernels to torch"""
        torch.set_num_threads(self.threads)
        if self.deterministic:
            torch.use_deterministic_algorithms(True)

    def as_dict(self) -> dict:
        return {
            "threads": self.threads,
            "deterministic": self.deterministic,
            "log_level": self.log_level,
            "data_root": self.data_root,
            "fpfh_radius": self.fpfh_radius,
            "fpfh_bins": self.fpfh_bins,
            "fpfh_voxel": self.fpfh_voxel,
            "otel_enabled": self.otel_enabled,
        }


def validate_startup_environment() -> EnvironmentConfig:
    """Validate environment on startup and return configuration"""
    config = EnvironmentConfig()
    config.setup_logging()
    logger.info("Validating environment configuration...")

    issues = config.validate_environment()

    if issues:
        logger.error("Environment validation failed:")
        for issue in issues:
            logger.error(f"  - {issue}")
        raise ConfigError("Critical environment configuration issues found")

    config.apply_runtime()
    logger.info(
        f"Configuration: threads={config.threads}, "
        f"deterministic={config.deterministic}, data_root={config.data_root}"
    )
    return config


# Global configuration instance
config: EnvironmentConfig | None = None


def get_config() -> EnvironmentConfig:
    """Get the global configuration instance"""
    global config
    if config is None:
        config = validate_startup_environment()
    return config


def log_resolved(name: str, payload: dict):
    """Log a resolved run configuration as one JSON line"""
    logger.info(f"Resolved {name} config: {json.dumps(payload, sort_keys=True)}")


class ModelConfig(BaseModel):
    """Network widths, cardinalities and ablation switches"""

    min_points: int = Field(1, ge=1)
    max_points: int = Field(16384, ge=1)
    n_coarse: int = Field(512, ge=1)
    grid: int = Field(2, ge=1, description="Folding grid side g")
    d1: int = Field(512, ge=2, description="Extensive branch width")
    d2: int = Field(512, ge=2, description="Salient branch width")
    heads: int = Field(4, ge=1)
    memory: int = Field(64, ge=1, description="External attention memory size S")
    point_hidden: int = Field(128, ge=1)
    decoder_hidden: int = Field(1024, ge=1)
    local_width: int = Field(64, ge=1)
    fold_width: int = Field(256, ge=1)
    critic_width: int = Field(256, ge=1)
    ball_radius: float = Field(0.2, gt=0)
    ball_k: int = Field(16, ge=1)
    extensive_branch: bool = True
    salient_branch: bool = True
    salient_attention: bool = True
    feature_revision: bool = True
    point_revision: bool = True
    pointnetpp_fusion: bool = True
    transformer_fusion: bool = True

    @property
    def feature_width(self) -> int:
        return self.d1 + self.d2

    @property
    def m_detail(self) -> int:
        return self.n_coarse * self.grid * self.grid

    @field_validator("d1", "d2")
    @classmethod
    def _even_width(cls, value: int) -> int:
        if value % 2:
            raise ValueError(f"branch width must be even, got {value}")
        return value

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        if not (self.extensive_branch or self.salient_branch):
            raise ValueError("at least one encoder branch must be enabled")
        if self.min_points > self.max_points:
            raise ValueError("min_points must not exceed max_points")
        if self.salient_branch and self.salient_attention and self.d2 % self.heads:
            raise ValueError(
                f"salient width {self.d2} is not divisible by {self.heads} heads"
            )
        if self.transformer_fusion and self.fold_width % self.heads:
            raise ValueError(
                f"decoder width {self.fold_width} is not divisible by {self.heads} heads"
            )
        return self

    def with_disabled(self, flags: list[str]) -> "ModelConfig":
        """Return a copy with the named ablation flags switched off"""
        unknown = sorted(set(flags) - set(ABLATION_FLAGS))
        if unknown:
            raise ConfigError(f"Unknown ablation flags: {', '.join(unknown)}")
        try:
            return ModelConfig.model_validate(
                {**self.model_dump(), **dict.fromkeys(flags, False)}
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e


def tiny_preset() -> ModelConfig:
    """Small widths for CI and laptop overfitting runs"""
    return ModelConfig(
        n_coarse=64,
        grid=2,
        d1=64,
        d2=64,
        heads=4,
        memory=16,
        point_hidden=32,
        decoder_hidden=256,
        local_width=32,
        fold_width=64,
        critic_width=64,
    )


def full_preset() -> ModelConfig:
    return ModelConfig()


PRESETS = {"tiny": tiny_preset, "full": full_preset}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]()
    except KeyError as e:
        raise ConfigError(f"Unknown preset: {name}. Use tiny or full") from e


class LossConfig(BaseModel):
    """Weights of the completion loss and the adversarial terms"""

    alpha_start: float = Field(0.01, ge=0)
    alpha_end: float = Field(1.0, ge=0)
    alpha_ramp_steps: int = Field(1000, ge=0)
    adv_weight: float = Field(0.1, ge=0, description="beta")
    gp_lambda: float = Field(10.0, ge=0)
    n_critic: int = Field(1, ge=0)
    emd_eps: float = Field(0.005, gt=0)
    emd_iters: int = Field(200, ge=1)
    loss_gt_points: int = Field(2048, ge=1)
    feature_gt_points: int = Field(2048, ge=1)

    @model_validator(mode="after")
    def _ordered(self) -> "LossConfig":
        if self.alpha_start > self.alpha_end:
            raise ValueError("alpha ramp must not decrease")
        return self

    def alpha(self, step: int) -> float:
        """Linear ramp of the detail weight, constant after the ramp"""
        if self.alpha_ramp_steps == 0 or step >= self.alpha_ramp_steps:
            return self.alpha_end
        t = step / self.alpha_ramp_steps
        return self.alpha_start + t * (self.alpha_end - self.alpha_start)


class OptimizerConfig(BaseModel):
    lr: float = Field(1e-4, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    critic_lr: float = Field(1e-4, gt=0)


class TrainConfig(BaseModel):
    model: ModelConfig = Field(default_factory=tiny_preset)
    loss: LossConfig = Field(default_factory=LossConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    steps: int = Field(2000, ge=0)
    batch_size: int = Field(8, ge=1)
    levels: list[int] = Field(default_factory=lambda: [64])
    seed: int = 0
    log_every: int = Field(10, ge=1)


class CameraConfig(BaseModel):
    width: int = Field(160, ge=1)
    height: int = Field(120, ge=1)
    distance: float = Field(2.5, gt=1)
    extent: float = Field(1.1, gt=0, description="Half height of the view volume")


class GenerationConfig(BaseModel):
    """Everything that determines a generated dataset"""

    seed: int = 0
    gt_points: int = Field(16384, ge=1)
    partial_points: int = Field(2048, ge=1)
    levels: list[int] = Field(default_factory=lambda: list(PARTIAL_LEVELS))
    coarse_points: int = Field(512, ge=1)
    nested: bool = True
    views: int = Field(1, ge=1)
    split: tuple[int, int, int] = (8, 1, 1)
    unseen_categories: list[str] = Field(default_factory=list)
    camera: CameraConfig = Field(default_factory=CameraConfig)

    @field_validator("levels")
    @classmethod
    def _descending(cls, value: list[int]) -> list[int]:
        if any(b >= a for a, b in zip(value, value[1:], strict=False)):
            raise ValueError("levels must be strictly descending")
        return value

    @model_validator(mode="after")
    def _levels_fit(self) -> "GenerationConfig":
        if self.levels and self.levels[0] >= self.partial_points:
            raise ValueError("levels must be smaller than the partial resolution")
        if sum(self.split) <= 0:
            raise ValueError("split weights must not all be zero")
        return self

    @property
    def resolutions(self) -> list[int]:
        return [self.partial_points, *self.levels]


class EntropyConfig(BaseModel):
    sizes: list[int] = Field(
        default_factory=lambda: [16384, 8192, 4096, 2048, 1024, 512, 256, 128, 64]
    )
    trials: int = Field(5, ge=1)
    seed: int = 0
    radius: float = Field(0.05, gt=0)
    bins: int = Field(36, ge=2)
    voxel: float = Field(0.04, gt=0)

    @field_validator("sizes")
    @classmethod
    def _descending(cls, value: list[int]) -> list[int]:
        if not value or any(b >= a for a, b in zip(value, value[1:], strict=False)):
            raise ValueError("sizes must be non-empty and strictly descending")
        return value
