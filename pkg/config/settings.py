"""
Configuration management for tbgdiff

Two layers:
- ``AppSettings``: process-level settings read from the environment / ``.env``
  (logging, thread count), exported as ``settings``.
- ``RunConfig``: the validated configuration of one train / eval / infer run,
  loaded from YAML with ``key=value`` overrides.
"""
import re
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import yaml
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)
from pydantic_settings import BaseSettings, SettingsConfigDict


class AppSettings(BaseSettings):
    """Process settings with environment variable support"""

    PROJECT_ROOT: Path = Path(__file__).parent.parent

    # Logging configuration
    LOG_LEVEL: str = Field(default="INFO")
    LOG_FORMAT: str = Field(
        default="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )

    # torch intra-op threads; unset leaves the torch default
    NUM_THREADS: Optional[int] = Field(default=None)

    model_config = SettingsConfigDict(
        env_prefix="TBGDIFF_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    @field_validator("LOG_LEVEL")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        """Validate log level"""
        valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        if v.upper() not in valid_levels:
            raise ValueError(f"LOG_LEVEL must be one of: {valid_levels}")
        return v.upper()


settings = AppSettings()

# Imported after `settings` exists: src.utils reads it at import time.
from src.utils.exceptions import ConfigurationError  # noqa: E402


class ScheduleKind(str, Enum):
    COSINE = "cosine"
    LINEAR = "linear"


class GuidanceModeName(str, Enum):
    PCE = "pce"
    PEE = "pee"
    STEE = "stee"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ModelConfig(_Section):
    """Network widths and module ablation switches"""

    encoder_channels: Tuple[int, int, int, int] = (32, 64, 96, 128)
    guidance_channels: Tuple[int, int] = (32, 128)
    head_channels: int = Field(default=64, ge=4)
    ffn_expansion: int = Field(default=4, ge=1)
    time_embed_dim: int = Field(default=128, ge=2)
    use_dsa: bool = True
    use_sbaa: bool = True

    @field_validator("encoder_channels")
    @classmethod
    def validate_encoder_channels(cls, v):
        """Channels must be positive and divisible by 4 (group normalization)"""
        if any(c <= 0 or c % 4 for c in v):
            raise ValueError("encoder_channels must be positive multiples of 4")
        return v

    @field_validator("guidance_channels")
    @classmethod
    def validate_guidance_channels(cls, v):
        if any(c <= 0 or c % 4 for c in v):
            raise ValueError("guidance_channels must be positive multiples of 4")
        return v

    @model_validator(mode="after")
    def validate_guidance_width(self) -> "ModelConfig":
        """Guidance features are fused with top-level features"""
        if self.guidance_channels[-1] != self.encoder_channels[-1]:
            raise ValueError(
                "guidance_channels[-1] must equal encoder_channels[-1]"
            )
        return self


class DsaConfig(_Section):
    """Dual scale aggregation switches"""

    self_tile_rescale: bool = True
    use_short: bool = True
    use_long: bool = True


class DiffusionConfig(_Section):
    """Bit-analog diffusion hyperparameters"""

    schedule: ScheduleKind = ScheduleKind.COSINE
    scale: float = Field(default=0.01, gt=0)
    sample_steps: int = Field(default=20, ge=1)
    t_train: int = Field(default=1000, ge=1)
    guidance_mode: GuidanceModeName = GuidanceModeName.STEE
    yt_resolution: str = "feature"

    @field_validator("yt_resolution")
    @classmethod
    def validate_yt_resolution(cls, v: str) -> str:
        if v not in ("feature", "full"):
            raise ValueError("yt_resolution must be 'feature' or 'full'")
        return v

    @model_validator(mode="after")
    def validate_sample_steps(self) -> "DiffusionConfig":
        if self.sample_steps > self.t_train:
            raise ValueError("sample_steps must not exceed t_train")
        return self


class MetricsConfig(_Section):
    """Evaluation metric options"""

    threshold: float = Field(default=0.5, gt=0, lt=1)
    beta2: float = Field(default=0.3, gt=0)
    empty_class_policy: str = "perfect"

    @field_validator("empty_class_policy")
    @classmethod
    def validate_policy(cls, v: str) -> str:
        if v not in ("perfect", "zero"):
            raise ValueError("empty_class_policy must be 'perfect' or 'zero'")
        return v


class DataConfig(_Section):
    """Dataset source"""

    source: str = "synthetic"
    root: Optional[Path] = None
    resize: bool = False
    clip_stride: Optional[int] = Field(default=None, ge=1)

    @field_validator("source")
    @classmethod
    def validate_source(cls, v: str) -> str:
        if v not in ("synthetic", "directory"):
            raise ValueError("data.source must be 'synthetic' or 'directory'")
        return v


class SyntheticConfig(_Section):
    """Synthetic moving-shadow videos generated in memory"""

    videos: int = Field(default=8, ge=1)
    frames: int = Field(default=5, ge=1)
    seed: int = Field(default=0, ge=0)


class RunConfig(_Section):
    """Configuration of a single train / evaluate / infer run"""

    clip_len: int = Field(default=5, ge=1, le=16)
    resolution: int = Field(default=64, ge=32)
    batch_clips: int = Field(default=4, ge=1)
    grad_accum: int = Field(default=1, ge=1)
    lr: float = Field(default=3e-5, gt=0)
    weight_decay: float = Field(default=1e-4, ge=0)
    grad_clip: float = Field(default=1.0, gt=0)
    epochs: int = Field(default=20, ge=0)
    max_steps: Optional[int] = Field(default=None, ge=0)
    seed: int = Field(default=42, ge=0)
    checkpoint_every: int = Field(default=100, ge=1)
    output_dir: Path = Path("runs/default")
    dtype: str = "float32"
    augment: bool = True
    flip_prob: float = Field(default=0.5, ge=0, le=1)
    deterministic: bool = True

    model: ModelConfig = Field(default_factory=ModelConfig)
    dsa: DsaConfig = Field(default_factory=DsaConfig)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)

    @field_validator("resolution")
    @classmethod
    def validate_resolution(cls, v: int) -> int:
        """The encoder downsamples by 32"""
        if v % 32:
            raise ValueError("resolution must be a multiple of 32")
        return v

    @field_validator("dtype")
    @classmethod
    def validate_dtype(cls, v: str) -> str:
        if v not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")
        return v

    def to_flat_dict(self) -> Dict[str, Any]:
        """JSON-compatible nested dict (paths and enums as strings)"""
        return self.model_dump(mode="json")


# Keys that change the network's parameter set or tensor shapes, plus the
# diffusion keys fixing the parameter set and the noise process a checkpoint
# was trained under; a checkpoint is only usable with a config that agrees on these.
ARCHITECTURE_KEYS = ("model", "dsa", "clip_len", "resolution")
DIFFUSION_KEYS = ("guidance_mode", "yt_resolution", "scale", "schedule", "t_train")


def _set_dotted(tree: Dict[str, Any], dotted: str, value: Any) -> None:
    node = tree
    parts = dotted.split(".")
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigurationError(f"Cannot set '{dotted}': '{part}' is not a section")
        node = child
    node[parts[-1]] = value


def _expand_dotted(raw: Dict[str, Any]) -> Dict[str, Any]:
    """Accept flat ``a.b: v`` keys as well as nested mappings"""
    tree: Dict[str, Any] = {}
    for key, value in raw.items():
        if isinstance(value, dict):
            value = _expand_dotted(value)
            for sub_key, sub_value in value.items():
                _set_dotted(tree, f"{key}.{sub_key}", sub_value)
        else:
            _set_dotted(tree, str(key), value)
    return tree


_EXPONENT_FLOAT = re.compile(r"^[-+]?(\d+\.?\d*|\.\d+)[eE][-+]?\d+$")


def parse_overrides(overrides: Sequence[str]) -> Dict[str, Any]:
    """
    Parse ``key=value`` CLI overrides

    Values are parsed as YAML scalars so ``model.use_dsa=false`` is a bool and
    ``clip_len=3`` an int. YAML 1.1 reads exponent floats without a dot
    (``1e-4``) as strings; those are converted to float here.
    """
    tree: Dict[str, Any] = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"Override must look like key=value: '{item}'")
        key, raw_value = item.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigurationError(f"Override has an empty key: '{item}'")
        try:
            value = yaml.safe_load(raw_value) if raw_value.strip() else None
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Cannot parse override '{item}': {e}") from e
        if isinstance(value, str) and _EXPONENT_FLOAT.match(value):
            value = float(value)
        _set_dotted(tree, key, value)
    return tree


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def build_config(
    raw: Optional[Dict[str, Any]] = None, overrides: Sequence[str] = ()
) -> RunConfig:
    """
    Validate a raw config mapping plus overrides into a RunConfig

    Raises:
        ConfigurationError: On unknown keys or invalid values
    """
    tree = _merge(_expand_dotted(raw or {}), parse_overrides(overrides))
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ConfigurationError(f"Invalid configuration: {problems}") from e


def load_config(
    path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()
) -> RunConfig:
    """
    Load a YAML config file (optional) and apply overrides

    Args:
        path: YAML file with flat dotted keys or nested sections
        overrides: ``key=value`` strings

    Returns:
        Validated RunConfig
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"Config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Cannot parse config file {path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigurationError(f"Config file {path} must contain a mapping")
    return build_config(raw, overrides)


def save_config(config: RunConfig, path: Union[str, Path]) -> Path:
    """Write the resolved config snapshot as YAML"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        yaml.safe_dump(config.to_flat_dict(), sort_keys=True), encoding="utf-8"
    )
    return path


def architecture_of(config: Union[RunConfig, Dict[str, Any]]) -> Dict[str, Any]:
    """The subset of a config a checkpoint is bound to (parameters, shapes, noise process)"""
    data = config.to_flat_dict() if isinstance(config, RunConfig) else config
    architecture = {key: data[key] for key in ARCHITECTURE_KEYS if key in data}
    if isinstance(data.get("diffusion"), dict):
        diffusion = data["diffusion"]
        architecture["diffusion"] = {k: diffusion[k] for k in DIFFUSION_KEYS if k in diffusion}
    return architecture


def list_override_keys() -> List[str]:
    """All dotted keys accepted by RunConfig (for CLI help)"""
    keys: List[str] = []

    def walk(model: type, prefix: str) -> None:
        for name, field in model.model_fields.items():
            annotation = field.annotation
            if isinstance(annotation, type) and issubclass(annotation, _Section):
                walk(annotation, f"{prefix}{name}.")
            else:
                keys.append(f"{prefix}{name}")

    walk(RunConfig, "")
    return keys
