"""Experiment settings: a flat ``key = value`` document merged over documented defaults."""

from __future__ import annotations

import logging
import os
from copy import deepcopy
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .channel import ChannelParams, derive_seed
from .config import CONFIG_ECHO, DTYPE, PARALLEL, RUNS_DIR, SETTINGS_PATH, SPLITS
from .errors import ConfigError
from .models import VARIANTS, ModelConfig
from .training import TrainConfig

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class ExperimentConfig(BaseModel):
    """Every setting of an experiment; field descriptions document the keys."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    out: str = Field(RUNS_DIR, description="output directory of the run")
    seed: int = Field(0, ge=0, description="base seed of data, initialization and shuffling")
    dtype: Literal["float32", "float64"] = Field(DTYPE, description="parameter precision")

    n_t: int = Field(32, description="transmit antennas")
    n_sub: int = Field(1024, description="OFDM subcarriers before truncation")
    n_c: int = Field(32, description="retained delay columns")
    steps: int = Field(4, description="time steps per sample")
    alpha: float = Field(0.1, description="channel evolution factor")
    sigma_u: float = Field(1e-3, description="innovation noise standard deviation")
    paths: int = Field(3, description="multipath components")
    train_size: int = Field(2000, ge=0, description="training samples")
    val_size: int = Field(500, ge=0, description="validation samples")
    test_size: int = Field(500, ge=0, description="test samples")

    variant: str = Field("convlstm_a", description="network: " + ", ".join(VARIANTS))
    gamma: str = Field("1/4", description="compression ratio M/N")
    hidden_channels: int = Field(8, description="ConvLSTM hidden channels")
    leaky_slope: float = Field(0.3, description="leaky ReLU negative slope")
    temporal_depth: int = Field(3, description="P3D temporal kernel depth")
    spatial_depth: int = Field(3, description="P3D spatial kernel size")
    temporal_padding: Literal["same", "causal"] = Field("causal", description="padding of temporal kernels")
    bn_momentum: float = Field(0.9, description="batch-norm running statistics momentum")
    bn_epsilon: float = Field(1e-5, description="batch-norm epsilon")

    epochs: int = Field(150, ge=0, description="training epochs")
    batch_size: int = Field(200, ge=1, description="mini-batch size")
    lr_breakpoints: str = Field("1:1e-3,1001:5e-4,1201:1e-4", description="first epoch:learning rate pairs")
    reference_epochs: int = Field(1500, ge=1, description="run length the breakpoints are written for")
    scale_schedule: bool = Field(True, description="stretch breakpoints to the configured epochs")
    beta1: float = Field(0.9, description="ADAM first moment decay")
    beta2: float = Field(0.999, description="ADAM second moment decay")
    epsilon: float = Field(1e-8, description="ADAM denominator epsilon")
    checkpoint_every: int = Field(0, ge=0, description="epochs between checkpoints, 0 for end of run only")
    eval_batch_size: int = Field(200, ge=1, description="inference batch size")

    sweep_variants: List[str] = Field(["convlstm_a"], description="variants of the sweep grid")
    sweep_gammas: List[str] = Field(["1/4", "1/16"], description="compression ratios of the sweep grid")
    sweep_alphas: List[float] = Field([0.1], description="evolution factors of the sweep grid")
    sweep_seeds: List[int] = Field([0], description="seeds of the sweep grid")
    baselines: List[str] = Field(["csinet", "reccsinet"], description="reference variants of the improvement table")
    parallel: int = Field(PARALLEL, ge=1, description="concurrent sweep cells")
    image_count: int = Field(2, ge=0, description="test samples rendered by the images command")

    @field_validator("sweep_variants", "sweep_gammas", "sweep_alphas", "sweep_seeds", "baselines", mode="before")
    @classmethod
    def _lists(cls, value: Any) -> Any:
        return _split_list(value)

    @field_validator("variant")
    @classmethod
    def _known_variant(cls, value: str) -> str:
        if value not in VARIANTS:
            raise ValueError(f"unknown variant {value!r}, expected one of {', '.join(VARIANTS)}")
        return value

    @field_validator("sweep_variants", "baselines")
    @classmethod
    def _known_variants(cls, value: List[str]) -> List[str]:
        unknown = [v for v in value if v not in VARIANTS]
        if unknown:
            raise ValueError(f"unknown variants {unknown}")
        return value

    @field_validator("lr_breakpoints")
    @classmethod
    def _parsable_breakpoints(cls, value: str) -> str:
        parse_breakpoints(value)
        return value

    def split_sizes(self) -> Tuple[int, int, int]:
        return (self.train_size, self.val_size, self.test_size)


def parse_breakpoints(text: str) -> Tuple[Tuple[int, float], ...]:
    """``"1:1e-3,1001:5e-4"`` -> ``((1, 1e-3), (1001, 5e-4))``."""
    pairs = []
    for item in _split_list(text):
        try:
            start, lr = item.split(":")
            pairs.append((int(start), float(lr)))
        except ValueError as exc:
            raise ValueError(f"invalid learning-rate breakpoint {item!r}, expected epoch:rate") from exc
    return tuple(pairs)


DEFAULT_SETTINGS: Dict[str, Any] = ExperimentConfig().model_dump()


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def parse_document(text: str, source: str = "<settings>") -> Dict[str, str]:
    """Raw ``key -> value`` strings of a settings document; ``#`` starts a comment."""
    values: Dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected key = value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULT_SETTINGS:
            raise ConfigError(f"{source}:{number}: unknown setting {key!r}")
        values[key] = value
    return values


def parse_overrides(overrides: Iterable[str]) -> Dict[str, str]:
    return parse_document("\n".join(overrides), source="--set")


def build_settings(values: Dict[str, Any]) -> ExperimentConfig:
    """Merge ``values`` over the defaults and validate."""
    unknown = sorted(set(values) - set(DEFAULT_SETTINGS))
    if unknown:
        raise ConfigError(f"unknown settings {unknown}")
    merged = deepcopy(DEFAULT_SETTINGS)
    merged.update(values)
    try:
        return ExperimentConfig(**merged)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_settings(
    path: Optional[PathLike] = None,
    overrides: Iterable[str] = (),
    **values: Any,
) -> ExperimentConfig:
    """Defaults, then the document at ``path`` (or ``CSILAB_SETTINGS_PATH``), then ``--set`` overrides, then ``values``."""
    path = path or SETTINGS_PATH
    merged: Dict[str, Any] = {}
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read settings {path}: {exc}") from exc
        merged.update(parse_document(text, source=str(path)))
    merged.update(parse_overrides(overrides))
    merged.update({k: v for k, v in values.items() if v is not None})
    return build_settings(merged)


def format_echo(settings: ExperimentConfig) -> str:
    return "".join(f"{key} = {_format_value(value)}\n" for key, value in settings.model_dump().items())


def write_echo(directory: PathLike, settings: ExperimentConfig) -> Path:
    """Write the effective settings as ``config.echo``; reloading it reproduces the run."""
    path = Path(directory) / CONFIG_ECHO
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_echo(settings))
    return path


def with_values(settings: ExperimentConfig, **values: Any) -> ExperimentConfig:
    merged = settings.model_dump()
    merged.update(values)
    return build_settings(merged)


# ---------------------------------------------------------------------------
# Typed views
# ---------------------------------------------------------------------------


def split_seed(settings: ExperimentConfig, split: str) -> int:
    """Seeds of the three splits are distinct derived streams of the base seed."""
    return derive_seed(settings.seed, 1 + SPLITS.index(split))


def channel_params(settings: ExperimentConfig, split: str = "train") -> ChannelParams:
    try:
        return ChannelParams(
            n_t=settings.n_t,
            n_sub=settings.n_sub,
            n_c=settings.n_c,
            steps=settings.steps,
            alpha=settings.alpha,
            sigma_u=settings.sigma_u,
            paths=settings.paths,
            seed=split_seed(settings, split),
        )
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def model_config(settings: ExperimentConfig) -> ModelConfig:
    try:
        return ModelConfig(
            variant=settings.variant,
            n_t=settings.n_t,
            n_c=settings.n_c,
            steps=settings.steps,
            gamma=settings.gamma,
            hidden_channels=settings.hidden_channels,
            leaky_slope=settings.leaky_slope,
            temporal_depth=settings.temporal_depth,
            spatial_depth=settings.spatial_depth,
            temporal_padding=settings.temporal_padding,
            bn_momentum=settings.bn_momentum,
            bn_epsilon=settings.bn_epsilon,
            dtype=settings.dtype,
            seed=settings.seed,
        )
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def train_config(settings: ExperimentConfig) -> TrainConfig:
    try:
        return TrainConfig(
            epochs=settings.epochs,
            batch_size=settings.batch_size,
            breakpoints=parse_breakpoints(settings.lr_breakpoints),
            reference_epochs=settings.reference_epochs,
            scale_schedule=settings.scale_schedule,
            beta1=settings.beta1,
            beta2=settings.beta2,
            epsilon=settings.epsilon,
            seed=settings.seed,
            checkpoint_every=settings.checkpoint_every,
            eval_batch_size=settings.eval_batch_size,
        )
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
