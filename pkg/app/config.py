"""
Application configuration.
Process settings come from environment variables (DPR_*) and .env;
experiments are described by INI-style files with [section] headers.
"""

import configparser
import hashlib
import math
from functools import lru_cache
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.models.dataset import DatasetKind, GenConfig
from app.models.training import TrainSchedule
from app.services.errors import ConfigError


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    app_name: str = "DPR Debiasing Lab"
    code_version: str = "1.0.0"

    # Output
    out_dir: Path = Path("runs")
    log_level: str = "INFO"

    # Parallel experiment cells (1 = serial)
    workers: int = 1

    model_config = SettingsConfigDict(
        env_prefix="DPR_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()


# ============================================================
# Experiment configuration
# ============================================================


def _split_list(value: Any) -> Any:
    if value is None:
        return []
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class DataSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: DatasetKind = DatasetKind.COLORED
    num_classes: int = Field(10, ge=2)
    num_bias_attrs: int = Field(1, ge=1)
    sigma: float = Field(1e-4, ge=0.0)
    image_size: int = Field(14, ge=8)
    glyph_jitter: int = Field(1, ge=0, le=2)
    rho: list[float] = Field(default_factory=lambda: [0.005, 0.01, 0.05])
    n_train: int = Field(20_000, ge=2)
    n_test: int = Field(10_000, ge=1)
    val_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    idx_images: Optional[Path] = None
    idx_labels: Optional[Path] = None

    @field_validator("rho", mode="before")
    @classmethod
    def split_lists(cls, value: Any) -> Any:
        return _split_list(value)

    @field_validator("rho")
    @classmethod
    def check_rho(cls, value: list[float]) -> list[float]:
        if not value:
            raise ValueError("rho list must not be empty")
        for rho in value:
            if not 0.0 <= rho <= 1.0:
                raise ValueError(f"rho {rho} outside [0, 1]")
        return value

    @model_validator(mode="after")
    def check_idx(self) -> "DataSection":
        if self.kind == DatasetKind.COLORIZED_IDX and not (self.idx_images and self.idx_labels):
            raise ValueError("colorized-idx needs idx_images and idx_labels")
        if self.kind == DatasetKind.MULTIBIAS and self.num_bias_attrs < 2:
            raise ValueError("multibias needs num_bias_attrs >= 2")
        return self

    def gen_config(self, rho: float) -> GenConfig:
        return GenConfig(
            kind=self.kind,
            num_classes=self.num_classes,
            num_bias_attrs=self.num_bias_attrs if self.kind == DatasetKind.MULTIBIAS else 1,
            rho=rho,
            sigma=self.sigma,
            image_size=self.image_size,
            glyph_jitter=self.glyph_jitter,
        )


class SweepSection(BaseModel):
    """Ablation axes; an empty axis is skipped."""

    model_config = ConfigDict(extra="forbid")

    q: list[float] = Field(default_factory=list)
    tau: list[float] = Field(default_factory=list)
    components: bool = False
    sampling: bool = False

    @field_validator("q", "tau", mode="before")
    @classmethod
    def split_lists(cls, value: Any) -> Any:
        return _split_list(value)

    @field_validator("q")
    @classmethod
    def check_q(cls, value: list[float]) -> list[float]:
        if any(not 0.0 < q <= 1.0 for q in value):
            raise ValueError("q values must lie in (0, 1]")
        return value

    @field_validator("tau")
    @classmethod
    def check_tau(cls, value: list[float]) -> list[float]:
        if any(tau <= 0 for tau in value):
            raise ValueError("tau values must be > 0")
        return value

    def axes(self) -> list[str]:
        axes = []
        if self.components:
            axes.append("components")
        if self.q:
            axes.append("q")
        if self.tau:
            axes.append("tau")
        if self.sampling:
            axes.append("sampling")
        return axes


class BoundsSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    loss_caps: list[float] = Field(default_factory=list)
    deltas: list[float] = Field(default_factory=lambda: [0.05, 0.1])
    population_per_group: int = Field(50_000, ge=1)
    hoeffding_sizes: list[int] = Field(default_factory=lambda: [50, 200, 800])
    hoeffding_trials: int = Field(10_000, ge=1000)

    @field_validator("loss_caps", "deltas", "hoeffding_sizes", mode="before")
    @classmethod
    def split_lists(cls, value: Any) -> Any:
        return _split_list(value)

    @field_validator("deltas")
    @classmethod
    def check_deltas(cls, value: list[float]) -> list[float]:
        if not value or any(not 0.0 < d < 1.0 for d in value):
            raise ValueError("deltas must be a nonempty list of values in (0, 1)")
        return value

    def caps_for(self, num_classes: int) -> list[float]:
        """Configured caps, defaulting to 4 ln K."""
        return self.loss_caps or [4.0 * math.log(num_classes)]


class RunSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2])
    mode: Literal["dpr", "erm", "reweighted"] = "dpr"
    out_dir: Optional[Path] = None
    workers: Optional[int] = Field(None, ge=1)
    save_checkpoints: bool = True
    auto_tau: bool = True

    @field_validator("seeds", mode="before")
    @classmethod
    def split_lists(cls, value: Any) -> Any:
        return _split_list(value)

    @field_validator("seeds")
    @classmethod
    def check_seeds(cls, value: list[int]) -> list[int]:
        if not value:
            raise ValueError("seeds must not be empty")
        if any(s < 0 for s in value):
            raise ValueError("seeds must be nonnegative")
        return value


# (rho threshold, tau) steps applied when [train] tau is not set; the last step reached wins
AUTO_TAU_STEPS: dict[DatasetKind, list[tuple[float, float]]] = {
    DatasetKind.COLORED: [(0.05, 1.1)],
    DatasetKind.COLORIZED_IDX: [(0.05, 1.1)],
    DatasetKind.MULTIBIAS: [(0.0, 0.9), (0.2, 1.1), (0.3, 1.3)],
}


def auto_tau(kind: DatasetKind, rho: float, default: float = 1.0) -> float:
    """Temperature for a dataset kind and conflict ratio."""
    tau = default
    for threshold, value in AUTO_TAU_STEPS[kind]:
        if rho >= threshold:
            tau = value
    return tau


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data: DataSection = Field(default_factory=DataSection)
    train: TrainSchedule = Field(default_factory=TrainSchedule)
    sweep: SweepSection = Field(default_factory=SweepSection)
    bounds: BoundsSection = Field(default_factory=BoundsSection)
    run: RunSection = Field(default_factory=RunSection)

    def schedule_for(self, rho: float) -> TrainSchedule:
        """Training schedule for one rho; an unset tau follows the per-kind steps in AUTO_TAU_STEPS."""
        if not self.run.auto_tau or "tau" in self.train.model_fields_set:
            return self.train
        tau = auto_tau(self.data.kind, rho, self.train.tau)
        if tau == self.train.tau:
            return self.train
        return self.train.model_copy(update={"tau": tau})

    def output_dir(self) -> Path:
        return self.run.out_dir or get_settings().out_dir

    def worker_count(self) -> int:
        return self.run.workers or get_settings().workers

    def run_id(self) -> str:
        """Hash of the canonical config bytes and the code version; output location and worker count are left out."""
        digest = hashlib.sha256()
        digest.update(self.model_dump_json(exclude={"run": {"out_dir", "workers"}}).encode("utf-8"))
        digest.update(",".join(sorted(self.train.model_fields_set)).encode("utf-8"))
        digest.update(get_settings().code_version.encode("utf-8"))
        return digest.hexdigest()[:12]


def _clean_value(value: str) -> Optional[str]:
    value = value.strip()
    if value.lower() in ("", "none", "null"):
        return None
    return value


def parse_experiment_text(text: str, overrides: Optional[dict[str, dict[str, Any]]] = None) -> ExperimentConfig:
    """
    Parse INI-style experiment text into a validated config.

    Args:
        text: Config file contents ([section] headers, key = value lines)
        overrides: {section: {key: value}} applied on top (CLI flags)

    Returns:
        ExperimentConfig

    Raises:
        ConfigError: Unknown section/key or invalid value
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"Malformed config: {e}") from e

    sections: dict[str, dict[str, Any]] = {}
    for name in parser.sections():
        if name not in ExperimentConfig.model_fields:
            raise ConfigError(f"Unknown config section [{name}]")
        sections[name] = {key: _clean_value(raw) for key, raw in parser[name].items()}

    for name, values in (overrides or {}).items():
        sections.setdefault(name, {}).update(values)

    try:
        return ExperimentConfig(**sections)
    except ValidationError as e:
        raise ConfigError(f"Invalid experiment config:\n{e}") from e


def load_experiment_config(
    path: Optional[str] = None,
    overrides: Optional[dict[str, dict[str, Any]]] = None,
) -> ExperimentConfig:
    """Load an experiment config file (or defaults when path is None)."""
    text = ""
    if path is not None:
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigError(f"Config file not found: {path}")
        text = config_path.read_text(encoding="utf-8")
    return parse_experiment_text(text, overrides)


def dump_experiment_config(config: ExperimentConfig) -> str:
    """
    Render a config back to INI text (lists comma-separated).

    Fields left at their defaults are written commented out, so reloading
    the text keeps rho-dependent defaults such as tau.
    """
    lines = []
    for section, model in config:
        lines.append(f"[{section}]")
        for key, value in model.model_dump(mode="json").items():
            if value is None:
                value = "none"
            elif isinstance(value, list):
                value = ", ".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            prefix = "" if key in model.model_fields_set else "# "
            lines.append(f"{prefix}{key} = {value}")
        lines.append("")
    return "\n".join(lines)
