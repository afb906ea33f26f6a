"""Run configurations: JSON documents validated by pydantic, plus environment runtime settings."""

import hashlib
import json
import logging
import math
import os
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from kdarek.baselines import DarekSettings, EnsembleSettings, GpGrid
from kdarek.bounds import KdarekSettings
from kdarek.errors import ConfigError
from kdarek.netcore import TrainConfig
from kdarek.safectrl import CbfParams, ErrorModelSettings, WorldConfig

logger = logging.getLogger("kdarek.config")


class CosineData(BaseModel):
    model_config = ConfigDict(extra="forbid")

    amplitude: float = 10.0
    x_min: float = -2 * math.pi
    x_max: float = 2 * math.pi
    n_train: int = Field(50, ge=2)
    noise_std: float = Field(0.0, ge=0)
    n_test: int = Field(500, ge=1)
    curve_points: int = Field(400, ge=2)
    curve_extension: float = Field(math.pi, ge=0)


class CosineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(0, ge=0)
    data: CosineData = Field(default_factory=CosineData)
    kdarek: KdarekSettings = Field(default_factory=KdarekSettings)
    darek: DarekSettings = Field(default_factory=DarekSettings)
    ensemble: EnsembleSettings = Field(default_factory=EnsembleSettings)
    gp: GpGrid = Field(default_factory=GpGrid)
    train: TrainConfig = Field(default_factory=TrainConfig)


class BenchConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(0, ge=0)
    sizes: list[int] = Field(default_factory=lambda: [50, 100, 500, 1000, 5000])
    repetitions: int = Field(5, ge=1)
    n_query: int = Field(200, ge=1)
    models: list[Literal["K-DAREK", "GP", "Ensemble"]] = Field(
        default_factory=lambda: ["K-DAREK", "GP", "Ensemble"])
    data: CosineData = Field(default_factory=CosineData)
    kdarek: KdarekSettings = Field(default_factory=KdarekSettings)
    ensemble: EnsembleSettings = Field(default_factory=EnsembleSettings)
    gp: GpGrid = Field(default_factory=GpGrid)
    train: TrainConfig = Field(default_factory=TrainConfig)


class SafeCtrlConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: Optional[int] = Field(None, ge=0)
    trials: int = Field(100, ge=1)
    position_levels: list[float] = Field(default_factory=lambda: [0.0, 1.0])
    velocity_levels: list[float] = Field(default_factory=lambda: [0.0, 1.0, 2.0, 3.0])
    models: list[Literal["D2", "K-D2", "K-D3", "nominal"]] = Field(default_factory=lambda: ["D2", "K-D2", "K-D3"])
    dump_trajectories: bool = False
    world: WorldConfig = Field(default_factory=WorldConfig)
    cbf: CbfParams = Field(default_factory=CbfParams)
    error_models: ErrorModelSettings = Field(default_factory=ErrorModelSettings)
    train: TrainConfig = Field(default_factory=lambda: TrainConfig(epochs=300, optimizer="adam",
                                                                     learning_rate=0.01))


class TrainCommandConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(0, ge=0)
    dataset: Literal["cosine", "csv"] = "cosine"
    csv_path: Optional[str] = None
    input_columns: int = Field(1, ge=1)
    data: CosineData = Field(default_factory=CosineData)
    kdarek: KdarekSettings = Field(default_factory=KdarekSettings)
    train: TrainConfig = Field(default_factory=TrainConfig)
    model_file: str = "model.json"


COMMAND_CONFIGS = {
    "cosine": CosineConfig,
    "bench": BenchConfig,
    "safectrl": SafeCtrlConfig,
    "train": TrainCommandConfig,
}


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(data, dotted, value):
    """Set data[a][b][c] = value for dotted = 'a.b.c', creating sections as needed."""
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        child = node.setdefault(key, {})
        if not isinstance(child, dict):
            raise ConfigError(f"Cannot override '{dotted}': '{key}' is not a section")
        node = child
    node[keys[-1]] = value


def load_config(path, model_cls, overrides=None):
    """
    Read a JSON run configuration, apply `key.path=value` overrides (values parsed as
    JSON when possible) and validate it. Errors carry line/column or field location.
    """
    data = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"Cannot read config {path}: {e}") from e
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")

    for dotted, value in (overrides or {}).items():
        apply_override(data, dotted, _parse_value(value) if isinstance(value, str) else value)

    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"{path or '<defaults>'}: {problems}") from e


def config_hash_of(data):
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def config_hash(cfg):
    return config_hash_of(cfg.model_dump(mode="json"))


def get_runtime_config():
    """Runtime settings from environment variables."""
    config = {
        "output_dir": os.getenv("KDAREK_OUTPUT_DIR", "outputs"),
        "jobs": os.getenv("KDAREK_JOBS", "1"),
        "log_level": os.getenv("KDAREK_LOG_LEVEL", "INFO").upper(),
        "build_id": os.getenv("KDAREK_BUILD_ID"),
    }

    try:
        config["jobs"] = int(config["jobs"])
    except ValueError:
        raise ValueError(f"KDAREK_JOBS must be an integer, got {config['jobs']!r}")
    if config["jobs"] < 1:
        raise ValueError(f"KDAREK_JOBS must be >= 1, got {config['jobs']}")
    if not isinstance(logging.getLevelName(config["log_level"]), int):
        logger.error(f"Unknown log level: {config['log_level']}")
        raise ValueError(f"Unknown KDAREK_LOG_LEVEL: {config['log_level']}")
    return config
