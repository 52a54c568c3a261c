"""Run configuration: one JSON document that fixes a whole experiment."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .env import PRESETS, FactWorldSpec, poison_world
from .optim import TrainConfig

SEED_ENV = "SHARP_SEED"


class ConfigFileError(ValueError):
    pass


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    env: FactWorldSpec = Field(default_factory=poison_world)
    train: TrainConfig = TrainConfig()
    output_dir: str = "runs/default"
    estimator: Literal["exact", "ablation"] = "exact"
    eval_episodes: int = Field(default=256, ge=1)
    log_trajectories: bool = True

    @field_validator("env", mode="before")
    @classmethod
    def _preset(cls, value):
        # "env": "poison" expands to the named preset
        if isinstance(value, str):
            if value not in PRESETS:
                raise ValueError(f"unknown env preset {value!r}; choose from {sorted(PRESETS)}")
            return PRESETS[value]()
        return value

    def dumps(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"

    def with_seed(self, seed: int) -> RunConfig:
        return self.model_copy(update={"train": self.train.model_copy(update={"seed": seed})})


def describe_validation_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "\n".join(lines)


def load_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigFileError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigFileError(f"{path}: invalid config\n{describe_validation_error(exc)}") from None


def resolve_seed(config: RunConfig, flag: int | None, environ: dict | None = None) -> int:
    """Command-line flag, then $SHARP_SEED, then the config file."""
    if flag is not None:
        return flag
    env = os.environ if environ is None else environ
    raw = env.get(SEED_ENV)
    if raw not in (None, ""):
        try:
            return int(raw)
        except ValueError:
            raise ConfigFileError(f"{SEED_ENV}={raw!r} is not an integer") from None
    return config.train.seed
