from __future__ import annotations

import os
from pathlib import Path
from typing import Any

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, Field, ValidationError

from braingraph_bench.errors import ConfigurationError

OUT_ENV = "BRAINGRAPH_OUT"
JOBS_ENV = "BRAINGRAPH_JOBS"
LOG_LEVEL_ENV = "BRAINGRAPH_LOG_LEVEL"

_GRID_PREFIX = "GRID_"
_SET_PREFIX = "SET_"
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def load_local_env_file(env_path: str = ".env") -> None:
    """Load key=value pairs from a local .env file into process env.

    Existing environment variables are preserved and not overwritten.
    """

    path = Path(env_path)
    if not path.exists():
        return
    load_dotenv(path, override=False)


def env_int(name: str, fallback: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return fallback
    try:
        return int(raw)
    except ValueError:
        return fallback


def default_output_dir() -> Path | None:
    raw = os.getenv(OUT_ENV)
    if raw is None or raw.strip() == "":
        return None
    return Path(raw)


def parse_scalar(text: str) -> Any:
    """Turn a config/CLI token into None, bool, int, float or str."""
    token = text.strip()
    lowered = token.lower()
    if lowered in {"", "none", "null"}:
        return None
    if lowered in {"true", "false"}:
        return lowered == "true"
    for cast in (int, float):
        try:
            return cast(token)
        except ValueError:
            continue
    return token


def _parse_bool(key: str, raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    raise ConfigurationError(f"{key} must be a boolean, got {raw!r}")


class ExperimentConfig(BaseModel):
    """Flat experiment description read from a `--config` file."""

    dataset: Path | None = None
    family: str | None = None
    seed: int = 0
    folds: int = Field(default=5, ge=2)
    search: bool = True
    reuse_val_in_cv: bool = False
    output_dir: Path | None = None
    jobs: int | None = Field(default=None, ge=1)
    grid: dict[str, list[Any]] = Field(default_factory=dict)
    fixed: dict[str, Any] = Field(default_factory=dict)


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    """Read a dotenv-style experiment config.

    Keys are grouped into flat sections by prefix: ``DATASET``, ``FAMILY``,
    ``GRID_<PARAM>`` (comma-separated values), ``SET_<PARAM>``, ``SEED``,
    ``FOLDS``, ``SEARCH``, ``REUSE_VAL_IN_CV``, ``OUTPUT_DIR`` and ``JOBS``.
    Relative paths resolve against the config file's directory.
    """
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigurationError(f"Experiment config not found: {config_path}")

    values = {k.upper(): (v or "") for k, v in dotenv_values(config_path).items()}
    base_dir = config_path.parent
    fields: dict[str, Any] = {"grid": {}, "fixed": {}}

    for key, raw in values.items():
        if key.startswith(_GRID_PREFIX):
            name = key[len(_GRID_PREFIX):].lower()
            fields["grid"][name] = [parse_scalar(v) for v in raw.split(",")]
        elif key.startswith(_SET_PREFIX):
            fields["fixed"][key[len(_SET_PREFIX):].lower()] = parse_scalar(raw)
        elif key in {"DATASET", "OUTPUT_DIR"}:
            target = Path(raw)
            if not target.is_absolute():
                target = base_dir / target
            fields[key.lower()] = target
        elif key in {"SEARCH", "REUSE_VAL_IN_CV"}:
            fields[key.lower()] = _parse_bool(key, raw)
        elif key in {"FAMILY", "SEED", "FOLDS", "JOBS"}:
            fields[key.lower()] = raw.strip()
        else:
            raise ConfigurationError(f"Unknown experiment config key: {key}")

    try:
        return ExperimentConfig(**fields)
    except ValidationError as exc:
        raise ConfigurationError(f"Invalid experiment config {config_path}: {exc}") from exc
