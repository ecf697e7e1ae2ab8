"""Flat key = value configuration files and command-line overrides."""

import itertools
import os
from enum import Enum
from pathlib import Path
from typing import Iterator, Optional, Sequence

import structlog
from dotenv import dotenv_values
from pydantic import BaseModel, Field, ValidationError

from .errors import ConfigError, ConfigKeyError
from .models import ModelConfig

logger = structlog.get_logger(__name__)

RUN_ROOT_ENV = "TF4CTR_RUN_ROOT"
PATH_KEYS = ("data_path", "train_path", "valid_path", "test_path")
GRID_SEPARATOR = "|"


def _aliases() -> dict[str, str]:
    mapping = {}
    for name, info in ModelConfig.model_fields.items():
        mapping[name] = name
        if info.alias:
            mapping[info.alias] = name
    mapping["seeds"] = "seed"
    return mapping


def canonical_key(key: str) -> str:
    """Map an alias (``ssem``, ``lr`` ...) to its field name."""
    try:
        return _aliases()[key.strip()]
    except KeyError:
        raise ConfigKeyError(key.strip()) from None


def default_run_root() -> Path:
    return Path(os.getenv(RUN_ROOT_ENV, "runs"))


def read_flat_file(path: Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    return {key.strip(): (value or "").strip() for key, value in dotenv_values(path).items()}


def parse_overrides(overrides: Sequence[str]) -> dict[str, str]:
    parsed = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"Override must look like key=value: {item!r}")
        key, value = item.split("=", 1)
        parsed[key.strip()] = value.strip()
    return parsed


def _resolve_paths(values: dict[str, str], base_dir: Path) -> dict[str, str]:
    """Canonicalise keys and make relative data paths absolute against ``base_dir``."""
    resolved = {}
    for key, value in values.items():
        name = canonical_key(key)
        if name in PATH_KEYS and value and not Path(value).is_absolute():
            value = str((base_dir / value).resolve())
        resolved[name] = value
    return resolved


def build_config(values: dict[str, str], base_dir: Optional[Path] = None) -> ModelConfig:
    """Validate raw string values into a ModelConfig."""
    canonical = _resolve_paths(values, base_dir or Path.cwd())
    try:
        return ModelConfig.model_validate(canonical)
    except ValidationError as e:
        errors = "; ".join(
            f"{'.'.join(str(part) for part in err['loc']) or 'config'}: {err['msg']}"
            for err in e.errors()
        )
        raise ConfigError(f"Invalid configuration: {errors}") from e


def read_config_values(path: Path) -> dict[str, str]:
    """Canonical keys and resolved paths of one config file, not yet validated."""
    return _resolve_paths(read_flat_file(path), Path(path).resolve().parent)


def load_config(
    path: Optional[Path] = None, overrides: Sequence[str] = (), seed: Optional[int] = None
) -> ModelConfig:
    """Load a config file, then apply ``--set`` overrides and ``--seed``."""
    merged: dict[str, str] = {}
    if path is not None:
        merged.update(read_config_values(path))
    merged.update(_resolve_paths(parse_overrides(overrides), Path.cwd()))
    if seed is not None:
        merged["seed"] = str(seed)
    config = build_config(merged)
    logger.info("Configuration loaded", source=str(path) if path else None, keys=len(merged))
    return config


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def dump_config(config: ModelConfig) -> str:
    """Render a config in the flat file format, one field per line."""
    lines = ["# tf4ctr resolved configuration"]
    for name in ModelConfig.model_fields:
        lines.append(f"{name} = {_format_value(getattr(config, name))}")
    return "\n".join(lines) + "\n"


def config_as_strings(config: ModelConfig) -> dict[str, str]:
    return {name: _format_value(getattr(config, name)) for name in ModelConfig.model_fields}


class GridSpec(BaseModel):
    """Axes and fixed overrides of a grid experiment."""
    base_config: Optional[Path] = None
    fixed: dict[str, str] = Field(default_factory=dict)
    axes: dict[str, list[str]] = Field(default_factory=dict)

    def cells(self) -> Iterator[dict[str, str]]:
        """Every combination of axis values, in file order, merged with fixed keys."""
        keys = list(self.axes)
        for combo in itertools.product(*(self.axes[k] for k in keys)):
            cell = dict(self.fixed)
            cell.update(zip(keys, combo))
            yield cell

    @property
    def size(self) -> int:
        size = 1
        for values in self.axes.values():
            size *= len(values)
        return size


def read_grid(path: Path) -> GridSpec:
    """Parse a grid file; ``a | b | c`` values become axes."""
    path = Path(path)
    raw = read_flat_file(path)
    base = raw.pop("base_config", "").strip()
    base_config = None
    if base:
        base_config = Path(base) if Path(base).is_absolute() else (path.parent / base).resolve()

    fixed: dict[str, str] = {}
    axes: dict[str, list[str]] = {}
    for name, value in _resolve_paths(raw, path.resolve().parent).items():
        if GRID_SEPARATOR in value:
            axes[name] = [v.strip() for v in value.split(GRID_SEPARATOR) if v.strip()]
        elif name == "seed" and "," in value:
            axes[name] = [v.strip() for v in value.split(",") if v.strip()]
        else:
            fixed[name] = value
    spec = GridSpec(base_config=base_config, fixed=fixed, axes=axes)
    logger.info("Grid loaded", path=str(path), axes=list(axes), cells=spec.size)
    return spec
