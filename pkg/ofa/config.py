"""Layered run configuration: shipped defaults, JSON files, then ``--set`` overrides."""

from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional

from dotenv import load_dotenv

from ofa.digest import json_digest
from ofa.resources import data_path

load_dotenv(".env.local")

logger = logging.getLogger(__name__)

# Configuration

DEFAULTS_FILE = data_path("defaults.json")
CONFIG_ENV = "OFA_CONFIG"
LOG_PATH = os.getenv("OFA_LOG_PATH")
DATA_ROOT = os.getenv("OFA_DATA_ROOT", "runs")


class ConfigError(ValueError):
    """Raised for unreadable config files, unknown keys and malformed overrides."""


def default_workers() -> int:
    value = os.getenv("OFA_WORKERS")
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            raise ConfigError(f"OFA_WORKERS must be an integer, got {value!r}")
    return os.cpu_count() or 1


@dataclass(frozen=True)
class RunConfig:
    """Merged configuration tree plus the digest recorded in every output."""

    tree: dict = field(default_factory=dict)
    sources: tuple = ()

    @property
    def digest(self) -> str:
        return json_digest(self.tree)

    @property
    def seed(self) -> int:
        return int(self.tree["seed"])

    def section(self, name: str) -> dict:
        if name not in self.tree:
            raise ConfigError(f"Unknown config section: {name}")
        return copy.deepcopy(self.tree[name])

    def get(self, dotted: str) -> Any:
        node: Any = self.tree
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"Unknown config key: {dotted}")
            node = node[part]
        return copy.deepcopy(node)

    def with_overrides(self, overrides: Iterable[str]) -> "RunConfig":
        overrides = list(overrides)
        tree = copy.deepcopy(self.tree)
        for item in overrides:
            key, value = parse_override(item)
            set_dotted(tree, key, value)
        return RunConfig(tree=tree, sources=self.sources + tuple(f"--set {o}" for o in overrides))


# Helper Functions


def _read_json(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def _merge(base: dict, layer: dict, prefix: str = "") -> None:
    """Recursively overlay ``layer`` onto ``base``; keys must already exist in ``base``."""
    for key, value in layer.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"Unknown config key: {dotted}")
        if isinstance(base[key], dict) and isinstance(value, dict) and not _is_open_mapping(dotted):
            _merge(base[key], value, prefix=f"{dotted}.")
        else:
            base[key] = copy.deepcopy(value)


# Sections whose keys are data (category names), not schema
_OPEN_MAPPINGS = ("offsets.categories",)


def _is_open_mapping(dotted: str) -> bool:
    return dotted in _OPEN_MAPPINGS


def parse_override(item: str) -> tuple[str, Any]:
    """Split ``dotted.key=value``; the value is parsed as JSON, else kept as a bare string."""
    if "=" not in item:
        raise ConfigError(f"Override must look like key=value: {item!r}")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"Override has an empty key: {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def set_dotted(tree: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = tree
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"Unknown config key: {'.'.join(parts[: i + 1])}")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or (leaf not in node and not _is_open_mapping(".".join(parts[:-1]))):
        raise ConfigError(f"Unknown config key: {dotted}")
    node[leaf] = value


def load_defaults() -> dict:
    return _read_json(DEFAULTS_FILE)


def load_config(
    config_paths: Optional[Iterable[str]] = None,
    overrides: Optional[Iterable[str]] = None,
    use_env: bool = True,
) -> RunConfig:
    """Build the run configuration.

    Args:
        config_paths: JSON files applied in order on top of the shipped defaults
        overrides: ``dotted.key=value`` strings applied last
        use_env: also apply the file named by ``OFA_CONFIG`` (after the explicit files)

    Returns:
        RunConfig with the merged tree

    Raises:
        ConfigError: on unreadable files, unknown keys or malformed overrides
    """
    tree = load_defaults()
    sources = [DEFAULTS_FILE]
    paths = list(config_paths or [])
    env_path = os.getenv(CONFIG_ENV) if use_env else None
    if env_path:
        paths.append(env_path)
    for path in paths:
        _merge(tree, _read_json(path))
        sources.append(path)
        logger.debug(f"load_config: applied {path}")
    config = RunConfig(tree=tree, sources=tuple(sources))
    overrides = list(overrides or [])
    if overrides:
        config = config.with_overrides(overrides)
    logger.debug(f"load_config: digest {config.digest}")
    return config
