"""Layered application configuration.

Precedence, highest first: command-line flags, environment variables
(``RAGFORGE_*``), a TOML config file, built-in defaults. Every run's
effective configuration is echoed into machine-readable outputs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from ragforge.clients.base import DEFAULT_INSTRUCTIONS, ClientConfig

ENV_PREFIX = "RAGFORGE_"

# TOML section -> field mapping; flat env names reuse the field names.
_SECTIONS = {
    "store": ("store_path", "collection_name"),
    "client": ("endpoint", "model_tag", "embed_dim", "timeout", "max_batch_size"),
    "pipeline": ("retrieve_n", "top_k", "score_threshold", "instruction"),
    "segmentation": ("tokenizer", "max_tokens"),
    "run": ("seed", "jobs"),
}

_FIELD_TO_SECTION = {
    field: section for section, names in _SECTIONS.items() for field in names
}


class ConfigError(Exception):
    """Invalid or unreadable configuration."""


@dataclass
class AppConfig:
    """Effective settings for one command run."""

    store_path: str = "store.rfvs"
    collection_name: str = "corpus"
    endpoint: str = "stub"
    model_tag: str = "stub-v1"
    embed_dim: int = 256
    timeout: float = 30.0
    max_batch_size: int = 64
    retrieve_n: int = 32
    top_k: int = 8
    score_threshold: float = 0.35
    instruction: str = DEFAULT_INSTRUCTIONS["qa"]
    tokenizer: str = "wordpunct"
    max_tokens: int = 512
    seed: int | None = None
    jobs: int | None = None

    def validate(self) -> None:
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be positive")
        if self.top_k < 1 or self.top_k > self.retrieve_n:
            raise ConfigError("require 1 <= top_k <= retrieve_n")
        if not -1.0 <= self.score_threshold <= 1.0:
            raise ConfigError("score_threshold must lie in [-1, 1]")
        if self.max_tokens < 16:
            raise ConfigError("max_tokens must be >= 16")
        if self.endpoint != "stub" and not self.endpoint.startswith(("http://", "https://")):
            raise ConfigError(f"endpoint must be 'stub' or an http(s) URL, got {self.endpoint!r}")
        if self.jobs is not None and self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    def client_config(self) -> ClientConfig:
        return ClientConfig(
            endpoint=self.endpoint,
            timeout=self.timeout,
            max_batch_size=self.max_batch_size,
            model_tag=self.model_tag,
            embed_dim=self.embed_dim,
        )

    def snapshot(self) -> dict[str, Any]:
        """Effective config as a JSON-friendly dict, for output echoing."""
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _coerce(name: str, raw: str, target_type: type) -> Any:
    try:
        if target_type is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        return target_type(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {name}={raw!r} as {target_type.__name__}") from exc


def _field_types() -> dict[str, type]:
    types: dict[str, type] = {}
    for f in fields(AppConfig):
        if f.name in ("seed", "jobs"):
            types[f.name] = int
        elif f.type in ("int",):
            types[f.name] = int
        elif f.type in ("float",):
            types[f.name] = float
        else:
            types[f.name] = str
    return types


def load_config(
    config_path: str | Path | None = None,
    env: dict[str, str] | None = None,
    overrides: dict[str, Any] | None = None,
) -> AppConfig:
    """Build the effective config from all four layers.

    ``overrides`` holds already-typed flag values (None entries are
    treated as unset). An explicitly requested config file that does not
    exist is an error; no file is fine.
    """
    env = os.environ if env is None else env
    config = AppConfig()
    types = _field_types()

    if config_path is None and env.get(ENV_PREFIX + "CONFIG"):
        config_path = env[ENV_PREFIX + "CONFIG"]
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = tomllib.loads(path.read_text(encoding="utf-8"))
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        for section, value in data.items():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            if not isinstance(value, dict):
                raise ConfigError(f"config section [{section}] must be a table")
            for key, item in value.items():
                if key not in _SECTIONS[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                setattr(config, key, types[key](item) if not isinstance(item, str) else item)

    for f in fields(AppConfig):
        env_name = ENV_PREFIX + f.name.upper()
        if env_name in env:
            setattr(config, f.name, _coerce(f.name, env[env_name], types[f.name]))

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if not hasattr(config, key):
            raise ConfigError(f"unknown config override {key!r}")
        setattr(config, key, value)

    config.validate()
    return config
