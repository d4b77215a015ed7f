"""Configuration loading, overrides, and resolved-config persistence."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any

from pydantic import ValidationError

from magnetrec.errors import MagnetError
from magnetrec.models import RunConfig

RESOLVED_CONFIG_NAME = "config.resolved.json"
THREADS_ENV = "MAGNET_THREADS"


class ConfigError(MagnetError):
    """Raised when configuration is invalid or cannot be loaded."""

    exit_code = 4


class ConfigNotFoundError(ConfigError):
    """Raised when an explicitly named configuration file does not exist."""

    exit_code = 3


class UnknownConfigKeyError(ConfigError):
    """Raised when a config file or override names a key RunConfig lacks."""

    def __init__(self, keys: list[str]) -> None:
        self.keys = keys
        super().__init__(f"Unknown configuration key(s): {', '.join(sorted(keys))}")


def parse_override(item: str) -> tuple[str, Any]:
    """Parse a single ``key=value`` override.

    The value is read as a JSON literal when possible (``0.3``, ``true``,
    ``[10, 20]``, ``null``) and kept as a raw string otherwise.

    Raises:
        ConfigError: If the item has no ``=``.
    """
    if "=" not in item:
        msg = f"Invalid override '{item}' (expected KEY=VALUE)"
        raise ConfigError(msg)
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        msg = f"Invalid override '{item}' (empty key)"
        raise ConfigError(msg)
    try:
        value: Any = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def load_config(
    config_path: Path | None = None,
    overrides: list[str] | tuple[str, ...] = (),
    extra: dict[str, Any] | None = None,
) -> RunConfig:
    """Load a flat JSON config, apply overrides, and validate.

    Precedence from low to high: defaults, file, ``extra`` (CLI flags),
    ``--set`` overrides.

    Args:
        config_path: Optional JSON file with a flat object of config keys.
        overrides: ``key=value`` strings.
        extra: Values from dedicated CLI flags.

    Returns:
        The validated, frozen RunConfig.

    Raises:
        ConfigNotFoundError: If config_path does not exist.
        UnknownConfigKeyError: If any key is not a RunConfig field.
        ConfigError: If the file is not valid JSON or values fail validation.
    """
    data: dict[str, Any] = {}
    if config_path is not None:
        if not config_path.is_file():
            msg = f"Config file not found: {config_path}"
            raise ConfigNotFoundError(msg)
        try:
            raw = json.loads(config_path.read_text(encoding="utf-8"))
        except OSError as e:
            msg = f"Failed to read config file: {config_path}"
            raise ConfigError(msg) from e
        except json.JSONDecodeError as e:
            msg = f"Invalid JSON in config file: {config_path}\n{e}"
            raise ConfigError(msg) from e
        if not isinstance(raw, dict):
            msg = f"Config file must hold a JSON object: {config_path}"
            raise ConfigError(msg)
        data.update(raw)

    if extra:
        data.update(extra)
    for item in overrides:
        key, value = parse_override(item)
        data[key] = value

    unknown = [key for key in data if key not in RunConfig.model_fields]
    if unknown:
        raise UnknownConfigKeyError(unknown)

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        source = config_path if config_path is not None else "overrides"
        msg = f"Invalid configuration in {source}:\n{_format_validation_errors(e)}"
        raise ConfigError(msg) from e


def _format_validation_errors(error: ValidationError) -> str:
    """Format Pydantic validation errors for user-friendly display."""
    lines: list[str] = []
    for err in error.errors():
        loc = ".".join(str(part) for part in err["loc"]) or "config"
        lines.append(f"  - {loc}: {err['msg']}")
    return "\n".join(lines)


def canonical_json(config: RunConfig) -> str:
    return json.dumps(config.to_json_dict(), sort_keys=True, separators=(",", ":"))


def config_fingerprint(config: RunConfig) -> str:
    """SHA-256 of the canonical JSON form of the config."""
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def write_resolved_config(config: RunConfig, out_dir: Path) -> Path:
    """Write every effective value to ``config.resolved.json`` in out_dir."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_CONFIG_NAME
    path.write_text(
        json.dumps(config.to_json_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return path


def resolve_threads() -> int:
    """Thread cap from ``MAGNET_THREADS`` (default 1).

    Raises:
        ConfigError: If the variable is set to anything but a positive integer.
    """
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return 1
    try:
        threads = int(raw)
    except ValueError as e:
        msg = f"{THREADS_ENV} must be a positive integer, got '{raw}'"
        raise ConfigError(msg) from e
    if threads < 1:
        msg = f"{THREADS_ENV} must be a positive integer, got '{raw}'"
        raise ConfigError(msg)
    return threads
