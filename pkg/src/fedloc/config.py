from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

try:  # Python 3.11+ stdlib
    import tomllib  # type: ignore[assignment]
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib  # type: ignore[assignment]

logger = logging.getLogger(__name__)

_LOG_LEVELS = {"DEBUG", "INFO", "WARNING", "ERROR"}


@dataclass
class Config:
    """Tool-level defaults; scenario definitions live in JSON documents."""

    jobs: int = 1
    bandwidth_bytes_per_s: float = 125_000.0
    output_dir: str = "results"
    log_level: str = "WARNING"


def load_config(root: Path) -> Config:
    """Load configuration from .fedlocrc or the [tool.fedloc] table of pyproject.toml."""

    root = root.resolve()
    config = Config()

    # .fedlocrc takes precedence.
    rc_path = root / ".fedlocrc"
    if rc_path.is_file():
        _apply_config_data(config, _load_toml(rc_path))
        return config

    pyproject = root / "pyproject.toml"
    if pyproject.is_file():
        tool_section = _load_toml(pyproject).get("tool", {}).get("fedloc")
        if tool_section:
            _apply_config_data(config, tool_section)
    return config


def _load_toml(path: Path) -> dict:
    try:
        return tomllib.loads(path.read_text(encoding="utf-8"))
    except Exception:
        logger.debug("ignoring unreadable config file %s", path)
        return {}


def _apply_config_data(config: Config, data: dict) -> None:
    jobs = data.get("jobs")
    if isinstance(jobs, int) and not isinstance(jobs, bool) and jobs > 0:
        config.jobs = jobs

    bandwidth = data.get("bandwidth_bytes_per_s")
    if isinstance(bandwidth, (int, float)) and not isinstance(bandwidth, bool) and bandwidth > 0:
        config.bandwidth_bytes_per_s = float(bandwidth)

    output_dir = data.get("output_dir")
    if isinstance(output_dir, str) and output_dir.strip():
        config.output_dir = output_dir

    level = data.get("log_level")
    if isinstance(level, str) and level.upper() in _LOG_LEVELS:
        config.log_level = level.upper()
