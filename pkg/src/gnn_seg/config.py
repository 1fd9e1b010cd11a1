from __future__ import annotations

import json
import os
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any, cast

from gnn_seg.exceptions import ConfigError

PROFILE_VALUES = ("local", "dev", "prod")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def _read_dotenv_file(path: Path) -> dict[str, str]:
    """
    Minimal dotenv reader:
    - supports KEY=VALUE
    - ignores empty lines + comments starting with #
    - does not expand variables (keep it deterministic)
    """
    data: dict[str, str] = {}
    if not path.exists():
        return data

    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            continue
        k, v = line.split("=", 1)
        key = k.strip()
        val = v.strip().strip('"').strip("'")
        if key:
            data[key] = val
    return data


def _merge_env(base: Mapping[str, str], overlay: Mapping[str, str]) -> dict[str, str]:
    merged = dict(base)
    merged.update({k: v for k, v in overlay.items() if v is not None})
    return merged


def _get_profile(env: Mapping[str, str]) -> str:
    profile = (env.get("GNNSEG_PROFILE") or "local").strip().lower()
    if profile not in PROFILE_VALUES:
        raise ConfigError(
            f"Invalid GNNSEG_PROFILE='{profile}'. Expected one of: {', '.join(PROFILE_VALUES)}"
        )
    return profile


def _as_bool(v: str | None, default: bool = False) -> bool:
    if v is None:
        return default
    return v.strip().lower() in {"1", "true", "yes", "y", "on"}


@dataclass(frozen=True)
class AppConfig:
    profile: str
    debug: bool
    log_level: str
    runs_dir: Path

    def to_safe_dict(self) -> dict[str, str]:
        return {
            "GNNSEG_PROFILE": self.profile,
            "GNNSEG_DEBUG": str(self.debug),
            "GNNSEG_LOG_LEVEL": self.log_level,
            "GNNSEG_RUNS_DIR": str(self.runs_dir),
        }


def load_config(
    *,
    env: Mapping[str, str] | None = None,
    base_dir: Path | None = None,
) -> AppConfig:
    """
    Loads application config with profile support.

    Priority:
      1) OS env
      2) .env (if exists)
      3) .env.<profile> (if exists) overrides .env

    dotenv files only populate *missing* env vars (OS env is never overwritten).
    """
    env0: Mapping[str, str] = os.environ if env is None else env
    profile = _get_profile(env0)

    root = base_dir or Path.cwd()

    dotenv_base = _read_dotenv_file(root / ".env")
    dotenv_profile = _read_dotenv_file(root / f".env.{profile}")

    merged = dict(env0)
    for k, v in _merge_env(dotenv_base, dotenv_profile).items():
        merged.setdefault(k, v)

    debug = _as_bool(merged.get("GNNSEG_DEBUG"), default=(profile != "prod"))
    log_level = (
        (merged.get("GNNSEG_LOG_LEVEL") or ("INFO" if profile == "prod" else "DEBUG"))
        .strip()
        .upper()
    )
    if log_level not in LOG_LEVELS:
        raise ConfigError(
            f"Invalid GNNSEG_LOG_LEVEL='{log_level}'. Expected one of: {', '.join(LOG_LEVELS)}"
        )

    runs_dir = Path((merged.get("GNNSEG_RUNS_DIR") or "runs").strip())

    return AppConfig(
        profile=profile,
        debug=debug,
        log_level=log_level,
        runs_dir=runs_dir,
    )


def load_config_file(path: Path) -> dict[str, Any]:
    """Read a JSON or YAML mapping from disk (YAML for any non-.json suffix)."""
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")

    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in {path}: {e}") from e
    else:
        import yaml

        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"invalid YAML in {path}: {e}") from e

    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config must be a mapping at the top level: {path}")
    return cast(dict[str, Any], data)
