from __future__ import annotations

import os
import re
from pathlib import Path
from typing import Any, Optional

import yaml
from pydantic import ValidationError

from app.errors import ConfigError
from app.models import Settings

_ENV_PATTERN = re.compile(r"\$\{([A-Z0-9_]+)(?::-([^}]*))?\}")

DEFAULT_SETTINGS_PATH = "config/settings.yaml"


def _resolve_env_string(value: str) -> str:
    def _replace(match: re.Match[str]) -> str:
        env_value = os.getenv(match.group(1))
        if env_value:
            return env_value
        return match.group(2) or ""

    return _ENV_PATTERN.sub(_replace, value)


def _resolve_env_value(value: Any) -> Any:
    if isinstance(value, str):
        return _resolve_env_string(value)
    if isinstance(value, dict):
        return {k: _resolve_env_value(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_resolve_env_value(v) for v in value]
    return value


def _load_yaml(path: str) -> dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping: {path}")
    return _resolve_env_value(data)


def _merge(base: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def build_settings(raw: dict[str, Any], overrides: Optional[dict[str, Any]] = None) -> Settings:
    data = _merge(raw, overrides or {})
    try:
        return Settings(**data)
    except ValidationError as exc:
        raise ConfigError(f"invalid settings: {exc}") from exc


def load_settings(
    path: Optional[str] = DEFAULT_SETTINGS_PATH,
    overrides: Optional[dict[str, Any]] = None,
) -> Settings:
    """读取 YAML 配置；path 为 None 或默认文件缺失时使用内置默认值。"""
    raw: dict[str, Any] = {}
    if path is not None:
        if path == DEFAULT_SETTINGS_PATH and not Path(path).exists():
            raw = {}
        else:
            raw = _load_yaml(path)
    return build_settings(raw, overrides)
