"""Plain-text ``key = value`` experiment files.

Precedence is flags > file > built-in defaults: :func:`merge_settings`
takes the three layers and returns the effective mapping.
"""
import logging
import os
from typing import Any, Dict, Iterable, Mapping, Optional

from .compatibility import ConfigurationError

logger = logging.getLogger(__name__)

_TRUE = {"true", "yes", "on"}
_FALSE = {"false", "no", "off"}


def parse_value(text: str) -> Any:
    """Parse a config value as bool, int, float or string"""
    lowered = text.lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    return text


def load_config(path: str, allowed_keys: Optional[Iterable[str]] = None) -> Dict[str, Any]:
    """Read a key=value file; '#' starts a comment"""
    allowed = set(allowed_keys) if allowed_keys is not None else None
    settings: Dict[str, Any] = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigurationError(f"{path}: cannot read config file ({e.strerror})") from e

    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if not key:
            raise ConfigurationError(f"{path}:{lineno}: empty key")
        if allowed is not None and key not in allowed:
            raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
        settings[key] = parse_value(value)

    logger.debug("Loaded %d setting(s) from %s", len(settings), os.fspath(path))
    return settings


def merge_settings(
    defaults: Mapping[str, Any],
    file_settings: Optional[Mapping[str, Any]] = None,
    flags: Optional[Mapping[str, Any]] = None,
) -> Dict[str, Any]:
    """Merge defaults, file values and explicit flags (None flags are unset)"""
    merged = dict(defaults)
    if file_settings:
        merged.update(file_settings)
    if flags:
        merged.update({k: v for k, v in flags.items() if v is not None})
    return merged
