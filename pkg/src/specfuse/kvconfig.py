"""Flat key=value text files, used for configs, manifests and checkpoints.

Format: one `key = value` pair per line, `#` starts a comment, blank lines
ignored. Values stay strings here; callers coerce with the helpers below.
"""

from __future__ import annotations

from .errors import ConfigError


def parse_kv_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def parse_kv_file(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv_text(fh.read())


def format_kv(mapping: dict) -> str:
    lines = [f"{key} = {value}" for key, value in mapping.items()]
    return "\n".join(lines) + "\n"


def coerce(value: str, like):
    """Parse `value` with the type of the default `like`."""
    if isinstance(like, bool):  # before int: bool is an int subclass
        low = value.lower()
        if low in ("1", "true", "on", "yes"):
            return True
        if low in ("0", "false", "off", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if isinstance(like, int):
        try:
            return int(value)
        except ValueError as exc:
            raise ConfigError(f"expected an integer, got {value!r}") from exc
    if isinstance(like, float):
        try:
            return float(value)
        except ValueError as exc:
            raise ConfigError(f"expected a number, got {value!r}") from exc
    return value
