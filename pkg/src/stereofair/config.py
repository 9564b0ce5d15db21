"""Flat ``key=value`` config files."""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    """Raised for missing, unknown or unparseable config keys."""


def read_config(path) -> dict[str, str]:
    """Parse a ``key=value`` file. Blank lines and ``#`` comments are skipped."""
    out: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key] = value
    return out


def write_config(path, values: dict) -> None:
    lines = [f"{k}={_fmt(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def parse_floats(value: str) -> list[float]:
    return [float(x) for x in value.replace(" ", "").split(",") if x]


def parse_ints(value: str) -> list[int]:
    return [int(x) for x in value.replace(" ", "").split(",") if x]


def coerce(values: dict[str, str], schema: dict, required=(), where="config") -> dict:
    """Convert string values using ``schema`` (key -> parser).

    Unknown keys and missing required keys raise ``ConfigError`` naming the key.
    """
    unknown = sorted(set(values) - set(schema))
    if unknown:
        raise ConfigError(f"{where}: unknown key {unknown[0]!r}")
    missing = [k for k in required if k not in values]
    if missing:
        raise ConfigError(f"{where}: missing key {missing[0]!r}")
    out = {}
    for key, raw in values.items():
        try:
            out[key] = schema[key](raw) if isinstance(raw, str) else raw
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {raw!r} ({exc})") from None
    return out
