"""Plain-text ``key=value`` configuration files.

One setting per line; blank lines and lines starting with ``#`` are ignored.
Values are converted according to the annotated dataclass field types.
"""

from __future__ import annotations

import dataclasses

from .errors import ConfigError


def parse_kv(text, source="<config>"):
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def format_kv(mapping):
    """Canonical form: sorted keys, one ``key=value`` per line."""
    return "".join(f"{k}={mapping[k]}\n" for k in sorted(mapping))


def read_kv_file(path):
    with open(path) as fh:
        return parse_kv(fh.read(), source=str(path))


def to_text(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(to_text(v) for v in value)
    return str(value)


def convert(value, annotation, key):
    """Convert text ``value`` to the type named by a dataclass annotation."""
    kind = annotation if isinstance(annotation, str) else getattr(annotation, "__name__", "")
    kind = kind.replace("typing.", "")
    try:
        if kind == "bool":
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "tuple":
            return tuple(int(v) for v in value.split(",") if v.strip())
        if kind == "str":
            return value
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {value!r}") from None
    raise ConfigError(f"unsupported config type {annotation!r} for {key}")


def dataclass_from_kv(cls, kv, prefix=""):
    """Build ``cls`` from string values; keys not naming a field are rejected."""
    hints = {f.name: f.type for f in dataclasses.fields(cls)}
    values = {}
    for key, raw in kv.items():
        name = key[len(prefix):] if prefix and key.startswith(prefix) else key
        if name not in hints:
            raise ConfigError(f"unknown config key {key!r}")
        values[name] = convert(raw, hints[name], key)
    return cls(**values)


def dataclass_to_kv(obj, prefix=""):
    return {f"{prefix}{f.name}": to_text(getattr(obj, f.name))
            for f in dataclasses.fields(obj)
            if not dataclasses.is_dataclass(getattr(obj, f.name))}

