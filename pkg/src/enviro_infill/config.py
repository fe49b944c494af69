"""Plain-text key-value configuration files.

One ``key = value`` per line, ``#`` starts a comment, dotted keys group
settings (``model.layers = 4``).  Values are read as JSON where possible
(numbers, booleans, lists) and kept as strings otherwise.
"""
import json
from pathlib import Path


def parse_value(text):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return json.loads(text)
    except ValueError:
        return text


def loads(text):
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def load(path):
    return loads(Path(path).read_text())


def dumps(mapping):
    return "".join(f"{k} = {json.dumps(v) if not isinstance(v, str) else v}\n" for k, v in mapping.items())


def section(mapping, prefix):
    p = prefix + "."
    return {k[len(p):]: v for k, v in mapping.items() if k.startswith(p)}


def merge(*layers):
    """Later layers override earlier ones; ``None`` values are skipped."""
    out = {}
    for layer in layers:
        for k, v in (layer or {}).items():
            if v is not None:
                out[k] = v
    return out
