"""Checkpoint files shared by the separation net and the velocity model.

Layout::

    ENVIRO-INFILL-CHECKPOINT 1
    kind=ses
    config.layers=2
    ...
    tensor <name> <d0,d1,...>
    ...
    END
    <payload: each tensor as little-endian float32, in header order>

Header values are JSON when they parse as JSON and raw text otherwise.
"""
import json
from pathlib import Path

import numpy as np

MAGIC = "ENVIRO-INFILL-CHECKPOINT 1"


def _encode(value):
    if isinstance(value, str):
        try:
            json.loads(value)
        except ValueError:
            return value
        return json.dumps(value)
    return json.dumps(value)


def _decode(text):
    try:
        return json.loads(text)
    except ValueError:
        return text


def save(path, meta, arrays):
    """Write ``meta`` (flat str -> JSON-able) and named arrays to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [MAGIC]
    for key, value in meta.items():
        if "\n" in key or "=" in key:
            raise ValueError(f"bad header key {key!r}")
        lines.append(f"{key}={_encode(value)}")
    payload = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f4")
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} {shape}")
        payload.append(np.ascontiguousarray(arr).tobytes())
    lines.append("END")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for chunk in payload:
            fh.write(chunk)
    tmp.replace(path)
    return path


def load(path):
    """Return ``(meta, arrays)`` from a checkpoint written by :func:`save`."""
    raw = Path(path).read_bytes()
    end = raw.index(b"\nEND\n")
    header = raw[:end].decode("utf-8").split("\n")
    if header[0] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {header[0]!r})")
    meta, specs = {}, []
    for line in header[1:]:
        if line.startswith("tensor "):
            _, name, shape = line.split(" ", 2)
            dims = tuple(int(d) for d in shape.split(",")) if shape else ()
            specs.append((name, dims))
        else:
            key, value = line.split("=", 1)
            meta[key] = _decode(value)
    offset = end + len(b"\nEND\n")
    arrays = {}
    for name, dims in specs:
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        arrays[name] = arr.reshape(dims).copy()
        offset += 4 * count
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return meta, arrays


def prefixed(meta, prefix):
    """Sub-dict of ``meta`` keys starting with ``prefix.``, prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in meta.items() if k.startswith(p)}
