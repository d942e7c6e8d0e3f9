"""Deterministic serialization helpers.

Every JSON and CSV file the package writes goes through these functions so
that identical inputs produce byte-identical outputs: floats are rendered
with 17 significant digits, dict key order is insertion order, and line
endings are fixed to "\n". NaN and infinity are rejected rather than
silently emitted.
"""

from __future__ import annotations

import hashlib
import json
import math

import numpy as np


def format_float(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"non-finite value {x!r} cannot be serialized")
    return "%.17g" % x


def _emit(obj, parts: list, indent: int | None, level: int):
    pad = "" if indent is None else "\n" + " " * (indent * (level + 1))
    end_pad = "" if indent is None else "\n" + " " * (indent * level)
    if obj is None or isinstance(obj, (bool, np.bool_)):
        parts.append(json.dumps(None if obj is None else bool(obj)))
    elif isinstance(obj, (int, np.integer)):
        parts.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        parts.append(format_float(obj))
    elif isinstance(obj, str):
        parts.append(json.dumps(obj, ensure_ascii=False))
    elif isinstance(obj, dict):
        if not obj:
            parts.append("{}")
            return
        parts.append("{")
        for i, (key, value) in enumerate(obj.items()):
            if not isinstance(key, str):
                raise TypeError(f"JSON object keys must be str, got {type(key).__name__}")
            if i:
                parts.append("," if indent is None else ",")
            parts.append(pad + json.dumps(key, ensure_ascii=False) + (": " if indent else ":"))
            _emit(value, parts, indent, level + 1)
        parts.append(end_pad + "}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        items = obj.tolist() if isinstance(obj, np.ndarray) else obj
        if isinstance(items, np.generic):
            _emit(items, parts, indent, level)
            return
        if not len(items):
            parts.append("[]")
            return
        parts.append("[")
        for i, value in enumerate(items):
            if i:
                parts.append(",")
            parts.append(pad)
            _emit(value, parts, indent, level + 1)
        parts.append(end_pad + "]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, indent: int | None = None) -> str:
    """JSON text with fixed float formatting and insertion-order keys."""
    parts: list = []
    _emit(obj, parts, indent, 0)
    return "".join(parts)


def write_json(path, obj, indent: int | None = 1) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(obj, indent=indent))
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return format_float(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = str(value)
    if any(ch in value for ch in ",\"\n"):
        raise ValueError(f"CSV cell {value!r} needs quoting; use plain values")
    return value


def write_csv(path, header: list, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")


def config_hash(obj) -> str:
    return hashlib.sha256(dumps(obj).encode("utf-8")).hexdigest()
