"""Compact deterministic JSON with 17-significant-digit reals.

The stdlib encoder cannot be told how to format floats, and the on-disk
formats here require full-precision round-trippable reals, so serialization
is done by hand for the small set of types we emit.
"""

from __future__ import annotations

import math


def _fmt_float(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        raise ValueError("non-finite real cannot be serialized")
    if x == int(x) and abs(x) < 1e16:
        return f"{x:.1f}"
    return format(x, ".17g")


def dumps(obj) -> str:
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, str):
        return '"' + obj.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(obj, (int,)):
        return str(obj)
    if isinstance(obj, float):
        return _fmt_float(obj)
    if isinstance(obj, dict):
        items = (f"{dumps(str(k))}:{dumps(v)}" for k, v in obj.items())
        return "{" + ",".join(items) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(dumps(v) for v in obj) + "]"
    # numpy scalars / arrays
    if hasattr(obj, "tolist"):
        return dumps(obj.tolist())
    raise TypeError(f"cannot serialize {type(obj).__name__}")
