"""Array <-> JSON helpers shared by every persisted document."""
from __future__ import annotations

import base64

import numpy as np


class FormatError(ValueError):
    pass


def b64(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a).tobytes()).decode("ascii")


def unb64(s: str, dtype, shape) -> np.ndarray:
    a = np.frombuffer(base64.b64decode(s), dtype=dtype)
    if a.size != int(np.prod(shape)):
        raise FormatError(f"array payload has {a.size} elements, shape {list(shape)} needs "
                          f"{int(np.prod(shape))}")
    return a.reshape(shape).copy()


def pack_array(a: np.ndarray, dtype: str) -> dict:
    a = np.asarray(a)
    return {"dtype": dtype, "shape": list(a.shape), "b64": b64(a.astype(dtype))}


def unpack_array(d: dict) -> np.ndarray:
    return unb64(d["b64"], np.dtype(d["dtype"]), tuple(d["shape"]))


def check_header(doc: dict, fmt: str, version: int) -> None:
    if not isinstance(doc, dict) or doc.get("format") != fmt:
        got = doc.get("format") if isinstance(doc, dict) else type(doc).__name__
        raise FormatError(f"expected a {fmt} document, got format={got!r}")
    if "version" not in doc:
        raise FormatError(f"{fmt} document has no version field")
    if doc["version"] != version:
        raise FormatError(f"unsupported {fmt} version {doc['version']} (reader supports {version})")
