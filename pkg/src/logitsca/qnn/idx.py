"""IDX files (the MNIST container): big-endian magic, u32 dims, ubyte payload."""
from __future__ import annotations

import struct
from importlib import resources
from pathlib import Path

import numpy as np

from .._codec import FormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
_NDIM = {IMAGES_MAGIC: 3, LABELS_MAGIC: 1}


class IdxFormatError(FormatError):
    pass


def parse_idx(raw: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(raw) < 4:
        raise IdxFormatError(f"{name}: file is {len(raw)} bytes, header needs at least 4")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic not in _NDIM:
        raise IdxFormatError(f"{name}: bad magic 0x{magic:08x} at offset 0 "
                             f"(expected 0x{IMAGES_MAGIC:08x} or 0x{LABELS_MAGIC:08x})")
    ndim = _NDIM[magic]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{name}: header truncated at offset {len(raw)}, needs {header} bytes")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    expected = int(np.prod(dims, dtype=np.int64))
    actual = len(raw) - header
    if actual != expected:
        raise IdxFormatError(
            f"{name}: payload at offset {header} is {actual} bytes, dims {list(dims)} "
            f"require {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims).copy()


def read_idx(path) -> np.ndarray:
    path = Path(path)
    return parse_idx(path.read_bytes(), str(path))


def encode_idx(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    if a.dtype != np.uint8:
        if a.min(initial=0) < 0 or a.max(initial=0) > 255:
            raise ValueError("IDX ubyte payload must lie in [0, 255]")
        a = a.astype(np.uint8)
    if a.ndim == 3:
        magic = IMAGES_MAGIC
    elif a.ndim == 1:
        magic = LABELS_MAGIC
    else:
        raise ValueError(f"IDX images are 3-D and labels 1-D, got {a.ndim}-D")
    return struct.pack(f">I{a.ndim}I", magic, *a.shape) + a.tobytes()


def write_idx(path, a: np.ndarray) -> None:
    Path(path).write_bytes(encode_idx(a))


def load_digits() -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Bundled 8x8 digits: ``(x_train, y_train, x_test, y_test)``, images flattened to 64 pixels."""
    base = resources.files("logitsca.qnn") / "data"
    out = []
    for split in ("train", "test"):
        imgs = parse_idx((base / f"digits8x8-{split}-images-idx3-ubyte").read_bytes())
        labels = parse_idx((base / f"digits8x8-{split}-labels-idx1-ubyte").read_bytes())
        out += [imgs.reshape(len(imgs), -1), labels.astype(np.int64)]
    return tuple(out)  # type: ignore[return-value]
