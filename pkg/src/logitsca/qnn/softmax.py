"""The NNOM-style q7 softmax and the instruction schedule of its max search.

The max search walks the logits once, comparing each byte against a running
``base``; a store happens only on a strict improvement, so the first
maximum wins. ``base`` starts at a -128 sentinel and index 0 always stores,
which reproduces the "max over vec_in" semantics with one uniform loop.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

MASK_WIDTH = 8
BASE_SENTINEL = -128

LOAD_LOGIT, LOAD_BASE, STORE_BASE = "load_logit", "load_base", "store_base"
EVENT_KINDS = (LOAD_LOGIT, LOAD_BASE, STORE_BASE)


class ScheduleEvent(NamedTuple):
    kind: str
    byte: int  # raw unsigned byte of the operand
    index: int


def as_logits(z) -> np.ndarray:
    """Signed view of a logit vector given either as int8 values or raw bytes."""
    z = np.asarray(z)
    if z.dtype == np.uint8:
        return z.view(np.int8)
    if z.dtype == np.int8:
        return z
    z = z.astype(np.int64)
    if z.min(initial=0) < -128 or z.max(initial=0) > 255:
        raise ValueError("logit values must be int8 or raw bytes")
    if z.max(initial=0) > 127:
        return z.astype(np.uint8).view(np.int8)
    return z.astype(np.int8)


def to_bytes(z) -> np.ndarray:
    return as_logits(z).view(np.uint8)


def nnom_softmax(z) -> np.ndarray:
    """Masked softmax: logits below ``max(z) - 8`` get probability 0."""
    z = as_logits(z).astype(np.float64)
    m = z.max(axis=-1, keepdims=True)
    keep = z >= m - MASK_WIDTH
    e = np.where(keep, np.exp(z - m), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(z) -> np.ndarray:
    """Plain float softmax, no masking."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def device_argmax(z) -> int:
    """Class reported by the device: first index holding the maximum."""
    return int(np.argmax(as_logits(z)))


def argmax_search_schedule(z) -> list[ScheduleEvent]:
    z = as_logits(z)
    events = []
    base = BASE_SENTINEL
    for i, v in enumerate(z.tolist()):
        events.append(ScheduleEvent(LOAD_LOGIT, v & 0xFF, i))
        events.append(ScheduleEvent(LOAD_BASE, base & 0xFF, i))
        if i == 0 or v > base:
            base = v
            events.append(ScheduleEvent(STORE_BASE, v & 0xFF, i))
    return events


def schedule_arrays(z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised schedule for a batch of logit vectors, shape ``(N, C)``.

    Returns ``(logit_bytes, base_bytes, stored)``: the byte loaded by each
    load_logit, the byte loaded by each load_base and whether a store fired.
    """
    z = as_logits(np.atleast_2d(z))
    n, c = z.shape
    base = np.full(n, BASE_SENTINEL, dtype=np.int16)
    bases = np.empty((n, c), dtype=np.int16)
    stored = np.empty((n, c), dtype=bool)
    for i in range(c):
        bases[:, i] = base
        s = z[:, i] > base if i else np.ones(n, dtype=bool)
        stored[:, i] = s
        base = np.where(s, z[:, i], base)
    return z.view(np.uint8), bases.astype(np.int8).view(np.uint8), stored
