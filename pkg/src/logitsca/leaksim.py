"""Simulated EM leakage of the softmax max search.

A trace is a fixed grid of event windows separated by pads::

    pad | ev0 | pad | ev1 | pad | ... | ev(E-1) | pad

with three events per logit index (load_logit, load_base, store_base). A
store window that does not fire carries noise only, so every trace under one
config has the same length and the same window positions.

Leakage models
--------------
``hamming_weight``
    every sample of a window leaks ``HW(byte)``.
``identity_byte``
    every sample leaks ``byte / 255``.
``bit_weighted``
    sample ``s`` of window ``e`` leaks ``sum_b w[e, s, b] * bit_b(byte)`` with
    fixed Gaussian weights (seeded by ``weight_seed``, rows scaled so that
    ``sum_b w**2 == 8``). Different samples weight the bits differently, as
    the successive clock cycles of a real load do; the per-sample signal
    variance matches ``hamming_weight``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from ._codec import FormatError
from .qnn.model import QuantizedModel, forward, forward_int, quantize_pixels
from .qnn.softmax import EVENT_KINDS, as_logits, schedule_arrays
from .qnn.tensor import QuantizedTensor

LEAK_MODELS = ("hamming_weight", "identity_byte", "bit_weighted")

_NOISE_STREAM = 1
_LABEL_STREAM = 2

HW_TABLE = np.array([bin(b).count("1") for b in range(256)], dtype=np.float64)
BITS_TABLE = ((np.arange(256)[:, None] >> np.arange(8)) & 1).astype(np.float64)


@dataclass(frozen=True)
class LeakageConfig:
    samples_per_event: int = 5
    noise_sigma: float = 1.0
    leak_model: str = "hamming_weight"
    leak_amplitude: float = 1.0
    pad_samples: int = 3
    rng_seed: int = 0
    num_classes: int = 10
    # optional per-logit-index gain on the amplitude
    position_gains: tuple[float, ...] | None = None
    weight_seed: int = 0

    def __post_init__(self):
        if self.samples_per_event < 1:
            raise ValueError("samples_per_event must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.pad_samples < 0:
            raise ValueError("pad_samples must be >= 0")
        if self.leak_model not in LEAK_MODELS:
            raise ValueError(f"leak_model must be one of {LEAK_MODELS}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.position_gains is not None:
            gains = tuple(float(g) for g in self.position_gains)
            if len(gains) != self.num_classes:
                raise ValueError("position_gains needs one gain per logit index")
            object.__setattr__(self, "position_gains", gains)

    @property
    def num_events(self) -> int:
        return len(EVENT_KINDS) * self.num_classes

    @property
    def trace_length(self) -> int:
        return self.num_events * self.samples_per_event + (self.num_events + 1) * self.pad_samples

    def event_number(self, index: int, kind: str) -> int:
        return len(EVENT_KINDS) * index + EVENT_KINDS.index(kind)

    def window(self, index: int, kind: str) -> slice:
        start = self.pad_samples + self.event_number(index, kind) * (
            self.samples_per_event + self.pad_samples)
        return slice(start, start + self.samples_per_event)

    def event_mask(self) -> np.ndarray:
        """True at samples that belong to some event window."""
        m = np.zeros(self.trace_length, dtype=bool)
        for i in range(self.num_classes):
            for kind in EVENT_KINDS:
                m[self.window(i, kind)] = True
        return m

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["position_gains"] is not None:
            d["position_gains"] = list(d["position_gains"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LeakageConfig":
        d = dict(d)
        if d.get("position_gains") is not None:
            d["position_gains"] = tuple(d["position_gains"])
        return cls(**d)

    def fingerprint(self) -> str:
        """Identity of the simulated device and acquisition chain.

        ``rng_seed`` is excluded: it picks a noise realisation, not a device.
        """
        d = self.to_dict()
        d.pop("rng_seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @cached_property
    def _tables(self) -> np.ndarray:
        """Leak value per (event, byte, sample): shape ``(E, 256, spe)``."""
        spe = self.samples_per_event
        if self.leak_model == "hamming_weight":
            base = np.repeat(HW_TABLE[:, None], spe, axis=1)
            t = np.broadcast_to(base, (self.num_events, 256, spe))
        elif self.leak_model == "identity_byte":
            base = np.repeat((np.arange(256) / 255.0)[:, None], spe, axis=1)
            t = np.broadcast_to(base, (self.num_events, 256, spe))
        else:
            w = np.random.default_rng(self.weight_seed).standard_normal((self.num_events, spe, 8))
            w *= np.sqrt(8.0 / (w ** 2).sum(axis=-1, keepdims=True))
            t = np.einsum("vb,esb->evs", BITS_TABLE, w)
        gains = np.ones(self.num_classes) if self.position_gains is None else np.array(self.position_gains)
        gains = np.repeat(gains, len(EVENT_KINDS)) * self.leak_amplitude
        return (t * gains[:, None, None]).astype(np.float32)


@dataclass
class Trace:
    samples: np.ndarray
    label: np.ndarray | None = None  # raw logit bytes, profiling only
    input_id: object = None


@dataclass
class TraceSet:
    samples: np.ndarray  # (N, L) float32
    labels: np.ndarray | None  # (N, C) uint8, or None for attack sets
    fingerprint: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2:
            raise ValueError("samples must be (n_traces, trace_length)")
        if not np.isfinite(self.samples).all():
            raise ValueError("trace samples must be finite")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
            if self.labels.ndim != 2 or len(self.labels) != len(self.samples):
                raise ValueError("labels must be (n_traces, num_classes)")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, k: int) -> Trace:
        label = None if self.labels is None else self.labels[k]
        return Trace(self.samples[k], label, k)

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    @property
    def trace_length(self) -> int:
        return self.samples.shape[1]

    def head(self, n: int) -> "TraceSet":
        labels = None if self.labels is None else self.labels[:n]
        return TraceSet(self.samples[:n], labels, self.fingerprint, dict(self.metadata))


def signal_batch(z: np.ndarray, cfg: LeakageConfig) -> np.ndarray:
    """Noise-free traces for a batch of logit vectors ``(N, C)``."""
    z = as_logits(np.atleast_2d(z))
    if z.shape[1] != cfg.num_classes:
        raise ValueError(f"logit vectors have {z.shape[1]} entries, config expects {cfg.num_classes}")
    logit_b, base_b, stored = schedule_arrays(z)
    tables = cfg._tables
    out = np.zeros((len(z), cfg.trace_length), dtype=np.float32)
    for i in range(cfg.num_classes):
        for kind, byte in (("load_logit", logit_b[:, i]), ("load_base", base_b[:, i]),
                           ("store_base", logit_b[:, i])):
            e = cfg.event_number(i, kind)
            vals = tables[e][byte]
            if kind == "store_base":
                vals = vals * stored[:, i, None]
            out[:, cfg.window(i, kind)] = vals
    return out


def _add_noise(sig: np.ndarray, cfg: LeakageConfig, seed: int, first_index: int) -> np.ndarray:
    if cfg.noise_sigma == 0:
        return sig
    sigma = np.float32(cfg.noise_sigma)
    for k in range(len(sig)):
        rng = np.random.default_rng([seed, _NOISE_STREAM, first_index + k])
        sig[k] += sigma * rng.standard_normal(sig.shape[1], dtype=np.float32)
    return sig


def simulate_batch(z: np.ndarray, cfg: LeakageConfig, seed: int, first_index: int = 0) -> np.ndarray:
    """Noisy traces; trace ``k`` draws its noise from the stream ``(seed, first_index + k)``."""
    return _add_noise(signal_batch(z, cfg), cfg, seed, first_index)


def simulate_trace(z, cfg: LeakageConfig, rng: np.random.Generator | None = None) -> Trace:
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    sig = signal_batch(as_logits(z)[None], cfg)[0]
    if cfg.noise_sigma:
        sig += np.float32(cfg.noise_sigma) * rng.standard_normal(sig.shape, dtype=np.float32)
    return Trace(sig)


def capture_profiling_set(source: str, n: int, cfg: LeakageConfig, seed: int, *,
                          model: QuantizedModel | None = None,
                          inputs: np.ndarray | None = None) -> TraceSet:
    """Labeled traces from the open device.

    ``source="uniform"`` draws every logit byte i.i.d. uniform (the modified
    softmax on the open device); ``source="model"`` runs ``model`` on inputs
    drawn from ``inputs`` (pixel rows) and keeps its natural logit distribution.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng([seed, _LABEL_STREAM])
    meta = {"seed": seed, "source": source}
    if source == "uniform":
        labels = rng.integers(0, 256, size=(n, cfg.num_classes), dtype=np.uint8)
    elif source == "model":
        if model is None or inputs is None:
            raise ValueError("model-driven capture needs a model and inputs")
        pick = rng.integers(0, len(inputs), size=n)
        q = quantize_pixels(np.asarray(inputs)[pick], model.input_frac_bits).data
        labels = forward_int(model, q).view(np.uint8)
        meta["model"] = model.digest()
    else:
        raise ValueError(f"unknown logit source {source!r}")
    samples = simulate_batch(labels, cfg, seed)
    return TraceSet(samples, labels, cfg.fingerprint(), meta)


def capture_attack_set(device: QuantizedModel, x: QuantizedTensor, n: int,
                       cfg: LeakageConfig, seed: int) -> tuple[TraceSet, np.ndarray]:
    """``n`` unlabeled traces of one inference; returns ``(traces, true_logits)``.

    The true logits are handed back separately for evaluation and never stored
    in the trace set.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    z = forward(device, x)
    samples = simulate_batch(np.repeat(z[None], n, axis=0), cfg, seed)
    return TraceSet(samples, None, cfg.fingerprint(), {"seed": seed}), z


# -- LLTS binary trace-set files ----------------------------------------------

LLTS_MAGIC = b"LLTS"
LLTS_VERSION = 1
_LLTS_HEADER = struct.Struct("<4sHIIBB")


class TraceFormatError(FormatError):
    pass


def encode_llts(ts: TraceSet) -> bytes:
    n, length = ts.samples.shape
    c = 0 if ts.labels is None else ts.labels.shape[1]
    head = _LLTS_HEADER.pack(LLTS_MAGIC, LLTS_VERSION, n, length, int(ts.labeled), c)
    if ts.labels is None:
        body = ts.samples.astype("<f4").tobytes()
    else:
        rec = np.empty(n, dtype=[("s", "<f4", (length,)), ("y", "u1", (c,))])
        rec["s"] = ts.samples
        rec["y"] = ts.labels
        body = rec.tobytes()
    return head + body


def decode_llts(raw: bytes, name: str = "<bytes>") -> TraceSet:
    if len(raw) < _LLTS_HEADER.size:
        raise TraceFormatError(f"{name}: {len(raw)} bytes is shorter than the LLTS header")
    magic, version, n, length, labeled, c = _LLTS_HEADER.unpack_from(raw)
    if magic != LLTS_MAGIC:
        raise TraceFormatError(f"{name}: bad magic {magic!r}")
    if version != LLTS_VERSION:
        raise TraceFormatError(f"{name}: unsupported LLTS version {version} "
                               f"(reader supports {LLTS_VERSION})")
    per = 4 * length + (c if labeled else 0)
    expected = _LLTS_HEADER.size + n * per
    if len(raw) != expected:
        raise TraceFormatError(f"{name}: expected {expected} bytes, file has {len(raw)}")
    body = raw[_LLTS_HEADER.size:]
    if labeled:
        rec = np.frombuffer(body, dtype=[("s", "<f4", (length,)), ("y", "u1", (c,))], count=n)
        return TraceSet(rec["s"].astype(np.float32), rec["y"].copy())
    samples = np.frombuffer(body, dtype="<f4").reshape(n, length)
    return TraceSet(samples.astype(np.float32), None)


def write_llts(path, ts: TraceSet) -> None:
    Path(path).write_bytes(encode_llts(ts))


def read_llts(path) -> TraceSet:
    path = Path(path)
    return decode_llts(path.read_bytes(), str(path))
