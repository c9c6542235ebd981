"""Two-phase logit extraction: profile the open device, then read logits
off the target device's softmax traces.

The attacker side only ever sees trace sets. A :class:`SimulatedDevice`
stands in for the physical target; the extraction code calls nothing but
``acquire`` and ``fingerprint`` on it, so any object with those two methods
can be plugged in.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._codec import FormatError, check_header
from .leaksim import LeakageConfig, TraceSet, capture_profiling_set, simulate_batch
from .qnn.model import QuantizedModel, forward_int, quantize_pixels
from .qnn.softmax import nnom_softmax
from .qnn.tensor import QuantizedTensor
from .sca.attack import ProfiledScorer, map_accumulate, rank_hits
from .sca.io import scorer_from_doc, scorer_to_doc
from .sca.neural import NeuralHyper, train_distinguisher
from .sca.snr import (EmptyPoiError, PoiSelection, SnrProfile, compute_snr, relative_threshold,
                      select_poi)
from .sca.templates import fit_templates

log = logging.getLogger(__name__)

EXTRACTOR_FORMAT = "logitsca.extractor"
EXTRACTOR_VERSION = 1
SCORER_KINDS = ("template", "logreg", "mlp")

# Desk-scale network for the MLP distinguisher; the 1000/1000/100 network is
# selectable through NeuralHyper(hidden=...) but takes ~15x longer to train.
DESK_MLP_HIDDEN = (256, 256, 64)
# Learning rates for the desk-scale profiling set (~40x fewer Adam steps than
# a 1.9M-trace campaign).
DESK_LR = {"logreg": 1e-3, "mlp": 1e-4}


class FingerprintMismatch(ValueError):
    def __init__(self, expected: str, got: str):
        super().__init__(f"trace set fingerprint {got!r} does not match the profiled "
                         f"configuration {expected!r}")
        self.expected = expected
        self.got = got


def desk_hyper(kind: str, seed: int = 0, **overrides) -> NeuralHyper:
    hidden = DESK_MLP_HIDDEN if kind == "mlp" else ()
    base = dict(hidden=hidden, lr=DESK_LR[kind], seed=seed)
    base.update(overrides)
    return NeuralHyper(**base)


def _as_input(model_or_frac, x) -> QuantizedTensor:
    if isinstance(x, QuantizedTensor):
        return x
    return quantize_pixels(x, model_or_frac)


class SimulatedDevice:
    """Target device running ``model`` and leaking through ``cfg``.

    Every acquired trace gets its own noise stream, numbered by the device's
    running acquisition count, so a device replays identically from the same
    ``seed``.
    """

    def __init__(self, model: QuantizedModel, cfg: LeakageConfig, seed: int):
        self._model = model
        self._cfg = cfg
        self._seed = int(seed)
        self.acquired = 0

    def fingerprint(self) -> str:
        return self._cfg.fingerprint()

    def _logits(self, xs) -> np.ndarray:
        xs = [_as_input(self._model.input_frac_bits, x) for x in xs]
        for q in xs:
            if q.frac_bits != self._model.input_frac_bits or q.shape != (self._model.n_inputs,):
                raise ValueError("input does not match the device's model")
        return forward_int(self._model, np.stack([q.data for q in xs]))

    def acquire(self, xs, n: int) -> TraceSet:
        """``n`` traces per input, grouped by input: shape ``(len(xs) * n, L)``."""
        if n < 1:
            raise ValueError("n must be >= 1")
        z = np.repeat(self._logits(xs), n, axis=0)
        samples = simulate_batch(z, self._cfg, self._seed, first_index=self.acquired)
        self.acquired += len(z)
        return TraceSet(samples, None, self._cfg.fingerprint())

    # evaluation channel, never called on the attacker's code path
    def true_logits(self, x) -> np.ndarray:
        return self._logits([x])[0]


@dataclass
class ProfiledExtractor:
    scorers: list[ProfiledScorer]
    fingerprint: str
    traces_per_query: int = 5
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.scorers:
            raise ValueError("extractor needs one scorer per logit position")
        if self.traces_per_query < 1:
            raise ValueError("traces_per_query must be >= 1")

    @property
    def num_positions(self) -> int:
        return len(self.scorers)

    @property
    def kind(self) -> str:
        return self.scorers[0].kind

    def log_scores(self, samples: np.ndarray) -> np.ndarray:
        """Per-trace log-scores for every position: ``(num_positions, N, 256)``."""
        return np.stack([s(samples) for s in self.scorers])


@dataclass
class ExtractionResult:
    logits: np.ndarray  # int8 (C,)
    scores: np.ndarray  # (C, 256) accumulated log-scores
    traces_consumed: int
    correct: np.ndarray | None = None  # per-position, evaluation mode only

    @property
    def all_correct(self) -> bool | None:
        return None if self.correct is None else bool(self.correct.all())


def select_positions_poi(ts: TraceSet, poi_fraction: float = 0.1,
                         max_points: int | None = None) -> tuple[list[PoiSelection], list[SnrProfile]]:
    """Per-position SNR and PoI on a labeled set.

    PoI: samples whose SNR reaches ``poi_fraction`` of that position's peak
    (every noiseless sample when the peak is infinite), optionally capped at
    the ``max_points`` strongest.
    """
    if not 0 < poi_fraction <= 1:
        raise ValueError("poi_fraction must be in (0, 1]")
    pois, snrs = [], []
    for pos in range(ts.labels.shape[1]):
        snr = compute_snr(ts.samples, ts.labels, pos)
        thr = relative_threshold(snr, poi_fraction)
        if not thr > 0:
            raise EmptyPoiError(thr, snr.peak, pos)
        try:
            poi = select_poi(snr, thr, max_points)
        except EmptyPoiError as exc:
            raise EmptyPoiError(exc.threshold, exc.max_snr, pos) from None
        log.info("position %d: %d PoI, peak SNR %.3g", pos, len(poi), snr.peak)
        pois.append(poi)
        snrs.append(snr)
    return pois, snrs


def profile(cfg: LeakageConfig, n_profiling: int, kind: str = "mlp", seed: int = 0, *,
            poi_fraction: float = 0.1, max_points: int | None = None,
            hyper: NeuralHyper | None = None, reg_epsilon: float = 1e-6,
            traces_per_query: int = 5, source: str = "uniform",
            model: QuantizedModel | None = None, inputs: np.ndarray | None = None,
            profiling_set: TraceSet | None = None,
            pois: list[PoiSelection] | None = None) -> ProfiledExtractor:
    """Capture a labeled set on the open device and fit one scorer per position.

    ``profiling_set`` reuses an existing capture and ``pois`` an existing PoI
    selection (see :func:`select_positions_poi`), e.g. to fit several scorer
    kinds on identical inputs.
    """
    if kind not in SCORER_KINDS:
        raise ValueError(f"scorer kind must be one of {SCORER_KINDS}")
    if n_profiling < 256 * cfg.num_classes:
        log.warning("only %d profiling traces; %d or more recommended",
                    n_profiling, 256 * cfg.num_classes)
    if profiling_set is None:
        ts = capture_profiling_set(source, n_profiling, cfg, seed, model=model, inputs=inputs)
    else:
        if profiling_set.fingerprint != cfg.fingerprint():
            raise FingerprintMismatch(cfg.fingerprint(), profiling_set.fingerprint)
        ts = profiling_set.head(n_profiling)
    if hyper is None and kind != "template":
        hyper = desk_hyper(kind, seed)
    if pois is None:
        pois, _ = select_positions_poi(ts, poi_fraction, max_points)
    if len(pois) != cfg.num_classes:
        raise ValueError("need one PoI selection per logit position")

    scorers = []
    for pos, poi in enumerate(pois):
        x = poi.reduce(ts.samples)
        y = ts.labels[:, pos]
        if kind == "template":
            model_ = fit_templates(x, y, reg_epsilon)
        else:
            model_ = train_distinguisher(x, y, kind, hyper)
        scorers.append(ProfiledScorer(poi, model_))
    prov = {"seed": seed, "n_profiling": len(ts), "kind": kind, "source": source,
            "poi_fraction": poi_fraction, "max_points": max_points}
    if hyper is not None and kind != "template":
        h = hyper.resolved(kind)
        prov["hyper"] = {"epochs": h.epochs, "batch_size": h.batch_size, "lr": h.lr,
                         "hidden": list(h.hidden), "seed": h.seed}
    return ProfiledExtractor(scorers, cfg.fingerprint(), traces_per_query, prov)


def estimate_logits(ex: ProfiledExtractor, traces: TraceSet) -> ExtractionResult:
    """MAP estimate of every logit byte from one input's attack traces."""
    if traces.fingerprint != ex.fingerprint:
        raise FingerprintMismatch(ex.fingerprint, traces.fingerprint)
    est = np.empty(ex.num_positions, dtype=np.uint8)
    acc = np.empty((ex.num_positions, 256))
    for pos, scorer in enumerate(ex.scorers):
        est[pos], acc[pos] = map_accumulate(traces, scorer)
    return ExtractionResult(est.view(np.int8), acc, len(traces))


def _estimate_many(ex: ProfiledExtractor, traces: TraceSet, k: int, n: int) -> np.ndarray:
    """MAP estimates for ``k`` inputs captured back to back, ``n`` traces each."""
    if traces.fingerprint != ex.fingerprint:
        raise FingerprintMismatch(ex.fingerprint, traces.fingerprint)
    scores = ex.log_scores(traces.samples).reshape(ex.num_positions, k, n, 256)
    return np.argmax(scores.sum(axis=2), axis=-1).T.astype(np.uint8).view(np.int8)


def extract_logits(target: QuantizedModel, x, ex: ProfiledExtractor, cfg: LeakageConfig,
                   seed: int, n: int | None = None, evaluate: bool = False) -> ExtractionResult:
    """Capture ``n`` traces of ``target`` on ``x`` and estimate its logits.

    With ``evaluate`` the estimate is compared to the true logits afterwards;
    the estimate itself never depends on them.
    """
    if cfg.fingerprint() != ex.fingerprint:
        raise FingerprintMismatch(ex.fingerprint, cfg.fingerprint())
    n = ex.traces_per_query if n is None else n
    device = SimulatedDevice(target, cfg, seed)
    res = estimate_logits(ex, device.acquire([x], n))
    if evaluate:
        res.correct = res.logits == device.true_logits(x)
    return res


class LogitOracle:
    """Black-box logit access through side-channel extraction.

    Each query captures ``n`` fresh traces of the device; ``traces`` counts
    every trace captured through this oracle (one capture serves all
    positions).
    """

    def __init__(self, ex: ProfiledExtractor, device, n: int | None = None):
        if device.fingerprint() != ex.fingerprint:
            raise FingerprintMismatch(ex.fingerprint, device.fingerprint())
        self.ex = ex
        self.device = device
        self.n = ex.traces_per_query if n is None else int(n)
        self.queries = 0
        self.traces = 0

    def query_batch(self, xs) -> tuple[np.ndarray, np.ndarray]:
        """Estimated logits ``(k, C)`` and attacker-side masked softmax ``(k, C)``."""
        xs = list(xs)
        ts = self.device.acquire(xs, self.n)
        z = _estimate_many(self.ex, ts, len(xs), self.n)
        self.queries += len(xs)
        self.traces += len(ts)
        return z, nnom_softmax(z)

    def __call__(self, x) -> tuple[np.ndarray, np.ndarray, int]:
        z, p = self.query_batch([x])
        return z[0], p[0], self.n


def logit_oracle(ex: ProfiledExtractor, target: QuantizedModel, cfg: LeakageConfig,
                 seed: int, n: int | None = None) -> LogitOracle:
    return LogitOracle(ex, SimulatedDevice(target, cfg, seed), n)


class ExactOracle:
    """Direct logit access (no side channel); counts queries only."""

    def __init__(self, model: QuantizedModel):
        self.model = model
        self.n = 0
        self.queries = 0
        self.traces = 0

    def query_batch(self, xs) -> tuple[np.ndarray, np.ndarray]:
        xs = [_as_input(self.model.input_frac_bits, x).data for x in xs]
        z = forward_int(self.model, np.stack(xs))
        self.queries += len(xs)
        return z, nnom_softmax(z)

    def __call__(self, x):
        z, p = self.query_batch([x])
        return z[0], p[0], 0


# -- evaluation ---------------------------------------------------------------

def extraction_hits(ex: ProfiledExtractor, cfg: LeakageConfig, max_traces: int, repeats: int,
                    seed: int, logits: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Hit matrix ``(repeats, positions, max_traces)`` over independent attacks.

    Attack ``r`` targets the logit vector ``logits[r]`` (default: drawn
    uniformly), captures ``max_traces`` fresh traces and checks every
    position's MAP estimate after each prefix. Returns ``(hits, logits)``.
    """
    if cfg.fingerprint() != ex.fingerprint:
        raise FingerprintMismatch(ex.fingerprint, cfg.fingerprint())
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    seeds = np.random.SeedSequence(seed).generate_state(repeats)
    if logits is None:
        logits = np.random.default_rng([seed, 7]).integers(
            0, 256, size=(repeats, ex.num_positions), dtype=np.uint8)
    logits = np.asarray(logits).astype(np.int64) % 256
    hits = np.zeros((repeats, ex.num_positions, max_traces), dtype=bool)
    for r, s in enumerate(seeds):
        z = np.repeat(logits[r:r + 1].astype(np.uint8), max_traces, axis=0)
        samples = simulate_batch(z, cfg, int(s))
        hits[r] = rank_hits(ex.log_scores(samples), logits[r])
    return hits, logits.astype(np.uint8)


def extraction_success_curves(ex: ProfiledExtractor, cfg: LeakageConfig, max_traces: int,
                              repeats: int, seed: int) -> np.ndarray:
    """Success rate per position and trace count, shape ``(positions, max_traces)``."""
    hits, _ = extraction_hits(ex, cfg, max_traces, repeats, seed)
    return hits.mean(axis=0)


# -- bundle files ---------------------------------------------------------------

def extractor_to_doc(ex: ProfiledExtractor, cfg: LeakageConfig | None = None) -> dict:
    doc = {"format": EXTRACTOR_FORMAT, "version": EXTRACTOR_VERSION,
           "fingerprint": ex.fingerprint, "traces_per_query": ex.traces_per_query,
           "provenance": ex.provenance,
           "positions": [scorer_to_doc(s) for s in ex.scorers]}
    if cfg is not None:
        doc["leakage"] = cfg.to_dict()
    return doc


def extractor_from_doc(doc: dict) -> ProfiledExtractor:
    check_header(doc, EXTRACTOR_FORMAT, EXTRACTOR_VERSION)
    scorers = [scorer_from_doc(d) for d in doc["positions"]]
    return ProfiledExtractor(scorers, doc["fingerprint"], int(doc["traces_per_query"]),
                             dict(doc.get("provenance", {})))


def dumps_extractor(ex: ProfiledExtractor, cfg: LeakageConfig | None = None) -> str:
    return json.dumps(extractor_to_doc(ex, cfg), indent=1, sort_keys=True)


def save_extractor(ex: ProfiledExtractor, path, cfg: LeakageConfig | None = None) -> None:
    Path(path).write_text(dumps_extractor(ex, cfg))


def load_extractor(path) -> ProfiledExtractor:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    return extractor_from_doc(doc)
