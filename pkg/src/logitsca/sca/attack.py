"""Exploitation phase: scoring, MAP accumulation and success rate."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .neural import NeuralDistinguisher, neural_log_scores
from .snr import PoiSelection
from .templates import TemplateModel, template_log_scores

Distinguisher = Union[TemplateModel, NeuralDistinguisher]


def kind_of(model: Distinguisher) -> str:
    return "template" if isinstance(model, TemplateModel) else model.kind


@dataclass
class ProfiledScorer:
    """A fitted distinguisher bound to the PoI it was trained on.

    Calling it on full traces ``(N, L)`` returns log-scores ``(N, 256)``.
    """

    poi: PoiSelection
    model: Distinguisher

    @property
    def kind(self) -> str:
        return kind_of(self.model)

    def __call__(self, samples: np.ndarray) -> np.ndarray:
        x = self.poi.reduce(np.atleast_2d(samples))
        if isinstance(self.model, TemplateModel):
            return template_log_scores(self.model, x)
        return neural_log_scores(self.model, x)


def map_accumulate(traces, scorer: Callable[[np.ndarray], np.ndarray]) -> tuple[int, np.ndarray]:
    """Sum per-trace log-scores and return ``(argmax, accumulated scores)``.

    ``traces`` is a TraceSet or a ``(N, L)`` array; ties go to the lowest class.
    """
    samples = getattr(traces, "samples", traces)
    samples = np.atleast_2d(samples)
    if len(samples) == 0:
        raise ValueError("need at least one trace")
    acc = np.asarray(scorer(samples), dtype=np.float64).sum(axis=0)
    return int(np.argmax(acc)), acc


def rank_hits(scores: np.ndarray, true_byte) -> np.ndarray:
    """``scores`` is ``(..., n, 256)`` per-trace log-scores.

    Returns booleans ``(..., n)``: whether MAP over the first ``k + 1``
    traces recovers ``true_byte`` (broadcast over the leading axes).
    """
    acc = np.cumsum(scores, axis=-2)
    return np.argmax(acc, axis=-1) == np.asarray(true_byte)[..., None]


def success_rate_curve(attack_factory: Callable[[int], np.ndarray], true_byte: int,
                       max_traces: int, repeats: int, seed: int) -> np.ndarray:
    """Entry ``k``: fraction of ``repeats`` fresh attack sets whose first
    ``k + 1`` traces MAP-decode to ``true_byte``.

    ``attack_factory(seed)`` must return per-trace log-scores ``(max_traces, 256)``
    for a new, independently drawn attack set.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    seeds = np.random.SeedSequence(seed).generate_state(repeats)
    hits = np.zeros(max_traces)
    for s in seeds:
        scores = np.asarray(attack_factory(int(s)), dtype=np.float64)
        if scores.shape != (max_traces, 256):
            raise ValueError(f"attack factory returned shape {scores.shape}, "
                             f"expected ({max_traces}, 256)")
        hits += rank_hits(scores, true_byte)
    return hits / repeats


def paired_noninferiority_pvalue(a_hits: np.ndarray, b_hits: np.ndarray) -> float:
    """One-sided sign test on paired outcomes; small p means A is worse than B.

    Only discordant pairs count: under H0 (A no worse than B) "B wins" is at
    most as likely as "A wins".
    """
    from scipy.stats import binomtest

    a = np.asarray(a_hits, dtype=bool)
    b = np.asarray(b_hits, dtype=bool)
    b_only = int(np.sum(b & ~a))
    a_only = int(np.sum(a & ~b))
    if a_only + b_only == 0:
        return 1.0
    return float(binomtest(b_only, a_only + b_only, 0.5, alternative="greater").pvalue)
