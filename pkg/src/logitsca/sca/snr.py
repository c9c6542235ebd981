from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_BYTE_CLASSES = 256


@dataclass
class SnrProfile:
    """Per-sample SNR of one logit byte.

    ``degenerate`` flags samples with zero within-class variance but a
    nonzero between-class variance; their value is ``+inf``.
    """

    values: np.ndarray
    position: int
    degenerate: np.ndarray

    @property
    def max_finite(self) -> float:
        finite = self.values[np.isfinite(self.values)]
        return float(finite.max()) if finite.size else 0.0

    @property
    def peak(self) -> float:
        return float(self.values.max())


def compute_snr(samples: np.ndarray, labels: np.ndarray, position: int = 0,
                chunk: int = 1024) -> SnrProfile:
    """Var over classes of the class means / mean over classes of the class variances.

    ``labels`` is ``(N,)`` or ``(N, C)``; in the latter case column
    ``position`` is the class variable. Classes with fewer than two traces
    are dropped from both terms. Within-class variances are unbiased.
    """
    samples = np.asarray(samples)
    y = np.asarray(labels)
    if y.ndim == 2:
        y = y[:, position]
    y = y.astype(np.int64)
    counts = np.bincount(y, minlength=N_BYTE_CLASSES)
    keep = counts >= 2
    if keep.sum() < 2:
        raise ValueError("SNR needs at least two classes with two or more traces each")

    order = np.argsort(y, kind="stable")
    ys = y[order]
    sel = keep[ys]
    order, ys = order[sel], ys[sel]
    classes = np.flatnonzero(keep)
    starts = np.searchsorted(ys, classes)
    n_c = counts[classes].astype(np.float64)

    out_num = np.empty(samples.shape[1])
    out_den = np.empty(samples.shape[1])
    for c0 in range(0, samples.shape[1], chunk):
        x = samples[order, c0:c0 + chunk].astype(np.float64)
        means = np.add.reduceat(x, starts, axis=0) / n_c[:, None]
        dev = x - np.repeat(means, counts[classes], axis=0)
        var = np.add.reduceat(dev * dev, starts, axis=0) / (n_c[:, None] - 1)
        out_num[c0:c0 + chunk] = means.var(axis=0)
        out_den[c0:c0 + chunk] = var.mean(axis=0)

    degenerate = (out_den == 0) & (out_num > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        snr = np.where(out_den > 0, out_num / np.where(out_den > 0, out_den, 1.0), 0.0)
    snr[degenerate] = np.inf
    return SnrProfile(snr, position, degenerate)


class EmptyPoiError(ValueError):
    def __init__(self, threshold: float, max_snr: float, position: int | None = None):
        where = "" if position is None else f" for logit {position}"
        super().__init__(f"no sample reaches SNR threshold {threshold:g}{where} "
                         f"(max observed SNR {max_snr:g})")
        self.threshold = threshold
        self.max_snr = max_snr
        self.position = position


@dataclass(frozen=True)
class PoiSelection:
    indices: np.ndarray
    threshold: float

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or (idx.size > 1 and np.any(np.diff(idx) <= 0)):
            raise ValueError("PoI indices must be strictly increasing")
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return len(self.indices)

    def reduce(self, samples: np.ndarray) -> np.ndarray:
        return np.asarray(samples)[..., self.indices]


def select_poi(snr: SnrProfile, threshold: float, max_points: int | None = None) -> PoiSelection:
    """Samples with SNR >= threshold, in trace order.

    ``max_points`` keeps only the strongest samples among those.
    """
    if not threshold > 0:
        raise ValueError("threshold must be > 0")
    idx = np.flatnonzero(snr.values >= threshold)
    if idx.size == 0:
        raise EmptyPoiError(threshold, snr.peak, snr.position)
    if max_points is not None and idx.size > max_points:
        strongest = np.argsort(-snr.values[idx], kind="stable")[:max_points]
        idx = np.sort(idx[strongest])
    return PoiSelection(idx, float(threshold))


def relative_threshold(snr: SnrProfile, fraction: float) -> float:
    """``fraction`` of the peak SNR; ``inf`` when some sample is noiseless."""
    if np.isinf(snr.peak):
        return float("inf")
    return fraction * snr.peak
