"""Supervised distinguishers: multinomial logistic regression and ReLU MLPs."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .._mlp import MLP, TrainingRecord, fit, log_softmax
from .snr import N_BYTE_CLASSES

SCORE_FLOOR = float(np.log(1e-40))

REFERENCE_HIDDEN = {"logreg": (), "mlp": (1000, 1000, 100)}
REFERENCE_LR = {"logreg": 1e-5, "mlp": 1e-4}


@dataclass(frozen=True)
class NeuralHyper:
    """Training hyperparameters; ``None`` fields take the reference values for the kind."""

    epochs: int = 20
    batch_size: int = 512
    lr: float | None = None
    hidden: tuple[int, ...] | None = None
    seed: int = 0
    val_fraction: float = 0.1

    def resolved(self, kind: str) -> "NeuralHyper":
        if kind not in REFERENCE_HIDDEN:
            raise ValueError(f"unknown neural distinguisher kind {kind!r}")
        hidden = REFERENCE_HIDDEN[kind] if self.hidden is None else tuple(self.hidden)
        if kind == "logreg" and hidden:
            raise ValueError("logistic regression has no hidden layers")
        lr = REFERENCE_LR[kind] if self.lr is None else self.lr
        return NeuralHyper(self.epochs, self.batch_size, lr, hidden, self.seed, self.val_fraction)


@dataclass
class NeuralDistinguisher:
    kind: str
    net: MLP
    # input standardization learned on the profiling set
    mean: np.ndarray
    std: np.ndarray
    record: TrainingRecord | None = field(default=None, repr=False)

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(self.net.widths[1:-1])

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float32))
        if x.shape[1] != len(self.mean):
            raise ValueError(f"traces have {x.shape[1]} PoI samples, model expects {len(self.mean)}")
        return self.net.forward((x - self.mean) / self.std)


def train_distinguisher(x: np.ndarray, y: np.ndarray, kind: str = "mlp",
                        hyper: NeuralHyper = NeuralHyper()) -> NeuralDistinguisher:
    """Fit a 256-way classifier on PoI-reduced profiling traces.

    Adam on categorical cross-entropy; 10% of the set is held out to watch
    the validation loss. Raises ``TrainingDiverged`` on a non-finite loss.
    """
    h = hyper.resolved(kind)
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 1:
        x = x[:, None]
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    net = MLP.init(x.shape[1], h.hidden, N_BYTE_CLASSES, h.seed)
    rec = fit(net, (x - mean) / std, y, epochs=h.epochs, batch_size=h.batch_size, lr=h.lr,
              seed=h.seed + 1, val_fraction=h.val_fraction)
    return NeuralDistinguisher(kind, net, mean.astype(np.float32), std.astype(np.float32), rec)


def neural_log_scores(d: NeuralDistinguisher, x: np.ndarray) -> np.ndarray:
    """Log of the output softmax, clamped below at log(1e-40)."""
    return np.maximum(log_softmax(d.logits(x).astype(np.float64)), SCORE_FLOOR)
