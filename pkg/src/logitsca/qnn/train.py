from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .._mlp import MLP, fit
from .model import PIXEL_SCALE, QuantizedLayer, QuantizedModel, forward_int, quantize_pixels
from .tensor import frac_bits_for_range, quantize_ptq

log = logging.getLogger(__name__)


class VictimTrainingError(RuntimeError):
    def __init__(self, accuracy: float, required: float):
        super().__init__(f"victim reached {accuracy:.4f} held-out accuracy, "
                         f"{required:.2f} required")
        self.accuracy = accuracy
        self.required = required


@dataclass
class VictimReport:
    float_accuracy: float
    quantized_accuracy: float
    final_loss: float
    n_train: int
    n_holdout: int


def quantized_accuracy(model: QuantizedModel, pixels: np.ndarray, labels: np.ndarray) -> float:
    q = quantize_pixels(pixels, model.input_frac_bits).data
    pred = np.argmax(forward_int(model, q), axis=1)
    return float(np.mean(pred == labels))


def quantize_network(net: MLP, calib_pixels: np.ndarray, input_frac_bits: int = 7
                     ) -> QuantizedModel:
    """PTQ of a float MLP: per-tensor frac_bits from weight ranges and
    activation ranges observed on ``calib_pixels``."""
    h = np.asarray(calib_pixels, dtype=np.float64) / PIXEL_SCALE
    layers, shadow = [], []
    fx = input_frac_bits
    last = len(net.weights) - 1
    for k, (w_io, b) in enumerate(zip(net.weights, net.biases)):
        w = np.ascontiguousarray(w_io.T)
        act = "relu" if k < last else "none"
        h = h @ w.T + b
        if act == "relu":
            h = np.maximum(h, 0.0)
        fo = frac_bits_for_range(float(np.abs(h).max()))
        fw = frac_bits_for_range(float(np.abs(w).max()))
        fb = min(frac_bits_for_range(float(np.abs(b).max())), fx + fw)
        layers.append(QuantizedLayer(quantize_ptq(w, fw), quantize_ptq(b, fb), act, fo))
        shadow.append((w.astype(np.float32), b.astype(np.float32)))
        fx = fo
    return QuantizedModel(layers, input_frac_bits, shadow)


def train_victim(x: np.ndarray, y: np.ndarray, *, hidden: tuple[int, ...] = (32,),
                 seed: int = 0, epochs: int = 60, batch_size: int = 32, lr: float = 1e-3,
                 num_classes: int | None = None, holdout: tuple[np.ndarray, np.ndarray] | None = None,
                 holdout_fraction: float = 0.2, min_accuracy: float = 0.9
                 ) -> tuple[QuantizedModel, VictimReport]:
    """Float training with Adam, then post-training quantization to q7.

    ``x`` holds pixel intensities in [0, 255], one row per sample. Accuracy is
    measured on ``holdout`` (or a seeded split of ``x``) through the integer
    model; below ``min_accuracy`` a :class:`VictimTrainingError` is raised.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("dataset is empty")
    num_classes = int(y.max()) + 1 if num_classes is None else num_classes
    if y.min() < 0 or y.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")
    if holdout is None:
        order = np.random.default_rng(seed).permutation(len(x))
        n_hold = max(1, int(len(x) * holdout_fraction))
        holdout = (x[order[:n_hold]], y[order[:n_hold]])
        x, y = x[order[n_hold:]], y[order[n_hold:]]
    x_hold, y_hold = np.asarray(holdout[0], dtype=np.float64), np.asarray(holdout[1])

    net = MLP.init(x.shape[1], tuple(hidden), num_classes, seed)
    rec = fit(net, (x / PIXEL_SCALE).astype(np.float32), y, epochs=epochs,
              batch_size=batch_size, lr=lr, seed=seed + 1)
    model = quantize_network(net, x)
    float_acc = float(np.mean(np.argmax(net.forward(x_hold / PIXEL_SCALE), axis=1) == y_hold))
    q_acc = quantized_accuracy(model, x_hold, y_hold)
    report = VictimReport(float_acc, q_acc, rec.final_loss, len(x), len(x_hold))
    log.info("victim: float acc %.4f, int8 acc %.4f", float_acc, q_acc)
    if q_acc < min_accuracy:
        raise VictimTrainingError(q_acc, min_accuracy)
    return model, report
