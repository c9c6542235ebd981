"""Integer inference for small fully-connected q7 networks.

Arithmetic follows the usual NNOM/CMSIS fully-connected kernel:

* accumulate ``sum(w * x)`` in wide integers (scale ``2**-(fw + fx)``),
* add the bias shifted left by ``fw + fx - fb``,
* shift right by ``fw + fx - fo`` rounding half up, saturate to int8,
* apply ReLU if the layer has one.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .._codec import FormatError, b64 as _b64, check_header, unb64 as _unb64
from .tensor import Q7_MAX, Q7_MIN, QuantizedTensor, quantize_ptq

MODEL_FORMAT = "logitsca.qnn-model"
MODEL_VERSION = 1
ACTIVATIONS = ("relu", "none")

# Native pixel range fed to the device; pixels map to int8 as p / 256 * 2**7.
PIXEL_MAX = 255.0
PIXEL_SCALE = 256.0


class ModelFormatError(FormatError):
    pass


@dataclass(frozen=True)
class QuantizedLayer:
    weight: QuantizedTensor  # (out, in)
    bias: QuantizedTensor  # (out,)
    activation: str
    output_frac_bits: int

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.data.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("weight must be (out, in) and bias (out,)")
        if not 0 <= self.output_frac_bits <= 7:
            raise ValueError("output_frac_bits must be in [0, 7]")

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class QuantizedModel:
    layers: list[QuantizedLayer]
    input_frac_bits: int = 7
    # Float weights the int8 model was quantized from, as (W (out, in), b) pairs.
    shadow: list[tuple[np.ndarray, np.ndarray]] | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError(f"layer shapes not composable: {a.n_out} -> {b.n_in}")
        for layer, fi in zip(self.layers, self.frac_chain()[:-1]):
            if layer.bias.frac_bits > fi + layer.weight.frac_bits:
                raise ValueError("bias frac_bits exceeds accumulator frac_bits")

    @property
    def n_inputs(self) -> int:
        return self.layers[0].n_in

    @property
    def num_classes(self) -> int:
        return self.layers[-1].n_out

    @property
    def output_frac_bits(self) -> int:
        return self.layers[-1].output_frac_bits

    def frac_chain(self) -> list[int]:
        return [self.input_frac_bits] + [lyr.output_frac_bits for lyr in self.layers]

    def digest(self) -> str:
        return hashlib.sha256(dumps_model(self, shadow=False).encode()).hexdigest()


def _rshift_round(acc: np.ndarray, shift: int) -> np.ndarray:
    if shift > 0:
        return (acc + (1 << (shift - 1))) >> shift
    return acc << (-shift)


def forward_int(model: QuantizedModel, x: np.ndarray) -> np.ndarray:
    """Integer forward pass on raw int8 inputs, shape ``(n_inputs,)`` or ``(N, n_inputs)``."""
    x = np.asarray(x)
    if x.shape[-1] != model.n_inputs:
        raise ValueError(
            f"input has {x.shape[-1]} features, model expects {model.n_inputs}")
    h = x.astype(np.int64)
    fx = model.input_frac_bits
    for layer in model.layers:
        fw, fb, fo = layer.weight.frac_bits, layer.bias.frac_bits, layer.output_frac_bits
        acc = h @ layer.weight.data.astype(np.int64).T
        acc = acc + (layer.bias.data.astype(np.int64) << (fx + fw - fb))
        h = np.clip(_rshift_round(acc, fx + fw - fo), Q7_MIN, Q7_MAX)
        if layer.activation == "relu":
            h = np.maximum(h, 0)
        fx = fo
    return h.astype(np.int8)


def forward(model: QuantizedModel, x: QuantizedTensor) -> np.ndarray:
    """Pre-softmax int8 logits for one quantized input."""
    if x.frac_bits != model.input_frac_bits:
        raise ValueError(
            f"input frac_bits {x.frac_bits} != model input_frac_bits {model.input_frac_bits}")
    if x.data.ndim != 1 or x.shape[0] != model.n_inputs:
        raise ValueError(f"input shape {x.shape} does not match first layer ({model.n_inputs},)")
    return forward_int(model, x.data)


def quantize_pixels(pixels, frac_bits: int = 7) -> QuantizedTensor:
    """Device-side input quantization of native [0, 255] pixels."""
    p = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, PIXEL_MAX)
    return quantize_ptq(p / PIXEL_SCALE, frac_bits)


def pixel_step(frac_bits: int = 7) -> float:
    """Width of one input quantization bucket in pixel units."""
    return PIXEL_SCALE / (1 << frac_bits)


def shadow_forward(model: QuantizedModel, pixels: np.ndarray) -> np.ndarray:
    """Float64 logits of the pre-quantization network on pixel inputs."""
    if model.shadow is None:
        raise ValueError("model carries no float shadow weights")
    h = np.asarray(pixels, dtype=np.float64) / PIXEL_SCALE
    for (w, b), layer in zip(model.shadow, model.layers):
        h = h @ w.astype(np.float64).T + b
        if layer.activation == "relu":
            h = np.maximum(h, 0.0)
    return h


def shadow_input_gradient(model: QuantizedModel, pixels: np.ndarray,
                          dlogits: np.ndarray) -> np.ndarray:
    """Backpropagate ``dlogits`` (d loss / d logits) to pixel space."""
    if model.shadow is None:
        raise ValueError("model carries no float shadow weights")
    h = np.asarray(pixels, dtype=np.float64) / PIXEL_SCALE
    masks = []
    for (w, b), layer in zip(model.shadow, model.layers):
        h = h @ w.astype(np.float64).T + b
        if layer.activation == "relu":
            masks.append(h > 0)
            h = np.maximum(h, 0.0)
        else:
            masks.append(None)
    g = np.asarray(dlogits, dtype=np.float64)
    for (w, _), mask in zip(reversed(model.shadow), reversed(masks)):
        if mask is not None:
            g = g * mask
        g = g @ w.astype(np.float64)
    return g / PIXEL_SCALE


# -- persistence ------------------------------------------------------------

def _qt_doc(q: QuantizedTensor) -> dict:
    return {"shape": list(q.shape), "frac_bits": q.frac_bits, "int8_b64": _b64(q.data)}


def _qt_load(d: dict) -> QuantizedTensor:
    return QuantizedTensor(_unb64(d["int8_b64"], np.int8, tuple(d["shape"])), int(d["frac_bits"]))


def model_to_doc(model: QuantizedModel, shadow: bool = True) -> dict:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "input_frac_bits": model.input_frac_bits,
        "layers": [
            {"weight": _qt_doc(lyr.weight), "bias": _qt_doc(lyr.bias),
             "activation": lyr.activation, "output_frac_bits": lyr.output_frac_bits}
            for lyr in model.layers
        ],
    }
    if shadow and model.shadow is not None:
        doc["shadow"] = [
            {"weight_shape": list(w.shape), "weight_f32_b64": _b64(w.astype("<f4")),
             "bias_f32_b64": _b64(b.astype("<f4"))}
            for w, b in model.shadow
        ]
    return doc


def model_from_doc(doc: dict) -> QuantizedModel:
    try:
        check_header(doc, MODEL_FORMAT, MODEL_VERSION)
    except FormatError as exc:
        raise ModelFormatError(str(exc)) from None
    layers = [
        QuantizedLayer(_qt_load(d["weight"]), _qt_load(d["bias"]), d["activation"],
                       int(d["output_frac_bits"]))
        for d in doc["layers"]
    ]
    shadow = None
    if "shadow" in doc:
        shadow = []
        for d in doc["shadow"]:
            shape = tuple(d["weight_shape"])
            shadow.append((_unb64(d["weight_f32_b64"], "<f4", shape).astype(np.float32),
                           _unb64(d["bias_f32_b64"], "<f4", (shape[0],)).astype(np.float32)))
    return QuantizedModel(layers, int(doc["input_frac_bits"]), shadow)


def dumps_model(model: QuantizedModel, shadow: bool = True) -> str:
    return json.dumps(model_to_doc(model, shadow), indent=1, sort_keys=True)


def save_model(model: QuantizedModel, path) -> None:
    Path(path).write_text(dumps_model(model))


def load_model(path) -> QuantizedModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON ({exc})") from exc
    return model_from_doc(doc)
