"""Versioned JSON documents for fitted distinguishers.

Template covariances are stored as the packed lower triangle of their
Cholesky factor, so a reloaded model never needs refactorizing.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .._codec import FormatError, check_header, pack_array, unpack_array
from .._mlp import MLP, TrainingRecord
from .attack import ProfiledScorer
from .neural import NeuralDistinguisher
from .snr import PoiSelection
from .templates import TemplateModel

DISTINGUISHER_FORMAT = "logitsca.distinguisher"
DISTINGUISHER_VERSION = 1
KINDS = ("template", "logreg", "mlp")


def _poi_doc(poi: PoiSelection) -> dict:
    # inf thresholds (noiseless profiles) are written as a string
    thr = poi.threshold if np.isfinite(poi.threshold) else "inf"
    return {"indices": [int(i) for i in poi.indices], "threshold": thr}


def _poi_load(d: dict) -> PoiSelection:
    return PoiSelection(np.array(d["indices"], dtype=np.int64), float(d["threshold"]))


def _template_doc(m: TemplateModel) -> dict:
    d = m.dim
    rows, cols = np.tril_indices(d)
    return {
        "dim": d,
        "profiled": [int(c) for c in np.flatnonzero(m.profiled)],
        "means": pack_array(m.means, "<f8"),
        "chol_tril": pack_array(m.chol[:, rows, cols], "<f8"),
        "reg_epsilon": [None if np.isnan(e) else float(e) for e in m.reg_epsilon],
    }


def _template_load(doc: dict) -> TemplateModel:
    d = int(doc["dim"])
    means = unpack_array(doc["means"])
    packed = unpack_array(doc["chol_tril"])
    if means.shape[1:] != (d,) or packed.shape[1:] != (d * (d + 1) // 2,):
        raise FormatError("template arrays do not match the declared dimension")
    rows, cols = np.tril_indices(d)
    chol = np.zeros((len(means), d, d))
    chol[:, rows, cols] = packed
    profiled = np.zeros(len(means), dtype=bool)
    profiled[doc["profiled"]] = True
    eps = np.array([np.nan if e is None else e for e in doc["reg_epsilon"]])
    return TemplateModel(means, chol, profiled, eps)


def _neural_doc(n: NeuralDistinguisher) -> dict:
    doc = {
        "widths": n.net.widths,
        "activation": "relu",
        "weights": [pack_array(w, "<f4") for w in n.net.weights],
        "biases": [pack_array(b, "<f4") for b in n.net.biases],
        "input_mean": pack_array(n.mean, "<f4"),
        "input_std": pack_array(n.std, "<f4"),
    }
    if n.record is not None:
        r = n.record
        doc["training"] = {"epochs": r.epochs, "batch_size": r.batch_size, "lr": r.lr,
                           "seed": r.seed, "losses": r.losses, "val_losses": r.val_losses}
    return doc


def _neural_load(kind: str, doc: dict) -> NeuralDistinguisher:
    ws = [unpack_array(w).astype(np.float32) for w in doc["weights"]]
    bs = [unpack_array(b).astype(np.float32) for b in doc["biases"]]
    net = MLP(ws, bs)
    if net.widths != list(doc["widths"]):
        raise FormatError(f"layer arrays give widths {net.widths}, document says {doc['widths']}")
    rec = None
    if "training" in doc:
        t = doc["training"]
        rec = TrainingRecord(t["epochs"], t["batch_size"], t["lr"], t["seed"],
                             list(t["losses"]), list(t["val_losses"]))
    return NeuralDistinguisher(kind, net, unpack_array(doc["input_mean"]).astype(np.float32),
                               unpack_array(doc["input_std"]).astype(np.float32), rec)


def scorer_to_doc(s: ProfiledScorer) -> dict:
    body = _template_doc(s.model) if s.kind == "template" else _neural_doc(s.model)
    return {"format": DISTINGUISHER_FORMAT, "version": DISTINGUISHER_VERSION,
            "kind": s.kind, "poi": _poi_doc(s.poi), "model": body}


def scorer_from_doc(doc: dict) -> ProfiledScorer:
    check_header(doc, DISTINGUISHER_FORMAT, DISTINGUISHER_VERSION)
    kind = doc.get("kind")
    if kind not in KINDS:
        raise FormatError(f"unknown distinguisher kind {kind!r}")
    model = _template_load(doc["model"]) if kind == "template" else _neural_load(kind, doc["model"])
    return ProfiledScorer(_poi_load(doc["poi"]), model)


def dumps_scorer(s: ProfiledScorer) -> str:
    return json.dumps(scorer_to_doc(s), indent=1, sort_keys=True)


def save_scorer(s: ProfiledScorer, path) -> None:
    Path(path).write_text(dumps_scorer(s))


def load_scorer(path) -> ProfiledScorer:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    return scorer_from_doc(doc)
