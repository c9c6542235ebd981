"""Adversarial examples against the int8 victim.

``zoo_attack`` is a zeroth-order coordinate-descent attack: each iteration
estimates B partial derivatives of

    ||x - x0||^2 / (hi - lo)^2 + c * g(x)

by central differences through a logit oracle and applies per-coordinate
Adam steps. ``bim_whitebox_baseline`` is the white-box comparison: signed
gradient steps on the float shadow network, judged on the quantized victim.

Oracles are objects with ``query_batch(xs) -> (logits (k, C), probs (k, C))``
plus ``queries``/``traces`` counters, e.g. ``extract.LogitOracle`` or
``extract.ExactOracle``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .qnn.idx import write_idx
from .qnn.model import (PIXEL_MAX, QuantizedModel, forward_int, pixel_step, quantize_pixels,
                        shadow_forward, shadow_input_gradient)
from .qnn.softmax import softmax

REPORT_FORMAT = "logitsca.attack-report"
REPORT_VERSION = 1
PROB_FLOOR = 1e-40
MODES = ("targeted", "untargeted")
OBJECTIVES = ("logit", "log_prob")


def cw_logit_objective(z, label: int, kappa: float = 0.0, targeted: bool = True) -> float:
    """Margin loss on a logit vector.

    Targeted: ``max(max_{i != t} z[i] - z[t], -kappa)``.
    Untargeted (``label`` is the true class): ``max(z[y] - max_{i != y} z[i], -kappa)``.
    """
    z = np.asarray(z, dtype=np.float64)
    if not 0 <= label < z.shape[-1]:
        raise ValueError(f"class {label} out of range for {z.shape[-1]} logits")
    others = np.delete(z, label, axis=-1).max(axis=-1)
    margin = others - z[..., label] if targeted else z[..., label] - others
    out = np.maximum(margin, -kappa)
    return float(out) if np.ndim(out) == 0 else out


def zoo_log_objective(F, label: int, kappa: float = 0.0, targeted: bool = True) -> float:
    """The same margin on ``log F``, with F clamped to ``1e-40`` before the log."""
    return cw_logit_objective(np.log(np.maximum(np.asarray(F, dtype=np.float64), PROB_FLOOR)),
                              label, kappa, targeted)


def fd_gradient_coord(f: Callable[[np.ndarray], float], x: np.ndarray, i: int, h: float,
                      lo: float = -np.inf, hi: float = np.inf) -> float:
    """Central difference of ``f`` along coordinate ``i`` (two evaluations).

    Probes are clamped to ``[lo, hi]``; the divisor is the clamped span.
    """
    if not h > 0:
        raise ValueError("h must be > 0")
    xp = np.array(x, dtype=np.float64)
    xm = xp.copy()
    xp[i] = min(xp[i] + h, hi)
    xm[i] = max(xm[i] - h, lo)
    span = xp[i] - xm[i]
    if span <= 0:
        raise ValueError("box leaves no room for a finite difference")
    return (f(xp) - f(xm)) / span


def distortion_l2(x0, x) -> float:
    x0 = np.asarray(x0, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x0.shape != x.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {x.shape}")
    return float(np.linalg.norm(x - x0))


def device_exact_pixels(x, frac_bits: int = 7) -> np.ndarray:
    """Integer pixels that the device quantizes exactly like ``x``.

    Each pixel is replaced by the integer centre of its input bucket, so the
    result survives a round trip through an 8-bit image file unchanged.
    """
    q = quantize_pixels(x, frac_bits).data.astype(np.float64)
    return np.clip(q * pixel_step(frac_bits), 0, PIXEL_MAX).astype(np.uint8)


@dataclass(frozen=True)
class AttackSpec:
    mode: str = "untargeted"
    label: int = 0  # target class (targeted) or true class (untargeted)
    kappa: float = 0.0
    c: float = 1.0
    # 8 px = 4 input buckets per side; at one bucket the int8 logits rarely move
    h: float = 8.0
    lr: float = 4.0
    max_iters: int = 10_000
    coords_per_iter: int = 16
    lo: float = 0.0
    hi: float = PIXEL_MAX
    objective: str = "logit"
    # consecutive oracle confirmations required before declaring success
    verifications: int = 3
    # input bucket width; the central-difference span 2h must cover it
    quant_step: float = pixel_step()
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if not self.h > 0:
            raise ValueError("h must be > 0")
        if self.h < self.quant_step:
            raise ValueError(f"h={self.h} is below one input bucket "
                             f"(bucket width {self.quant_step})")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.lo < self.hi:
            raise ValueError("box needs lo < hi")
        if self.coords_per_iter < 1:
            raise ValueError("coords_per_iter must be >= 1")
        if self.verifications < 0:
            raise ValueError("verifications must be >= 0")

    @property
    def targeted(self) -> bool:
        return self.mode == "targeted"


@dataclass
class ZooState:
    x: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: np.ndarray  # per-coordinate Adam step counts
    iteration: int = 0
    best_l2: float = math.inf
    best_x: np.ndarray | None = None
    success: bool = False

    @classmethod
    def start(cls, x0: np.ndarray) -> "ZooState":
        x = np.array(x0, dtype=np.float64)
        z = np.zeros_like(x)
        return cls(x, z.copy(), z.copy(), np.zeros(x.shape, dtype=np.int64))

    def record_success(self, x: np.ndarray, l2: float) -> None:
        self.success = True
        if l2 < self.best_l2:
            self.best_l2 = l2
            self.best_x = np.array(x, dtype=np.float64)


@dataclass
class AttackReport:
    method: str
    spec: dict
    seed: int
    success: bool
    rejected: bool
    x0: list
    adversarial: list
    l2: float
    iterations: int
    gradient_queries: int
    verification_queries: int
    queries: int
    traces: int
    predicted: int | None
    objective_log: list = field(default_factory=list)
    extraction_accuracy: list = field(default_factory=list)
    verified_on_victim: bool | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["l2"] = None if not math.isfinite(self.l2) else self.l2
        return d


def _classify(z: np.ndarray, spec: AttackSpec) -> tuple[np.ndarray, np.ndarray]:
    """Objective term and success flags for a batch of oracle outputs."""
    z = np.asarray(z, dtype=np.float64)
    pred = np.argmax(z, axis=-1)
    g = cw_logit_objective(z, spec.label, spec.kappa, spec.targeted)
    if spec.targeted:
        ok = (pred == spec.label) & (g <= -spec.kappa)
    else:
        ok = (pred != spec.label) & (g <= -spec.kappa)
    return np.atleast_1d(g), np.atleast_1d(ok)


def _objective_term(z, p, spec: AttackSpec) -> np.ndarray:
    if spec.objective == "logit":
        return np.atleast_1d(cw_logit_objective(z, spec.label, spec.kappa, spec.targeted))
    return np.atleast_1d(zoo_log_objective(p, spec.label, spec.kappa, spec.targeted))


def zoo_attack(oracle, x0, spec: AttackSpec, seed: int,
               monitor: Callable[[np.ndarray], np.ndarray] | None = None) -> AttackReport:
    """Zeroth-order attack through ``oracle``.

    Every non-gradient oracle call (the initial class check and success
    confirmations) counts as a verification query, so
    ``queries == 2 * B * iterations + verification_queries``.

    ``monitor`` maps a batch of inputs to their true logits; when given, the
    fraction of probes whose logits the oracle got exactly right is logged
    per iteration. It does not influence the attack.
    """
    x0 = np.clip(np.asarray(x0, dtype=np.float64), spec.lo, spec.hi)
    d = x0.size
    B = min(spec.coords_per_iter, d)
    rng = np.random.default_rng(seed)
    q0, t0 = oracle.queries, oracle.traces
    scale = (spec.hi - spec.lo) ** 2
    st = ZooState.start(x0)
    verify_q = 0
    grad_q = 0
    obj_log: list[float] = []
    acc_log: list[float] = []

    def report(pred) -> AttackReport:
        adv = st.best_x if st.best_x is not None else st.x
        return AttackReport(
            method="zoo", spec=asdict(spec), seed=seed, success=st.success,
            rejected=rejected, x0=x0.tolist(), adversarial=adv.tolist(),
            l2=st.best_l2 if st.success else distortion_l2(x0, adv),
            iterations=st.iteration, gradient_queries=grad_q, verification_queries=verify_q,
            queries=oracle.queries - q0, traces=oracle.traces - t0,
            predicted=None if pred is None else int(pred),
            objective_log=obj_log, extraction_accuracy=acc_log)

    z, p = oracle.query_batch([x0])
    verify_q += 1
    pred0 = int(np.argmax(z[0]))
    rejected = (not spec.targeted and pred0 != spec.label) or (spec.targeted and pred0 == spec.label)
    if rejected:
        return report(pred0)

    last_pred = pred0
    while st.iteration < spec.max_iters:
        st.iteration += 1
        coords = rng.choice(d, size=B, replace=False)
        plus = np.repeat(st.x[None], B, axis=0)
        minus = plus.copy()
        rows = np.arange(B)
        plus[rows, coords] = np.minimum(st.x[coords] + spec.h, spec.hi)
        minus[rows, coords] = np.maximum(st.x[coords] - spec.h, spec.lo)
        probes = np.concatenate([plus, minus])
        z, p = oracle.query_batch(probes)
        grad_q += 2 * B
        if monitor is not None:
            acc_log.append(float(np.mean(np.all(z == monitor(probes), axis=1))))
        dist = ((probes - x0) ** 2).sum(axis=1) / scale
        loss = dist + spec.c * _objective_term(z, p, spec)
        span = plus[rows, coords] - minus[rows, coords]
        grad = (loss[:B] - loss[B:]) / span
        obj_log.append(float(loss.mean()))

        # per-coordinate Adam
        st.t[coords] += 1
        st.m[coords] = spec.beta1 * st.m[coords] + (1 - spec.beta1) * grad
        st.v[coords] = spec.beta2 * st.v[coords] + (1 - spec.beta2) * grad * grad
        mhat = st.m[coords] / (1 - spec.beta1 ** st.t[coords])
        vhat = st.v[coords] / (1 - spec.beta2 ** st.t[coords])
        st.x[coords] = np.clip(st.x[coords] - spec.lr * mhat / (np.sqrt(vhat) + spec.adam_eps),
                               spec.lo, spec.hi)

        _, ok = _classify(z, spec)
        if ok.any():
            cand_idx = np.flatnonzero(ok)
            l2s = np.linalg.norm(probes[cand_idx] - x0, axis=1)
            cand = probes[cand_idx[np.argmin(l2s)]]
            confirmed = True
            for _ in range(spec.verifications):
                zc, _ = oracle.query_batch([cand])
                verify_q += 1
                last_pred = int(np.argmax(zc[0]))
                if not _classify(zc, spec)[1][0]:
                    confirmed = False
                    break
            if confirmed:
                last_pred = int(np.argmax(z[cand_idx[np.argmin(l2s)]]))
                st.record_success(cand, distortion_l2(x0, cand))
                break
    return report(last_pred)


def verify_on_victim(model: QuantizedModel, report: AttackReport) -> bool:
    """Fresh full quantized inference on the report's adversarial input."""
    x = np.asarray(report.adversarial)
    z = forward_int(model, quantize_pixels(x, model.input_frac_bits).data)
    pred = int(np.argmax(z))
    label = report.spec["label"]
    if report.spec["mode"] == "targeted":
        return pred == label
    return pred != label


@dataclass(frozen=True)
class BimSpec:
    mode: str = "untargeted"
    label: int = 0
    eps: float = 76.5  # L-inf budget in pixel units (0.3 of the range)
    eps_iter: float = 2.0
    nb_iter: int = 100
    lo: float = 0.0
    hi: float = PIXEL_MAX
    # stop as soon as the float network is fooled
    early_stop: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.eps < 0 or self.eps_iter <= 0 or self.nb_iter < 1:
            raise ValueError("need eps >= 0, eps_iter > 0, nb_iter >= 1")


def bim_whitebox_baseline(model: QuantizedModel, x0, spec: BimSpec) -> AttackReport:
    """Basic iterative method on the float shadow network.

    Cross-entropy ascent (untargeted) or descent (targeted) with signed
    gradient steps, clipped to the eps ball and the box after each step.
    Success is judged by the quantized victim, i.e. it measures transfer.
    """
    x0 = np.clip(np.asarray(x0, dtype=np.float64), spec.lo, spec.hi)
    x = x0.copy()
    targeted = spec.mode == "targeted"
    log: list[float] = []
    it = 0
    for it in range(1, spec.nb_iter + 1):
        logits = shadow_forward(model, x)
        probs = softmax(logits)
        onehot = np.zeros_like(probs)
        onehot[spec.label] = 1.0
        log.append(float(-np.log(max(probs[spec.label], PROB_FLOOR))))
        fooled = (np.argmax(logits) == spec.label) if targeted else (np.argmax(logits) != spec.label)
        if spec.early_stop and fooled:
            it -= 1
            break
        g = shadow_input_gradient(model, x, probs - onehot)  # d CE / d x
        direction = -np.sign(g) if targeted else np.sign(g)
        x = np.clip(x + spec.eps_iter * direction, x0 - spec.eps, x0 + spec.eps)
        x = np.clip(x, spec.lo, spec.hi)
    z = forward_int(model, quantize_pixels(x, model.input_frac_bits).data)
    pred = int(np.argmax(z))
    success = pred == spec.label if targeted else pred != spec.label
    return AttackReport(
        method="bim", spec=asdict(spec), seed=0, success=bool(success), rejected=False,
        x0=x0.tolist(), adversarial=x.tolist(), l2=distortion_l2(x0, x), iterations=it,
        gradient_queries=0, verification_queries=0, queries=0, traces=0, predicted=pred,
        objective_log=log, verified_on_victim=bool(success))


# -- persistence --------------------------------------------------------------

def reports_to_doc(reports: list[AttackReport], summary: dict | None = None) -> dict:
    doc = {"format": REPORT_FORMAT, "version": REPORT_VERSION,
           "reports": [r.to_dict() for r in reports]}
    if summary is not None:
        doc["summary"] = summary
    return doc


def dumps_reports(reports: list[AttackReport], summary: dict | None = None) -> str:
    return json.dumps(reports_to_doc(reports, summary), indent=1, sort_keys=True)


def save_reports(path, reports: list[AttackReport], summary: dict | None = None) -> None:
    Path(path).write_text(dumps_reports(reports, summary))


def summarize(reports: list[AttackReport]) -> dict:
    """Success rate, mean L2 of successes, and mean query/trace counts."""
    counted = [r for r in reports if not r.rejected]
    wins = [r for r in counted if r.success]
    return {
        "inputs": len(reports),
        "rejected": len(reports) - len(counted),
        "successes": len(wins),
        "success_rate": len(wins) / len(counted) if counted else 0.0,
        "mean_l2": float(np.mean([r.l2 for r in wins])) if wins else None,
        "mean_queries": float(np.mean([r.queries for r in counted])) if counted else None,
        "mean_traces": float(np.mean([r.traces for r in counted])) if counted else None,
    }


def export_adversarial_idx(path, reports: list[AttackReport], side: int | None = None,
                           frac_bits: int = 7) -> int:
    """Write the adversarial inputs of successful reports as an IDX image file.

    Pixels are snapped with :func:`device_exact_pixels`, so the victim sees
    exactly the same quantized input after re-ingestion. Returns the count.
    """
    imgs = [device_exact_pixels(np.asarray(r.adversarial), frac_bits)
            for r in reports if r.success]
    d = len(reports[0].adversarial) if reports else 0
    side = int(round(math.sqrt(d))) if side is None else side
    if side * side != d and d:
        raise ValueError(f"cannot shape {d} pixels into a square image")
    arr = np.array(imgs, dtype=np.uint8).reshape(len(imgs), side, side)
    write_idx(path, arr)
    return len(imgs)
