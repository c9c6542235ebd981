import numpy as np
import pytest

from logitsca.extract import (ExactOracle, FingerprintMismatch, LogitOracle, ProfiledExtractor,
                              SimulatedDevice, dumps_extractor, estimate_logits,
                              extract_logits, extraction_hits, extraction_success_curves,
                              load_extractor, logit_oracle, profile, save_extractor,
                              select_positions_poi)
from logitsca.leaksim import LeakageConfig, capture_profiling_set
from logitsca.qnn.model import forward_int, quantize_pixels
from logitsca.sca.snr import EmptyPoiError

NOISELESS = LeakageConfig(samples_per_event=8, noise_sigma=0.0, leak_model="bit_weighted",
                          pad_samples=2)
NOISY = LeakageConfig(samples_per_event=8, noise_sigma=0.25, leak_model="bit_weighted",
                      pad_samples=2)


@pytest.fixture(scope="module")
def noiseless_ex():
    return profile(NOISELESS, 5120, "template", seed=11, max_points=16)


@pytest.fixture(scope="module")
def noisy_ex():
    return profile(NOISY, 8000, "template", seed=12, max_points=8, traces_per_query=4)


def test_noiseless_single_trace_recovery(noiseless_ex):
    hits, _ = extraction_hits(noiseless_ex, NOISELESS, 1, 40, seed=3)
    assert hits.all()


def test_extract_logits_exact_and_evaluated(noiseless_ex, victim, digits):
    x = quantize_pixels(digits[2][5])
    res = extract_logits(victim, x, noiseless_ex, NOISELESS, seed=0, n=1, evaluate=True)
    assert res.all_correct
    assert np.array_equal(res.logits, forward_int(victim, x.data))
    assert res.traces_consumed == 1 and res.scores.shape == (10, 256)


def test_fingerprint_mismatch_refused(noiseless_ex, victim, digits):
    x = digits[2][0]
    with pytest.raises(FingerprintMismatch):
        extract_logits(victim, x, noiseless_ex, NOISY, seed=0)
    dev = SimulatedDevice(victim, NOISY, 0)
    with pytest.raises(FingerprintMismatch):
        estimate_logits(noiseless_ex, dev.acquire([x], 2))
    with pytest.raises(FingerprintMismatch):
        LogitOracle(noiseless_ex, dev)


def test_oracle_counters_and_probabilities(noisy_ex, victim, digits):
    oracle = logit_oracle(noisy_ex, victim, NOISY, seed=4)
    x = digits[2][3]
    z1, p1, used = oracle(x)
    z2, p2, _ = oracle(x)
    assert used == 4
    assert abs(p1.sum() - 1) < 1e-9
    assert np.array_equal(z1, z2)
    assert oracle.queries == 2 and oracle.traces == 2 * 4
    oracle.query_batch([x] * 5)
    assert oracle.traces == 7 * 4


class _BlackBox:
    """Exposes only the physical interface of a device."""

    def __init__(self, dev):
        self._acquire = dev.acquire
        self._fp = dev.fingerprint

    def acquire(self, xs, n):
        ts = self._acquire(xs, n)
        assert ts.labels is None
        return ts

    def fingerprint(self):
        return self._fp()


def test_oracle_only_sees_traces(noisy_ex, victim, digits, monkeypatch):
    import logitsca.extract as ex_mod
    dev = SimulatedDevice(victim, NOISY, seed=9)
    oracle = LogitOracle(noisy_ex, _BlackBox(dev))

    def forbidden(*a, **k):
        raise AssertionError("true logits read on the oracle path")
    monkeypatch.setattr(SimulatedDevice, "true_logits", forbidden)
    # the device's own inference is part of acquire; everything after it must
    # work from traces only
    real_acquire = dev.acquire
    captured = {}

    def acquire(xs, n):
        ts = real_acquire(xs, n)
        captured["ts"] = ts
        monkeypatch.setattr(ex_mod, "forward_int", forbidden)
        return ts
    oracle.device._acquire = acquire
    z, p, _ = oracle(digits[2][1])
    monkeypatch.undo()
    assert np.array_equal(z, estimate_logits(noisy_ex, captured["ts"]).logits)


def test_exact_oracle(victim, digits):
    o = ExactOracle(victim)
    z, p, used = o(digits[2][0])
    assert used == 0 and o.queries == 1 and o.traces == 0
    assert np.array_equal(z, forward_int(victim, quantize_pixels(digits[2][0]).data))


def test_more_traces_do_not_hurt(noisy_ex):
    sr = extraction_success_curves(noisy_ex, NOISY, 4, 30, seed=1)
    assert sr.shape == (10, 4)
    assert sr[:, -1].mean() >= sr[:, 0].mean()


def test_empty_poi_names_position():
    cfg = LeakageConfig(samples_per_event=1, noise_sigma=0.0)
    ts = capture_profiling_set("uniform", 3000, cfg, seed=0)
    ts.samples[:] = 0.0
    ts.fingerprint = cfg.fingerprint()
    with pytest.raises(EmptyPoiError, match="logit 0"):
        select_positions_poi(ts)


def test_bundle_round_trip_and_determinism(tmp_path, noiseless_ex):
    save_extractor(noiseless_ex, tmp_path / "b.json", NOISELESS)
    back = load_extractor(tmp_path / "b.json")
    assert dumps_extractor(back, NOISELESS) == dumps_extractor(noiseless_ex, NOISELESS)
    again = profile(NOISELESS, 5120, "template", seed=11, max_points=16)
    assert dumps_extractor(again) == dumps_extractor(noiseless_ex)
    assert len(back.scorers) == 10 and back.provenance["n_profiling"] == 5120


def test_neural_extractor_noiseless():
    from logitsca.sca.neural import NeuralHyper
    ex = profile(NOISELESS, 6000, "logreg", seed=2, max_points=8,
                 hyper=NeuralHyper(lr=3e-2, hidden=(), epochs=30, batch_size=128))
    hits, _ = extraction_hits(ex, NOISELESS, 3, 20, seed=0)
    assert hits[:, :, -1].mean() > 0.95


def test_extractor_validation(noiseless_ex):
    with pytest.raises(ValueError):
        ProfiledExtractor([], "x")
    with pytest.raises(ValueError):
        profile(NOISELESS, 100, "svm")
