import json

import numpy as np
import pytest

from logitsca import cli
from logitsca.qnn.idx import encode_idx, load_digits

SMALL = {
    "leakage": {"samples_per_event": 8, "noise_sigma": 0.0, "pad_samples": 2},
    "profiling": {"n_traces": 5120, "scorer": "template", "max_points": 16},
    "extraction": {"n_traces": 1, "max_traces": 2, "repeats": 2},
    "attack": {"inputs": 2, "max_iters": 20},
}


def _config(tmp_path, doc):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(doc))
    return str(p)


def test_missing_seeds_is_config_error(tmp_path, capsys):
    cfg = _config(tmp_path, {"out": str(tmp_path / "out")})
    assert cli.main(["train-victim", "--config", cfg]) == cli.EXIT_CONFIG
    assert "seed" in capsys.readouterr().err


@pytest.mark.parametrize("doc", [
    {"seeds": {"victim": 0}, "leakage": {"noise_sigma": -1}},
    {"leakage": {"colour": "blue"}},
    {"profiling": {"scorer": "svm"}},
    {"attack": {"h": 0.5}},
    {"dataset": {"train_images": "nope", "train_labels": "nope", "test_images": "nope",
                 "test_labels": "nope"}},
])
def test_bad_configs(tmp_path, doc):
    cfg = _config(tmp_path, doc)
    assert cli.main(["profile", "--config", cfg, "--seed", "1", "--out",
                     str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_unreadable_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert cli.main(["profile", "--config", str(p), "--seed", "0", "--out", str(tmp_path)]) == 2


def test_truncated_dataset_is_data_error(tmp_path):
    xtr, ytr, xte, yte = load_digits()
    files = {}
    for name, a in (("train_images", xtr.reshape(-1, 8, 8)), ("train_labels", ytr),
                    ("test_images", xte.reshape(-1, 8, 8)), ("test_labels", yte)):
        raw = encode_idx(np.asarray(a, dtype=np.uint8))
        if name == "train_images":
            raw = raw[:-7]
        (tmp_path / name).write_bytes(raw)
        files[name] = str(tmp_path / name)
    cfg = _config(tmp_path, {"dataset": files})
    code = cli.main(["train-victim", "--config", cfg, "--seed", "0", "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_DATA


def test_stage_seeds_are_distinct_and_stable():
    s = [cli.stage_seed(5, st) for st in cli.SEED_STAGES]
    assert len(set(s)) == len(s)
    assert s == [cli.stage_seed(5, st) for st in cli.SEED_STAGES]


def test_table_round_trip(tmp_path):
    p = tmp_path / "t.tsv"
    cli.write_table(p, ["demo"], ["a", "b"], [(1, 0.5), (2, float("inf"))])
    cols, vals = cli.read_table(p)
    assert cols == ["a", "b"] and vals.shape == (2, 2) and np.isinf(vals[1, 1])
    cli.write_table(p, ["empty"], ["a", "b"], [])
    cols, vals = cli.read_table(p)
    assert cols == ["a", "b"] and vals.shape == (0, 2)


def test_plotdata_on_empty_bundle(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["plotdata", "--seed", "0", "--out", str(out)]) == 0
    for kind in ("mlp", "logreg", "template"):
        cols, vals = cli.read_table(out / f"sr-{kind}.tsv")
        assert cols[0] == "traces" and len(vals) == 0
    assert (out / "attack-summary.tsv").read_text().startswith("#")


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = _config(root, dict(SMALL, seeds={"victim": 0, "profiling": 1, "evaluation": 2,
                                           "attack": 3}, out=str(root / "out")))
    codes = [cli.main([c, "--config", cfg]) for c in
             ("train-victim", "profile", "eval-extraction", "attack", "plotdata")]
    return root, cfg, codes


def test_pipeline_runs(pipeline):
    root, _, codes = pipeline
    assert codes == [0] * 5
    out = root / "out"
    for f in ("victim.json", "extractor-template.json", "metrics.json", "attack-zoo.json",
              "attack-bim.json", "adversarial-images-idx3-ubyte", "sr-template.tsv",
              "snr-pos0.tsv", "run.log", "config.json"):
        assert (out / f).exists(), f
    m = json.loads((out / "metrics.json").read_text())
    assert np.all(np.array(m["curves"]["template"]["success_rate"]) == 1.0)
    cols, vals = cli.read_table(out / "sr-template.tsv")
    assert vals.shape == (2, 11)
    zoo = json.loads((out / "attack-zoo.json").read_text())
    for r in zoo["reports"]:
        assert r["traces"] == r["queries"] * 1
        assert r["iterations"] <= 20


def test_pipeline_is_reproducible(pipeline, tmp_path):
    root, _, _ = pipeline
    doc = dict(SMALL, seeds={"victim": 0, "profiling": 1, "evaluation": 2, "attack": 3},
               out=str(tmp_path / "out"))
    cfg = _config(tmp_path, doc)
    for c in ("train-victim", "profile", "eval-extraction", "attack"):
        assert cli.main([c, "--config", cfg]) == 0
    for f in ("victim.json", "extractor-template.json", "attack-zoo.json", "metrics.json"):
        assert (tmp_path / "out" / f).read_bytes() == (root / "out" / f).read_bytes(), f


def test_fingerprint_mismatch_is_attack_error(pipeline):
    root, cfg, _ = pipeline
    assert cli.main(["eval-extraction", "--config", cfg, "--sigma", "0.5"]) == cli.EXIT_ATTACK


def test_missing_bundle_is_data_error(tmp_path):
    assert cli.main(["attack", "--seed", "0", "--out", str(tmp_path)]) == cli.EXIT_DATA
