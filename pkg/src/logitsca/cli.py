"""Command-line driver: train-victim, profile, eval-extraction, attack, plotdata.

All artifacts go to the output directory and are deterministic given the
config and seeds; wall-clock timestamps go only to ``run.log`` there.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import advgen, extract
from ._codec import FormatError, check_header
from ._mlp import TrainingDiverged
from .leaksim import LeakageConfig
from .qnn.idx import IdxFormatError, load_digits, read_idx
from .qnn.model import forward_int, load_model, quantize_pixels, save_model
from .qnn.train import VictimTrainingError, train_victim
from .sca.attack import paired_noninferiority_pvalue
from .sca.neural import NeuralHyper
from .sca.snr import EmptyPoiError

log = logging.getLogger("logitsca")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ATTACK = 0, 2, 3, 4
SEED_STAGES = ("victim", "profiling", "evaluation", "attack")
METRICS_FORMAT = "logitsca.metrics"
METRICS_VERSION = 1

# Desk-scale defaults. Seeds are deliberately absent: they must come from the
# config file or --seed.
DEFAULTS: dict = {
    "dataset": None,  # None: bundled 8x8 digits; else four IDX paths
    "victim": {"hidden": [32], "epochs": 60, "batch_size": 32, "lr": 1e-3,
               "min_accuracy": 0.9},
    "leakage": {"samples_per_event": 128, "noise_sigma": 2.83, "leak_model": "bit_weighted",
                "leak_amplitude": 1.0, "pad_samples": 3, "num_classes": 10,
                "position_gains": None, "weight_seed": 0},
    "profiling": {"n_traces": 50_000, "scorer": "mlp", "poi_fraction": 0.1,
                  "max_points": None, "epochs": 20, "batch_size": 512, "lr": None,
                  "hidden": None, "reg_epsilon": 1e-6},
    "extraction": {"n_traces": 5, "max_traces": 10, "repeats": 10, "scorers": None},
    "attack": {"inputs": 20, "mode": "untargeted", "kappa": 0.0, "c": 1.0, "h": 8.0,
               "lr": 4.0, "max_iters": 10_000, "coords_per_iter": 16, "verifications": 3,
               "objective": "logit",
               "bim": {"eps": 76.5, "eps_iter": 2.0, "nb_iter": 100, "early_stop": True}},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def stage_seed(seed: int, stage: str) -> int:
    """Per-stage seed derived from one ``--seed``."""
    return int(np.random.SeedSequence([seed, SEED_STAGES.index(stage)]).generate_state(1)[0])


@dataclass
class ExperimentConfig:
    raw: dict
    seeds: dict
    out: Path

    @property
    def leakage(self) -> LeakageConfig:
        d = dict(self.raw["leakage"])
        d["rng_seed"] = self.seeds["profiling"]
        return LeakageConfig.from_dict(d)

    def section(self, name: str) -> dict:
        return self.raw[name]

    def to_dict(self) -> dict:
        d = copy.deepcopy(self.raw)
        d["seeds"] = dict(self.seeds)
        return d

    def neural_hyper(self, kind: str) -> NeuralHyper:
        p = self.raw["profiling"]
        h = extract.desk_hyper(kind, self.seeds["profiling"], epochs=p["epochs"],
                               batch_size=p["batch_size"])
        if p["lr"] is not None:
            h = NeuralHyper(h.epochs, h.batch_size, float(p["lr"]), h.hidden, h.seed)
        if p["hidden"] is not None and kind == "mlp":
            h = NeuralHyper(h.epochs, h.batch_size, h.lr, tuple(p["hidden"]), h.seed)
        return h

    @classmethod
    def build(cls, file_doc: dict | None, args: argparse.Namespace) -> "ExperimentConfig":
        doc = dict(file_doc or {})
        seeds = doc.pop("seeds", {}) or {}
        out = doc.pop("out", None)
        raw = _merge(DEFAULTS, doc)
        if not isinstance(seeds, dict):
            raise ConfigError("'seeds' must map stage names to integers")
        unknown = set(seeds) - set(SEED_STAGES)
        if unknown:
            raise ConfigError(f"unknown seed stages {sorted(unknown)}")
        if args.seed is not None:
            seeds = {s: stage_seed(args.seed, s) for s in SEED_STAGES}
        missing = [s for s in SEED_STAGES if s not in seeds]
        if missing:
            raise ConfigError(f"no seed for stage(s) {missing}; set 'seeds' in the config "
                              f"or pass --seed")
        for s, v in seeds.items():
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ConfigError(f"seed for {s!r} must be a non-negative integer")
        if args.out is not None:
            out = args.out
        if out is None:
            raise ConfigError("no output directory; set 'out' or pass --out")
        if getattr(args, "scorer", None):
            raw["profiling"]["scorer"] = args.scorer
        if getattr(args, "sigma", None) is not None:
            raw["leakage"]["noise_sigma"] = args.sigma
        if getattr(args, "n_traces", None) is not None:
            raw["extraction"]["n_traces"] = args.n_traces
        if getattr(args, "budget", None) is not None:
            raw["attack"]["max_iters"] = args.budget
        cfg = cls(raw, seeds, Path(out))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.leakage
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"leakage: {exc}") from None
        p, e, a = self.raw["profiling"], self.raw["extraction"], self.raw["attack"]
        if p["scorer"] not in extract.SCORER_KINDS:
            raise ConfigError(f"profiling.scorer must be one of {extract.SCORER_KINDS}")
        if e["scorers"] is not None and any(k not in extract.SCORER_KINDS for k in e["scorers"]):
            raise ConfigError(f"extraction.scorers entries must be in {extract.SCORER_KINDS}")
        for sec, key in (("profiling", "n_traces"), ("extraction", "n_traces"),
                         ("extraction", "max_traces"), ("extraction", "repeats"),
                         ("attack", "inputs"), ("attack", "max_iters")):
            v = self.raw[sec][key]
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{sec}.{key} must be a positive integer")
        if not 0 < p["poi_fraction"] <= 1:
            raise ConfigError("profiling.poi_fraction must be in (0, 1]")
        try:
            self.attack_spec(0)
            self.bim_spec(0)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"attack: {exc}") from None
        ds = self.raw["dataset"]
        if ds is not None:
            keys = ("train_images", "train_labels", "test_images", "test_labels")
            if not isinstance(ds, dict) or set(ds) != set(keys):
                raise ConfigError(f"dataset must be null or give {keys}")
            for k in keys:
                if not Path(ds[k]).is_file():
                    raise ConfigError(f"dataset.{k}: file {ds[k]!r} does not exist")

    def attack_spec(self, label: int) -> advgen.AttackSpec:
        a = self.raw["attack"]
        return advgen.AttackSpec(
            mode=a["mode"], label=label, kappa=a["kappa"], c=a["c"], h=a["h"], lr=a["lr"],
            max_iters=a["max_iters"], coords_per_iter=a["coords_per_iter"],
            verifications=a["verifications"], objective=a["objective"])

    def bim_spec(self, label: int) -> advgen.BimSpec:
        b = self.raw["attack"]["bim"]
        return advgen.BimSpec(mode=self.raw["attack"]["mode"], label=label, eps=b["eps"],
                              eps_iter=b["eps_iter"], nb_iter=b["nb_iter"],
                              early_stop=b["early_stop"])

    def dataset(self):
        ds = self.raw["dataset"]
        if ds is None:
            return load_digits()
        imgs = [read_idx(ds[k]) for k in ("train_images", "test_images")]
        labels = [read_idx(ds[k]).astype(np.int64) for k in ("train_labels", "test_labels")]
        for im, lb in zip(imgs, labels):
            if im.ndim != 3 or lb.ndim != 1 or len(im) != len(lb):
                raise FormatError("dataset images must be 3-D and match the label count")
        return (imgs[0].reshape(len(imgs[0]), -1), labels[0],
                imgs[1].reshape(len(imgs[1]), -1), labels[1])


# -- text output --------------------------------------------------------------

def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def write_table(path: Path, header: list[str], columns: list[str], rows) -> None:
    """Tab-separated table; ``#`` lines document it, the last one names the columns."""
    lines = [f"# {h}" for h in header] + ["# " + "\t".join(columns)]
    for row in rows:
        lines.append("\t".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def read_table(path) -> tuple[list[str], np.ndarray]:
    """Inverse of :func:`write_table` for numeric tables: ``(column names, values)``."""
    lines = Path(path).read_text().splitlines()
    head = [ln for ln in lines if ln.startswith("#")]
    cols = head[-1][2:].split("\t")
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    vals = np.array([[float(x) for x in ln.split("\t")] for ln in body]).reshape(len(body), len(cols))
    return cols, vals


def _metrics_path(out: Path) -> Path:
    return out / "metrics.json"


def _load_metrics(out: Path) -> dict:
    p = _metrics_path(out)
    if not p.exists():
        return {"format": METRICS_FORMAT, "version": METRICS_VERSION}
    doc = json.loads(p.read_text())
    check_header(doc, METRICS_FORMAT, METRICS_VERSION)
    return doc


def _extractor_path(out: Path, kind: str) -> Path:
    return out / f"extractor-{kind}.json"


# -- commands ---------------------------------------------------------------

def cmd_train_victim(cfg: ExperimentConfig) -> int:
    v = cfg.section("victim")
    xtr, ytr, xte, yte = cfg.dataset()
    model, rep = train_victim(xtr, ytr, hidden=tuple(v["hidden"]), seed=cfg.seeds["victim"],
                              epochs=v["epochs"], batch_size=v["batch_size"], lr=v["lr"],
                              holdout=(xte, yte), min_accuracy=v["min_accuracy"],
                              num_classes=cfg.raw["leakage"]["num_classes"])
    save_model(model, cfg.out / "victim.json")
    _dump(cfg.out / "victim_report.json", {
        "float_accuracy": rep.float_accuracy, "quantized_accuracy": rep.quantized_accuracy,
        "final_loss": rep.final_loss, "n_train": rep.n_train, "n_test": rep.n_holdout,
        "digest": model.digest(), "seed": cfg.seeds["victim"]})
    log.info("victim int8 test accuracy %.4f", rep.quantized_accuracy)
    return EXIT_OK


def cmd_profile(cfg: ExperimentConfig) -> int:
    p = cfg.section("profiling")
    leak = cfg.leakage
    kind = p["scorer"]
    ts = extract.capture_profiling_set("uniform", p["n_traces"], leak, cfg.seeds["profiling"])
    pois, snrs = extract.select_positions_poi(ts, p["poi_fraction"], p["max_points"])
    hyper = None if kind == "template" else cfg.neural_hyper(kind)
    ex = extract.profile(leak, p["n_traces"], kind, cfg.seeds["profiling"], hyper=hyper,
                         reg_epsilon=p["reg_epsilon"], profiling_set=ts, pois=pois,
                         poi_fraction=p["poi_fraction"], max_points=p["max_points"],
                         traces_per_query=cfg.raw["extraction"]["n_traces"])
    extract.save_extractor(ex, _extractor_path(cfg.out, kind), leak)
    for pos, snr in enumerate(snrs):
        write_table(cfg.out / f"snr-pos{pos}.tsv",
                    [f"SNR of logit byte {pos} per trace sample",
                     f"profiling traces {len(ts)}, seed {cfg.seeds['profiling']}, "
                     f"config {leak.fingerprint()}",
                     "inf marks noiseless samples with a class-dependent value"],
                    ["sample", "snr"], ((i, v) for i, v in enumerate(snr.values)))
    _dump(cfg.out / f"profile-{kind}.json", {
        "kind": kind, "fingerprint": leak.fingerprint(), "n_traces": len(ts),
        "peak_snr": [s.peak if np.isfinite(s.peak) else "inf" for s in snrs],
        "poi_counts": [len(q) for q in pois], "provenance": ex.provenance})
    return EXIT_OK


def cmd_eval_extraction(cfg: ExperimentConfig) -> int:
    e = cfg.section("extraction")
    leak = cfg.leakage
    kinds = e["scorers"] or [cfg.raw["profiling"]["scorer"]]
    metrics = _load_metrics(cfg.out)
    curves, hits_by_kind = {}, {}
    for kind in kinds:
        ex = extract.load_extractor(_extractor_path(cfg.out, kind))
        hits, _ = extract.extraction_hits(ex, leak, e["max_traces"], e["repeats"],
                                          cfg.seeds["evaluation"])
        hits_by_kind[kind] = hits
        sr = hits.mean(axis=0)
        curves[kind] = {"repeats": e["repeats"], "max_traces": e["max_traces"],
                        "seed": cfg.seeds["evaluation"], "success_rate": sr.tolist()}
        log.info("%s: success rate at %d traces %s", kind, e["max_traces"],
                 np.round(sr[:, -1], 3).tolist())
    comparisons = []
    for a in kinds:
        for b in kinds:
            if a != b:
                pa = hits_by_kind[a][:, :, -1].ravel()
                pb = hits_by_kind[b][:, :, -1].ravel()
                comparisons.append({"a": a, "b": b, "traces": e["max_traces"],
                                    "mean_a": float(pa.mean()), "mean_b": float(pb.mean()),
                                    "p_a_worse": paired_noninferiority_pvalue(pa, pb)})
    metrics["curves"] = curves
    metrics["comparisons"] = comparisons
    _dump(_metrics_path(cfg.out), metrics)
    return EXIT_OK


def _attack_inputs(cfg: ExperimentConfig, model):
    _, _, xte, yte = cfg.dataset()
    pred = np.argmax(forward_int(model, quantize_pixels(xte, model.input_frac_bits).data), axis=1)
    idx = np.flatnonzero(pred == yte)[: cfg.raw["attack"]["inputs"]]
    return idx, xte, yte


def _target_for(rng: np.random.Generator, y: int, num_classes: int) -> int:
    return int((y + rng.integers(1, num_classes)) % num_classes)


def cmd_attack(cfg: ExperimentConfig) -> int:
    a = cfg.section("attack")
    leak = cfg.leakage
    model = load_model(cfg.out / "victim.json")
    kind = cfg.raw["profiling"]["scorer"]
    ex = extract.load_extractor(_extractor_path(cfg.out, kind))
    n = cfg.raw["extraction"]["n_traces"]
    idx, xte, yte = _attack_inputs(cfg, model)
    trng = np.random.default_rng([cfg.seeds["attack"], 1])
    zoo_reports, bim_reports, failures = [], [], []
    for k in idx:
        y = int(yte[k])
        label = y if a["mode"] == "untargeted" else _target_for(trng, y, model.num_classes)
        seed = int(np.random.SeedSequence([cfg.seeds["attack"], int(k)]).generate_state(1)[0])
        try:
            oracle = extract.logit_oracle(ex, model, leak, seed, n)
            rep = advgen.zoo_attack(oracle, xte[k], cfg.attack_spec(label), seed,
                                    monitor=lambda xs: forward_int(
                                        model, quantize_pixels(xs, model.input_frac_bits).data))
            rep.verified_on_victim = advgen.verify_on_victim(model, rep) if rep.success else None
            zoo_reports.append(rep)
        except (ValueError, RuntimeError) as exc:
            failures.append({"input": int(k), "error": str(exc)})
            log.error("input %d: %s", k, exc)
        bim_reports.append(advgen.bim_whitebox_baseline(model, xte[k], cfg.bim_spec(label)))
    if not zoo_reports:
        raise RuntimeError("every attack input failed")
    zsum = advgen.summarize(zoo_reports)
    zsum["verified_successes"] = sum(bool(r.verified_on_victim) for r in zoo_reports)
    zsum["n_traces_per_query"] = n
    zsum["test_indices"] = [int(k) for k in idx]
    zsum["failures"] = failures
    bsum = advgen.summarize(bim_reports)
    advgen.save_reports(cfg.out / "attack-zoo.json", zoo_reports, zsum)
    advgen.save_reports(cfg.out / "attack-bim.json", bim_reports, bsum)
    advgen.export_adversarial_idx(cfg.out / "adversarial-images-idx3-ubyte", zoo_reports)
    metrics = _load_metrics(cfg.out)
    metrics["attack"] = {"zoo": zsum, "bim": bsum}
    metrics["extraction_accuracy"] = [r.extraction_accuracy for r in zoo_reports]
    _dump(_metrics_path(cfg.out), metrics)
    log.info("zoo success %d/%d, bim transfer %d/%d", zsum["successes"], len(zoo_reports),
             bsum["successes"], len(bim_reports))
    return EXIT_OK


def cmd_plotdata(cfg: ExperimentConfig) -> int:
    metrics = _load_metrics(cfg.out)
    out = cfg.out
    curves = metrics.get("curves", {})
    C = cfg.raw["leakage"]["num_classes"]
    pos_cols = [f"pos{i}" for i in range(C)]
    for kind in extract.SCORER_KINDS:
        c = curves.get(kind)
        head = [f"success rate of {kind} logit extraction vs number of attack traces"]
        if c is None:
            write_table(out / f"sr-{kind}.tsv", head + ["no data"], ["traces"] + pos_cols, [])
            continue
        sr = np.array(c["success_rate"])
        head.append(f"repeats {c['repeats']}, max_traces {c['max_traces']}, seed {c['seed']}")
        write_table(out / f"sr-{kind}.tsv", head, ["traces"] + pos_cols,
                    ([t + 1] + list(sr[:, t]) for t in range(sr.shape[1])))
    rows = []
    for name, s in metrics.get("attack", {}).items():
        rows.append((name, s["inputs"], s["successes"], s["success_rate"],
                     s["mean_l2"] if s["mean_l2"] is not None else "nan",
                     s["mean_queries"] if s["mean_queries"] is not None else "nan",
                     s["mean_traces"] if s["mean_traces"] is not None else "nan"))
    write_table(out / "attack-summary.tsv",
                ["adversarial attack summary per method",
                 "success_rate is over non-rejected inputs; mean_l2 over successes, pixel units"],
                ["method", "inputs", "successes", "success_rate", "mean_l2", "mean_queries",
                 "mean_traces"], rows)
    acc = metrics.get("extraction_accuracy", [])
    write_table(out / "extraction-accuracy.tsv",
                ["fraction of ZOO probes whose logit vector was extracted exactly",
                 "one row per attacked input and iteration"],
                ["input", "iteration", "accuracy"],
                ((i, t + 1, v) for i, series in enumerate(acc) for t, v in enumerate(series)))
    return EXIT_OK


COMMANDS = {
    "train-victim": cmd_train_victim,
    "profile": cmd_profile,
    "eval-extraction": cmd_eval_extraction,
    "attack": cmd_attack,
    "plotdata": cmd_plotdata,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="logitsca",
                                 description="Logit extraction through softmax leakage and "
                                             "black-box adversarial examples.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="derive every stage seed from N")
        sp.add_argument("--out", type=Path, help="output directory")
        sp.add_argument("--scorer", choices=extract.SCORER_KINDS)
        sp.add_argument("--n-traces", type=int, dest="n_traces",
                        help="attack traces per oracle query")
        sp.add_argument("--sigma", type=float, help="leakage noise standard deviation")
        sp.add_argument("--budget", type=int, help="ZOO iteration budget")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def _read_config(path: Path | None) -> dict | None:
    if path is None:
        return None
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return doc


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.build(_read_config(args.config), args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    cfg.out.mkdir(parents=True, exist_ok=True)
    _dump(cfg.out / "config.json", cfg.to_dict())
    sidecar = logging.FileHandler(cfg.out / "run.log")
    sidecar.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    log.addHandler(sidecar)
    log.setLevel(logging.INFO)
    start = time.time()
    try:
        code = COMMANDS[args.command](cfg)
    except (FormatError, IdxFormatError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        code = EXIT_DATA
    except (EmptyPoiError, TrainingDiverged, VictimTrainingError, extract.FingerprintMismatch,
            RuntimeError) as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        code = EXIT_ATTACK
    log.info("%s finished with exit code %d in %.1f s", args.command, code, time.time() - start)
    log.removeHandler(sidecar)
    sidecar.close()
    return code


if __name__ == "__main__":
    sys.exit(main())
