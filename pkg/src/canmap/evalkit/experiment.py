"""End-to-end experiment: cohort -> harmonizer -> harmonized test sites -> predictor -> reports.

Run directory layout::

    config.json          resolved configuration (seed included)
    stages.json          completed stages, used to resume partial runs
    manifests/           cohort.csv (or a copy of the given manifest), harmonized/
    checkpoints/         harmonizer.ckpt, predictor.ckpt
    reports/             metrics.csv, predictions.csv, ks.csv, histograms.csv
    maps/                mean/std maps as .pgm and .csv
    history.csv          harmonizer loss per step
    predictor_history.csv
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import runtime
from ..harmonizer import (DiscriminatorSpec, GeneratorSpec, HarmonizerTrainConfig, IdentityHarmonizer,
                          harmonize_dataset, load_checkpoint, train_harmonizer, write_history)
from ..predictor import (PredictorSpec, PredictorTrainConfig, ScanPrediction, build_predictor, load_predictor,
                         predict_slices, save_predictor, train_predictor)
from ..synthcohort import CohortConfig, generate_cohort
from ..voldata import Manifest, load_slices, read_manifest
from .diagnostics import hist_report, write_report
from .metrics import auc, mae, pearson

logger = logging.getLogger(__name__)

TASKS = {"age": "regression", "classify": "classification"}
ARMS = ("unharmonized", "harmonized")
METRIC_FIELDS = ("arm", "harmonized", "site", "aggregation", "n", "mae", "pearson_r", "auc",
                 "reference", "seed", "config_digest")


@dataclass
class ExperimentConfig:
    reference: str
    sources: list[str]
    task: str = "age"
    cohort: dict | None = None
    manifest: str | None = None
    n_slices: int = 80
    image_size: int = 64
    harmonizer: dict | str = field(default_factory=dict)
    harmonizer_checkpoint: str | None = None
    predictor: dict = field(default_factory=dict)
    arms: list[str] = field(default_factory=lambda: list(ARMS))
    seed: int = 0
    deterministic: bool = False

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {sorted(TASKS)}, got {self.task!r}")
        if (self.cohort is None) == (self.manifest is None):
            raise ValueError("give exactly one of 'cohort' or 'manifest'")
        if not self.sources:
            raise ValueError("need at least one source site")
        if self.reference in self.sources:
            raise ValueError("reference site cannot also be a source")
        bad = set(self.arms) - set(ARMS)
        if bad:
            raise ValueError(f"unknown arms {sorted(bad)}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return copy.deepcopy(asdict(self))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ExperimentResult:
    run_dir: Path
    metrics: list[dict]
    predictions: list[dict]
    hist: object
    harmonizer_history: list[dict]
    predictor_history: list[dict]

    def metric(self, arm: str, site: str, name: str, aggregation: str | None = None) -> float:
        for row in self.metrics:
            if row["arm"] == arm and row["site"] == site and (aggregation is None or row["aggregation"] == aggregation):
                return row[name]
        raise KeyError((arm, site, name))


class _Stages:
    def __init__(self, path: Path):
        self.path = path
        self.done = json.loads(path.read_text()) if path.exists() else []

    def __contains__(self, name):
        return name in self.done

    def mark(self, name):
        if name not in self.done:
            self.done.append(name)
            self.path.write_text(json.dumps(self.done, indent=1))


def _harmonizer_parts(hcfg: dict, image_size: int, seed: int):
    gen = GeneratorSpec(**dict({"image_size": image_size}, **hcfg.get("generator", {})))
    disc = DiscriminatorSpec(**hcfg.get("discriminator", {}))
    train = HarmonizerTrainConfig(**dict({"seed": seed}, **hcfg.get("train", {})))
    return gen, disc, train


def _targets(records, task: str) -> np.ndarray:
    key = "age" if task == "age" else "label"
    vals = [getattr(r, key) for r in records]
    if any(v is None for v in vals):
        raise ValueError(f"task {task!r} needs a {key} for every subject")
    return np.asarray(vals, dtype=np.float64)


def scan_predictions(model, manifest: Manifest, n_slices: int) -> list[dict]:
    """Median-aggregated prediction for every scan in ``manifest``."""
    slices, owners = load_slices(manifest, n_slices, model.spec.image_size)
    preds = predict_slices(model, slices)
    spans: dict[str, list[int]] = {}
    for i, o in enumerate(owners):
        spans.setdefault(o.subject_id, [i, i])[1] = i + 1
    out = []
    for rec in manifest:
        lo, hi = spans[rec.subject_id]
        sp = ScanPrediction(rec.subject_id, preds[lo:hi])
        out.append({"subject_id": rec.subject_id, "site": rec.site, "age": rec.age, "label": rec.label,
                    "prediction": sp.aggregate})
    return out


def metric_row(rows: list[dict], task: str) -> dict:
    pred = np.array([r["prediction"] for r in rows])
    out = {"n": len(rows), "mae": "", "pearson_r": "", "auc": ""}
    if task == "age":
        truth = np.array([r["age"] for r in rows], dtype=np.float64)
        out["mae"] = mae(pred, truth)
        if len(rows) > 1 and np.ptp(pred) > 0 and np.ptp(truth) > 0:
            out["pearson_r"] = pearson(pred, truth)
    else:
        labels = np.array([r["label"] for r in rows])
        if len(set(labels.tolist())) == 2:
            out["auc"] = auc(pred, labels)
    return out


def summarize(predictions: dict[str, list[dict]], sources: list[str], task: str, reference: str,
              seed: int, digest: str) -> list[dict]:
    """Per-site, pooled and macro-averaged metric rows for each arm."""
    rows = []
    for arm, preds in predictions.items():
        per_site = []
        for site in sources:
            site_rows = [p for p in preds if p["site"] == site]
            if site_rows:
                m = metric_row(site_rows, task)
                per_site.append(m)
                rows.append(dict(arm=arm, site=site, aggregation="site", **m))
        if len(sources) > 1:
            rows.append(dict(arm=arm, site="all", aggregation="pooled", **metric_row(preds, task)))
            macro = {"n": sum(m["n"] for m in per_site)}
            for k in ("mae", "pearson_r", "auc"):
                vals = [m[k] for m in per_site if m[k] != ""]
                macro[k] = float(np.mean(vals)) if vals and len(vals) == len(per_site) else ""
            rows.append(dict(arm=arm, site="all", aggregation="macro", **macro))
    for r in rows:
        r.update(harmonized="yes" if r["arm"] == "harmonized" else "no", reference=reference,
                 seed=seed, config_digest=digest)
    return rows


def _write_csv(path: Path, rows: list[dict], fields):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_experiment(config: ExperimentConfig | dict, out_dir) -> ExperimentResult:
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runtime.configure(config.seed, deterministic=config.deterministic)
    digest = config.digest()
    cfg_path = out / "config.json"
    if cfg_path.exists() and json.loads(cfg_path.read_text()).get("digest") != digest:
        raise ValueError(f"{out} holds a run with a different configuration; use a fresh directory")
    cfg_path.write_text(json.dumps(dict(config.to_dict(), digest=digest), indent=2, sort_keys=True))
    stages = _Stages(out / "stages.json")
    n, size = config.n_slices, config.image_size

    # cohort
    cohort_csv = out / "manifests" / "cohort" / "manifest.csv"
    if "cohort" not in stages:
        if config.cohort is not None:
            cohort = dict(config.cohort)
            cohort.setdefault("seed", config.seed)
            generate_cohort(CohortConfig.from_dict(cohort), cohort_csv.parent)
        else:
            from ..voldata import write_manifest
            write_manifest(read_manifest(config.manifest), cohort_csv)
        stages.mark("cohort")
    manifest = read_manifest(cohort_csv)
    for s in [config.reference] + config.sources:
        if s not in manifest.site_names:
            raise ValueError(f"site {s!r} not in manifest (sites: {manifest.site_names})")

    # harmonizer
    h_history: list[dict] = []
    ckpt_path = out / "checkpoints" / "harmonizer.ckpt"
    if config.harmonizer == "identity":
        hmodel = IdentityHarmonizer(config.sources, config.reference, size)
    elif config.harmonizer_checkpoint:
        hmodel = load_checkpoint(config.harmonizer_checkpoint)
    elif "harmonizer" in stages and ckpt_path.exists():
        hmodel = load_checkpoint(ckpt_path)
        if (out / "history.csv").exists():
            h_history = _read_csv(out / "history.csv")
    else:
        gen, disc, tcfg = _harmonizer_parts(config.harmonizer, size, config.seed)
        ref_slices, _ = load_slices(manifest.select(config.reference, "train"), n, size)
        src = {s: load_slices(manifest.select(s, "train"), n, size)[0] for s in config.sources}
        hmodel, h_history = train_harmonizer(src, ref_slices, tcfg, gen, disc, config.reference,
                                             out_dir=out / "checkpoints")
        (out / "checkpoints" / "history.csv").replace(out / "history.csv")
        stages.mark("harmonizer")

    # harmonize source test splits
    test_src = manifest.select(config.sources, "test")
    harm_csv = out / "manifests" / "harmonized" / "manifest.csv"
    if "harmonize" not in stages or not harm_csv.exists():
        harmonized = harmonize_dataset(hmodel, test_src, harm_csv.parent, n)
        stages.mark("harmonize")
    else:
        harmonized = read_manifest(harm_csv)

    # predictor on the reference site only
    p_path = out / "checkpoints" / "predictor.ckpt"
    task = TASKS[config.task]
    if "predictor" in stages and p_path.exists():
        pmodel = load_predictor(p_path)
        p_history = _read_csv(out / "predictor_history.csv")
    else:
        pspec = PredictorSpec(**dict({"image_size": size, "task": task}, **config.predictor.get("spec", {})))
        pcfg = PredictorTrainConfig(**dict({"seed": config.seed}, **config.predictor.get("train", {})))
        tr = manifest.select(config.reference, "train")
        va = manifest.select(config.reference, "val")
        xs, owners = load_slices(tr, n, size)
        xv, vowners = load_slices(va, n, size)
        pmodel = build_predictor(pspec, seed=config.seed)
        pmodel, p_history = train_predictor(pmodel, xs, _targets(owners, config.task),
                                            xv if len(va) else None,
                                            _targets(vowners, config.task) if len(va) else None, pcfg)
        save_predictor(pmodel, p_path)
        _write_csv(out / "predictor_history.csv", p_history, ("epoch", "train_loss", "val_loss", "lr"))
        stages.mark("predictor")

    # evaluation
    arm_data = {"unharmonized": test_src, "harmonized": harmonized}
    predictions = {arm: scan_predictions(pmodel, arm_data[arm], n) for arm in config.arms}
    metrics = summarize(predictions, config.sources, config.task, config.reference, config.seed, digest)
    ref_test = manifest.select(config.reference, "test")
    if len(ref_test):
        ref_preds = scan_predictions(pmodel, ref_test, n)
        metrics.append(dict(arm="reference", harmonized="n/a", site=config.reference, aggregation="site",
                            reference=config.reference, seed=config.seed, config_digest=digest,
                            **metric_row(ref_preds, config.task)))
    pred_rows = [dict(arm=arm, **p) for arm, ps in predictions.items() for p in ps]
    _write_csv(out / "reports" / "metrics.csv", metrics, METRIC_FIELDS)
    _write_csv(out / "reports" / "predictions.csv", pred_rows,
               ("arm", "subject_id", "site", "age", "label", "prediction"))
    stages.mark("evaluate")

    # diagnostics on the source test splits against the reference test split
    report = None
    if len(ref_test):
        report = hist_report(test_src, ref_test, harmonized, n, size)
        write_report(report, out)
        stages.mark("diagnostics")
    if h_history and not (out / "history.csv").exists():
        write_history(h_history, out / "history.csv")
    return ExperimentResult(out, metrics, pred_rows, report, h_history, p_history)
