"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime or divergence error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .. import runtime

logger = logging.getLogger("canmap")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise UsageError(f"config not found: {path}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"invalid JSON in {path}: {e}") from e


def cmd_synth(args):
    from ..synthcohort import CohortConfig, generate_cohort
    cfg = _load_json(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    m = generate_cohort(CohortConfig.from_dict(cfg), args.out)
    print(f"{len(m)} subjects -> {Path(args.out) / 'manifest.csv'}")


def cmd_train_harmonizer(args):
    from ..harmonizer import DiscriminatorSpec, GeneratorSpec, HarmonizerTrainConfig, train_harmonizer
    from ..voldata import load_slices, read_manifest
    cfg = _load_json(args.config)
    manifest = read_manifest(args.manifest)
    n = int(cfg.get("n_slices", 80))
    gen = GeneratorSpec(**cfg.get("generator", {}))
    split = cfg.get("split", "train")
    train = dict(cfg.get("train", {}))
    if args.seed is not None:
        train["seed"] = args.seed
    sources = [s for s in args.sources.split(",") if s]
    for s in sources + [args.reference]:
        if s not in manifest.site_names:
            raise UsageError(f"site {s!r} not in manifest (sites: {manifest.site_names})")
    ref, _ = load_slices(manifest.select(args.reference, split), n, gen.image_size)
    src = {s: load_slices(manifest.select(s, split), n, gen.image_size)[0] for s in sources}
    train_harmonizer(src, ref, HarmonizerTrainConfig(**train), gen, DiscriminatorSpec(**cfg.get("discriminator", {})),
                     args.reference, out_dir=args.out)
    print(f"checkpoint -> {Path(args.out) / 'harmonizer.ckpt'}")


def cmd_harmonize(args):
    from ..harmonizer import harmonize_dataset, load_checkpoint
    from ..voldata import read_manifest
    model = load_checkpoint(args.model)
    m = harmonize_dataset(model, read_manifest(args.manifest), args.out, args.n_slices)
    print(f"{len(m)} volumes -> {Path(args.out) / 'manifest.csv'}")


def cmd_train_predictor(args):
    import numpy as np

    from ..evalkit.experiment import TASKS, _targets, _write_csv
    from ..predictor import PredictorSpec, PredictorTrainConfig, build_predictor, save_predictor, train_predictor
    from ..voldata import load_slices, read_manifest
    cfg = _load_json(args.config)
    manifest = read_manifest(args.manifest)
    n = int(cfg.get("n_slices", 80))
    sites = cfg.get("sites")
    spec = PredictorSpec(**dict(cfg.get("spec", {}), task=TASKS[args.task]))
    train = dict(cfg.get("train", {}))
    if args.seed is not None:
        train["seed"] = args.seed
    tr, va = manifest.select(sites, "train"), manifest.select(sites, "val")
    xs, owners = load_slices(tr, n, spec.image_size)
    xv, vown = load_slices(va, n, spec.image_size)
    model = build_predictor(spec, seed=train.get("seed", 0))
    model, hist = train_predictor(model, xs, _targets(owners, args.task), xv if len(va) else None,
                                  _targets(vown, args.task) if len(va) else None, PredictorTrainConfig(**train))
    out = Path(args.out)
    save_predictor(model, out / "predictor.ckpt", {"n_slices": n})
    _write_csv(out / "predictor_history.csv", hist, ("epoch", "train_loss", "val_loss", "lr"))
    print(f"checkpoint -> {out / 'predictor.ckpt'} ({len(hist)} epochs)")


def cmd_evaluate(args):
    from ..evalkit.experiment import METRIC_FIELDS, _write_csv, scan_predictions, summarize
    from ..predictor import load_predictor, read_predictor_meta
    from ..voldata import read_manifest
    model = load_predictor(args.model)
    n = args.n_slices or int(read_predictor_meta(args.model).get("n_slices", 80))
    manifest = read_manifest(args.manifest)
    if args.split != "all":
        manifest = manifest.select(split=args.split)
    if len(manifest) == 0:
        raise UsageError("no scans to evaluate")
    task = "age" if model.spec.task == "regression" else "classify"
    preds = scan_predictions(model, manifest, n)
    rows = summarize({args.arm: preds}, manifest.site_names, task, "", args.seed or 0, "")
    _write_csv(Path(args.out), rows, METRIC_FIELDS)
    if args.predictions:
        _write_csv(Path(args.predictions), preds, ("subject_id", "site", "age", "label", "prediction"))
    print(f"metrics -> {args.out}")


def cmd_run_experiment(args):
    from .experiment import ExperimentConfig, run_experiment
    cfg = _load_json(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.deterministic:
        cfg["deterministic"] = True
    res = run_experiment(ExperimentConfig.from_dict(cfg), args.out)
    for row in res.metrics:
        print(",".join(str(row.get(k, "")) for k in ("arm", "site", "aggregation", "n", "mae", "pearson_r", "auc")))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--deterministic", action="store_true", help="single-threaded, deterministic kernels")
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="canmap", description="Canonical-mapping harmonization toolkit", parents=[common])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic multi-site cohort")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train-harmonizer", parents=[common])
    s.add_argument("--reference", required=True)
    s.add_argument("--sources", required=True, help="comma-separated source site names")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_harmonizer)

    s = sub.add_parser("harmonize", parents=[common])
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n-slices", type=int, default=80)
    s.set_defaults(func=cmd_harmonize)

    s = sub.add_parser("train-predictor", parents=[common])
    s.add_argument("--task", required=True, choices=["age", "classify"])
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_predictor)

    s = sub.add_parser("evaluate", parents=[common])
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    s.add_argument("--arm", default="unharmonized")
    s.add_argument("--n-slices", type=int, default=None)
    s.add_argument("--predictions", help="optional per-scan prediction CSV")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("run-experiment", parents=[common])
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_run_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # --help (0) or a usage error (1)
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        runtime.configure(args.seed, deterministic=args.deterministic, threads=args.threads)
        args.func(args)
    except UsageError as e:
        print(f"canmap: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit code 2
        logger.debug("failure", exc_info=True)
        print(f"canmap: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
