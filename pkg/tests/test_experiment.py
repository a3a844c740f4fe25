import csv
import json

import numpy as np
import pytest

from canmap.evalkit import cli
from canmap.evalkit.experiment import ExperimentConfig, run_experiment

COHORT = {"sites": [{"name": "ref", "n_subjects": 10},
                    {"name": "src", "n_subjects": 10, "effect": {"gain": 1.3, "gamma": 0.8, "bias_amplitude": 0.2,
                                                                 "noise_sigma": 0.03}}],
          "size": 16, "depth": 4, "seed": 5}
HARM = {"generator": {"base_channels": 4, "n_res": 1}, "discriminator": {"base_channels": 4, "n_layers": 2},
        "train": {"steps": 4, "log_every": 0}}
PRED = {"spec": {"base_channels": 2, "fc_width": 8}, "train": {"max_epochs": 2, "batch_size": 8}}


def config(**kw):
    d = dict(reference="ref", sources=["src"], task="age", cohort=COHORT, n_slices=2, image_size=16,
             harmonizer=HARM, predictor=PRED, seed=1, deterministic=True)
    d.update(kw)
    return d


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(reference="a", sources=["a"], cohort=COHORT)
    with pytest.raises(ValueError):
        ExperimentConfig(reference="a", sources=["b"])
    with pytest.raises(ValueError):
        ExperimentConfig(reference="a", sources=["b"], cohort=COHORT, task="segment")
    with pytest.raises(ValueError):
        ExperimentConfig(reference="a", sources=["b"], cohort=COHORT, arms=["nope"])


def test_end_to_end_layout_and_resume(tmp_path):
    res = run_experiment(config(), tmp_path / "run")
    run = tmp_path / "run"
    for rel in ("config.json", "stages.json", "manifests/cohort/manifest.csv", "manifests/harmonized/manifest.csv",
                "checkpoints/harmonizer.ckpt", "checkpoints/predictor.ckpt", "reports/metrics.csv",
                "reports/predictions.csv", "reports/ks.csv", "reports/histograms.csv", "history.csv",
                "predictor_history.csv", "maps/reference_mean.pgm"):
        assert (run / rel).exists(), rel
    assert json.loads((run / "stages.json").read_text()) == ["cohort", "harmonizer", "harmonize", "predictor",
                                                              "evaluate", "diagnostics"]
    rows = read_rows(run / "reports" / "metrics.csv")
    arms = [(r["arm"], r["harmonized"], r["site"]) for r in rows]
    assert arms == [("unharmonized", "no", "src"), ("harmonized", "yes", "src"), ("reference", "n/a", "ref")]
    assert all(r["seed"] == "1" and r["config_digest"] == ExperimentConfig(**config()).digest() for r in rows)
    assert len(res.harmonizer_history) == 4

    # resume: nothing is retrained, metrics are reproduced exactly
    before = (run / "reports" / "metrics.csv").read_bytes()
    ckpt_time = (run / "checkpoints" / "harmonizer.ckpt").stat().st_mtime_ns
    res2 = run_experiment(config(), run)
    assert (run / "checkpoints" / "harmonizer.ckpt").stat().st_mtime_ns == ckpt_time
    assert (run / "reports" / "metrics.csv").read_bytes() == before
    assert len(res2.harmonizer_history) == 4

    with pytest.raises(ValueError, match="different configuration"):
        run_experiment(config(seed=2), run)


def test_partial_run_resumes_after_harmonizer(tmp_path):
    run = tmp_path / "run"
    run_experiment(config(), run)
    full = (run / "reports" / "metrics.csv").read_bytes()
    stages = json.loads((run / "stages.json").read_text())
    (run / "stages.json").write_text(json.dumps(stages[:2]))
    (run / "reports" / "metrics.csv").unlink()
    run_experiment(config(), run)
    assert (run / "reports" / "metrics.csv").read_bytes() == full


def test_reports_deterministic(tmp_path):
    run_experiment(config(), tmp_path / "a")
    run_experiment(config(), tmp_path / "b")
    for rel in ("reports/metrics.csv", "reports/predictions.csv", "reports/ks.csv", "history.csv"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_identity_null_experiment_bitwise_equal_arms(tmp_path):
    res = run_experiment(config(harmonizer="identity", task="classify"), tmp_path / "null")
    u = [r for r in res.metrics if r["arm"] == "unharmonized"]
    h = [r for r in res.metrics if r["arm"] == "harmonized"]
    keys = ("site", "aggregation", "n", "mae", "pearson_r", "auc")
    assert [tuple(r[k] for k in keys) for r in u] == [tuple(r[k] for k in keys) for r in h]
    pu = {p["subject_id"]: p["prediction"] for p in res.predictions if p["arm"] == "unharmonized"}
    ph = {p["subject_id"]: p["prediction"] for p in res.predictions if p["arm"] == "harmonized"}
    assert pu == ph


def test_multisite_pooled_and_macro(tmp_path):
    cohort = dict(COHORT, sites=COHORT["sites"] + [{"name": "src2", "n_subjects": 10,
                                                   "effect": {"gain": 0.8, "noise_sigma": 0.01}}])
    res = run_experiment(config(cohort=cohort, sources=["src", "src2"]), tmp_path / "m")
    aggs = {(r["arm"], r["site"], r["aggregation"]) for r in res.metrics}
    for arm in ("unharmonized", "harmonized"):
        assert {(arm, "src", "site"), (arm, "src2", "site"), (arm, "all", "pooled"), (arm, "all", "macro")} <= aggs
    macro = res.metric("unharmonized", "all", "mae", "macro")
    per = [res.metric("unharmonized", s, "mae", "site") for s in ("src", "src2")]
    assert macro == pytest.approx(np.mean(per))


# ---------------------------------------------------------------- CLI

def test_cli_usage_errors(tmp_path, capsys):
    assert cli.main(["synth"]) == 1
    assert cli.main([]) == 1
    assert cli.main(["synth", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 1
    (tmp_path / "bad.json").write_text("{not json")
    assert cli.main(["run-experiment", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) == 1
    assert cli.main(["train-predictor", "--task", "height", "--manifest", "m", "--out", "o"]) == 1


def test_cli_runtime_error_exit_2(tmp_path):
    assert cli.main(["harmonize", "--model", str(tmp_path / "none.ckpt"), "--manifest", str(tmp_path / "m.csv"),
                     "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "cohort.json").write_text(json.dumps({"sites": [{"name": "a", "n_subjects": 0}]}))
    assert cli.main(["synth", "--config", str(tmp_path / "cohort.json"), "--out", str(tmp_path / "c")]) == 2


def test_cli_pipeline(tmp_path, capsys):
    (tmp_path / "cohort.json").write_text(json.dumps(COHORT))
    (tmp_path / "h.json").write_text(json.dumps(dict(HARM, n_slices=2, generator=dict(HARM["generator"],
                                                                                        image_size=16))))
    (tmp_path / "p.json").write_text(json.dumps(dict(PRED, n_slices=2, sites=["ref"],
                                                     spec=dict(PRED["spec"], image_size=16))))
    c, o = str(tmp_path / "c"), tmp_path
    assert cli.main(["synth", "--config", str(tmp_path / "cohort.json"), "--out", c, "--seed", "3"]) == 0
    m = f"{c}/manifest.csv"
    assert cli.main(["train-harmonizer", "--reference", "ref", "--sources", "src", "--manifest", m,
                     "--config", str(tmp_path / "h.json"), "--out", str(o / "h"), "--deterministic"]) == 0
    assert cli.main(["train-harmonizer", "--reference", "ref", "--sources", "nope", "--manifest", m,
                     "--out", str(o / "x")]) == 1
    assert cli.main(["harmonize", "--model", str(o / "h" / "harmonizer.ckpt"), "--manifest", m,
                     "--out", str(o / "hm"), "--n-slices", "2"]) == 0
    assert cli.main(["train-predictor", "--task", "age", "--manifest", m, "--config", str(tmp_path / "p.json"),
                     "--out", str(o / "p")]) == 0
    assert cli.main(["evaluate", "--model", str(o / "p" / "predictor.ckpt"), "--manifest", str(o / "hm" / "manifest.csv"),
                     "--out", str(o / "eval.csv"), "--arm", "harmonized", "--predictions", str(o / "pred.csv")]) == 0
    rows = read_rows(o / "eval.csv")
    assert {r["site"] for r in rows} >= {"src"} and all(r["arm"] == "harmonized" for r in rows)
    assert len(read_rows(o / "pred.csv")) == 4
    (tmp_path / "exp.json").write_text(json.dumps(config()))
    assert cli.main(["run-experiment", "--config", str(tmp_path / "exp.json"), "--out", str(o / "run")]) == 0
    assert "unharmonized,src,site" in capsys.readouterr().out


def test_module_entry_point():
    import subprocess
    import sys
    r = subprocess.run([sys.executable, "-m", "canmap", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "run-experiment" in r.stdout
