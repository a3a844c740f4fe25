import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from canmap.predictor import (ConvergenceSchedule, PredictorSpec, PredictorTrainConfig, ScanPrediction,
                              build_predictor, count_parameters, load_predictor, median, predict_scan,
                              predict_slices, read_predictor_meta, replay_schedule, save_predictor, train_predictor)
from canmap.voldata import Volume

SMALL = PredictorSpec(image_size=16, base_channels=4, fc_width=16)


# ---------------------------------------------------------------- architecture

def test_ten_weighted_layers():
    m = build_predictor(seed=0)
    names = m.weighted_layers()
    assert len(names) == 10
    params = dict(m.named_parameters())
    assert all(f"{n}.weight" in params for n in names)
    convs = [n for n in names if params[f"{n}.weight"].ndim == 4]
    assert len(convs) == 9 and m.fc.out_features == 512


def test_doubling_fc_width_changes_only_fc():
    a = build_predictor(PredictorSpec(fc_width=512))
    b = build_predictor(PredictorSpec(fc_width=1024))
    for prefix in ("stem", "block1", "block2", "block3", "block4"):
        assert count_parameters(a, prefix) == count_parameters(b, prefix)
    in_features = a.fc.in_features
    assert count_parameters(b, "fc") - count_parameters(a, "fc") == 512 * (in_features + 1)
    assert count_parameters(b, "out") - count_parameters(a, "out") == 512


def test_scalar_output_default_spec():
    m = build_predictor(seed=0).eval()
    out = m(torch.zeros(3, 1, 64, 64))
    assert out.shape == (3,)


def test_spec_validation():
    with pytest.raises(ValueError):
        PredictorSpec(image_size=4)
    with pytest.raises(ValueError):
        PredictorSpec(task="segmentation")
    with pytest.raises(ValueError):
        PredictorTrainConfig(lr=0)
    with pytest.raises(ValueError):
        PredictorTrainConfig(max_epochs=0)


def test_dropout_only_in_training():
    m = build_predictor(SMALL, seed=0)
    x = torch.randn(4, 1, 16, 16)
    m.eval()
    assert torch.equal(m(x), m(x))
    m.train()
    torch.manual_seed(1)
    a = m(x)
    torch.manual_seed(2)
    assert not torch.equal(a, m(x))


def test_classification_outputs_in_open_unit_interval():
    m = build_predictor(PredictorSpec(image_size=16, base_channels=4, fc_width=16, task="classification"), seed=0)
    p = predict_slices(m, np.random.default_rng(0).normal(size=(20, 16, 16)) * 50)
    assert np.all((p > 0) & (p < 1))


# ---------------------------------------------------------------- schedule

def test_lr_drops_after_five_constant_epochs():
    r = replay_schedule([1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.4], lr=3e-4)
    # epoch 2..6 constant (epoch 2 opens the run) -> the drop applies from epoch 7
    assert r["lrs"][:6] == [3e-4] * 6 and r["lrs"][6] == pytest.approx(3e-5)
    r = replay_schedule([0.5] * 6, lr=3e-4)
    assert r["lrs"][:5] == [3e-4] * 5 and r["lrs"][5] == pytest.approx(3e-5)


def test_constant_within_tolerance():
    losses = [1.0, 1.0005, 1.0009, 1.0001, 0.9995, 0.5]
    assert replay_schedule(losses, lr=1.0)["lrs"][5] == pytest.approx(0.1)
    assert replay_schedule([1.0, 1.002, 1.004, 1.006, 1.008, 1.0], lr=1.0)["lrs"][5] == 1.0


def test_stop_after_fifth_rise():
    r = replay_schedule([3.0, 2.0, 1.5, 1.2, 1.0, 0.9], [1.0, 1.1, 1.2, 1.3, 1.4, 1.5])
    assert r["stop_epoch"] == 6 and "increased" in r["reason"]
    r = replay_schedule([3.0, 2.0, 1.5, 1.2, 1.0], [1.0, 1.1, 1.2, 1.3, 1.4])
    assert r["stop_epoch"] is None


def test_rise_counter_resets():
    r = replay_schedule([5, 4, 3, 2, 1, 0.5, 0.2, 0.1], [1.0, 1.1, 1.2, 1.0, 1.1, 1.2, 1.3, 1.4])
    assert r["stop_epoch"] is None


def test_stop_after_ten_constant_epochs():
    r = replay_schedule([0.3] * 12)
    assert r["stop_epoch"] == 10 and "constant" in r["reason"]


def test_stop_beats_second_plateau_drop():
    sched = ConvergenceSchedule(1.0)
    lrs = []
    for _ in range(10):
        lr, stop, _ = sched.update(0.2)
        lrs.append(lr)
    assert stop and lrs[4] == pytest.approx(0.1) and lrs[-1] == pytest.approx(0.1)


# ---------------------------------------------------------------- training

def blobs(n, seed=0, size=16):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    labels = np.arange(n) % 2
    out = []
    for lab in labels:
        cx = size * (0.3 if lab == 0 else 0.7) + rng.normal(0, 0.5)
        cy = size * 0.5 + rng.normal(0, 0.5)
        img = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * 2.0 ** 2))
        out.append(2 * img - 1 + rng.normal(0, 0.05, size=img.shape))
    return np.asarray(out, dtype=np.float32), labels.astype(float)


def test_blob_classification_converges():
    x, y = blobs(64)
    m = build_predictor(PredictorSpec(image_size=16, base_channels=4, fc_width=32, task="classification"), seed=0)
    m, hist = train_predictor(m, x, y, config=PredictorTrainConfig(max_epochs=50, batch_size=16, seed=0))
    assert len(hist) <= 50
    assert min(h["train_loss"] for h in hist) < 0.1


def test_history_fields_and_lr():
    x, y = blobs(16)
    m = build_predictor(SMALL, seed=0)
    _, hist = train_predictor(m, x, y * 10 + 30, x[:4], y[:4] * 10 + 30, PredictorTrainConfig(max_epochs=3))
    assert [h["epoch"] for h in hist] == [1, 2, 3]
    assert all(np.isfinite(h["val_loss"]) and h["lr"] == 3e-4 for h in hist)


def test_missing_targets_rejected():
    x, y = blobs(4)
    m = build_predictor(SMALL, seed=0)
    with pytest.raises(ValueError):
        train_predictor(m, x, y[:3])
    y[1] = np.nan
    with pytest.raises(ValueError):
        train_predictor(m, x, y)
    cls = build_predictor(PredictorSpec(image_size=16, base_channels=4, fc_width=16, task="classification"))
    with pytest.raises(ValueError):
        train_predictor(cls, x, np.array([0, 1, 2, 1.0]))


def test_non_finite_loss_aborts():
    x, y = blobs(4)
    x[0, 0, 0] = np.inf
    with pytest.raises(FloatingPointError):
        train_predictor(build_predictor(SMALL, seed=0), x, y, config=PredictorTrainConfig(max_epochs=2))


def test_regression_head_in_target_units():
    x, _ = blobs(32)
    ages = np.linspace(20, 80, 32)
    m, _ = train_predictor(build_predictor(SMALL, seed=0), x, ages, config=PredictorTrainConfig(max_epochs=2))
    assert m.target_mean.item() == pytest.approx(50.0)
    assert 0 < predict_slices(m, x).mean() < 100


# ---------------------------------------------------------------- aggregation

@pytest.mark.parametrize("vals,expected", [([5.0], 5.0), ([1, 2, 100], 2.0), ([1, 2, 3, 4], 2.5)])
def test_median_examples(vals, expected):
    assert ScanPrediction("s", vals).aggregate == expected


@settings(max_examples=60)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40), st.randoms())
def test_median_permutation_invariant_and_bounded(vals, rnd):
    shuffled = list(vals)
    rnd.shuffle(shuffled)
    m = median(vals)
    assert m == median(shuffled)
    assert min(vals) <= m <= max(vals)


def test_empty_scan_rejected():
    with pytest.raises(ValueError):
        ScanPrediction("s", [])


def test_predict_scan_deterministic():
    m = build_predictor(SMALL, seed=0)
    vol = Volume(np.random.default_rng(0).uniform(size=(12, 20, 20)), "s1")
    a, b = predict_scan(m, vol, 6), predict_scan(m, vol, 6)
    assert len(a.slice_predictions) == 6
    assert np.array_equal(a.slice_predictions, b.slice_predictions) and a.aggregate == b.aggregate


def test_checkpoint_roundtrip(tmp_path):
    m = build_predictor(SMALL, seed=3)
    m.target_mean.fill_(42.0)
    save_predictor(m, tmp_path / "p.ckpt", {"n_slices": 6})
    back = load_predictor(tmp_path / "p.ckpt")
    assert back.spec == m.spec and read_predictor_meta(tmp_path / "p.ckpt") == {"n_slices": 6}
    for (k, a), (_, b) in zip(m.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), k
