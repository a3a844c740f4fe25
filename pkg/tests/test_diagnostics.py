import numpy as np
import pytest

from canmap.evalkit.diagnostics import (BIN_EDGES, binned_ks, hist_report, hist_report_from_slices, histogram,
                                        ks_distance, mean_std_maps, read_pgm, tercile_regions, write_pgm,
                                        write_report)
from canmap.synthcohort import AnatomyConfig, CohortConfig, SiteEffect, SiteSpec, generate_cohort
from canmap.voldata import Manifest, ManifestRecord, Volume, save_volume


def ks_oracle(a, b):
    # sup over every sample point of |F_a - F_b|, by direct counting
    a, b = list(np.ravel(a)), list(np.ravel(b))
    best = 0.0
    for v in a + b:
        fa = sum(x <= v for x in a) / len(a)
        fb = sum(x <= v for x in b) / len(b)
        best = max(best, abs(fa - fb))
    return best


def test_ks_distance_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = np.round(rng.normal(size=rng.integers(1, 30)), 1)
        b = np.round(rng.normal(0.3, 1, size=rng.integers(1, 30)), 1)
        assert ks_distance(a, b) == pytest.approx(ks_oracle(a, b), abs=1e-12)
    assert ks_distance([1, 2, 3], [1, 2, 3]) == 0
    assert ks_distance([0, 0], [1, 1]) == 1
    with pytest.raises(ValueError):
        ks_distance([], [1])


def test_binned_ks_bounds_and_resolution():
    a = histogram(np.full(100, -1.0))
    b = histogram(np.full(100, -0.999))
    assert binned_ks(a, b) == 0.0
    assert binned_ks(histogram(np.full(10, -0.9)), histogram(np.full(10, 0.9))) == 1.0
    rng = np.random.default_rng(1)
    x, y = rng.uniform(-1, 1, 500), rng.uniform(-0.5, 1, 700)
    assert 0 <= binned_ks(histogram(x), histogram(y)) <= ks_distance(x, y) + 1e-12


def test_histogram_bins():
    assert len(BIN_EDGES) == 65 and BIN_EDGES[0] == -1 and BIN_EDGES[-1] == 1
    h = histogram(np.array([-5.0, -1.0, 0.0, 1.0, 7.0]))
    assert h.sum() == 5 and h[0] == 2 and h[-1] == 2


def test_tercile_regions_partition():
    img = np.random.default_rng(0).normal(size=(12, 12))
    r = tercile_regions(img)
    assert r.shape == (3, 12, 12)
    assert np.array_equal(r.sum(axis=0), np.ones((12, 12)))
    assert img[r[0]].max() <= img[r[1]].min() and img[r[1]].max() <= img[r[2]].min()


def _cohort(tmp_path, name, effect, n=50, seed=0):
    cfg = CohortConfig([SiteSpec(name, n, effect)], AnatomyConfig(size=32, depth=6), seed=seed)
    return generate_cohort(cfg, tmp_path / name)


@pytest.fixture(scope="module")
def cohorts(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("diag")
    return {"ref": _cohort(tmp, "ref", SiteEffect(), seed=0),
            "same": _cohort(tmp, "same", SiteEffect(), seed=1),
            "gain": _cohort(tmp, "gain", SiteEffect(gain=1.5, gamma=0.7), seed=1)}


def test_identical_distribution_small_ks(cohorts):
    rep = hist_report(cohorts["same"], cohorts["ref"], n_slices=4)
    assert np.all(rep.ks_before < 0.02) and rep.pooled_ks_before < 0.02
    assert rep.ks_after is None


def test_shifted_copy_has_larger_ks(cohorts):
    same = hist_report(cohorts["same"], cohorts["ref"], n_slices=4)
    shifted = hist_report(cohorts["gain"], cohorts["ref"], n_slices=4)
    assert shifted.pooled_ks_before > same.pooled_ks_before
    assert np.all((shifted.ks_before >= 0) & (shifted.ks_before <= 1))


def test_counts_sum_to_region_pixels(cohorts):
    rep = hist_report(cohorts["gain"], cohorts["ref"], cohorts["same"], n_slices=4)
    for g in ("source_before", "source_after", "reference"):
        assert np.array_equal(rep.histograms[g].sum(axis=1), rep.region_pixels[g])
        assert rep.region_pixels[g].sum() == 50 * 4 * 32 * 32
    assert set(rep.maps) == {"source_before", "source_after", "reference"}


def test_report_needs_data():
    with pytest.raises(ValueError):
        hist_report_from_slices(np.zeros((0, 4, 4)), np.zeros((2, 4, 4)))


def _normalized_manifest(tmp_path, arrays):
    recs = []
    for i, a in enumerate(arrays):
        save_volume(Volume(a, f"s{i}", normalized=True), tmp_path / f"s{i}")
        recs.append(ManifestRecord(f"s{i}", f"s{i}.json", "x", 30.0, 0, "test"))
    return Manifest(recs, root=tmp_path)


def test_std_map_two_point(tmp_path):
    base = np.random.default_rng(0).uniform(-0.5, 0.3, size=(5, 8, 8)).astype(np.float32)
    c = np.float32(0.4)
    m = _normalized_manifest(tmp_path, [base, base + c])
    mean, std = mean_std_maps(m, n_slices=3)
    np.testing.assert_allclose(std, c / 2, atol=1e-6)
    np.testing.assert_allclose(mean, base[2] + c / 2, atol=1e-6)
    assert np.all(np.abs(mean) <= 1)


def test_std_map_identical_and_too_few(tmp_path):
    base = np.random.default_rng(0).uniform(-1, 1, size=(3, 8, 8)).astype(np.float32)
    _, std = mean_std_maps(_normalized_manifest(tmp_path / "a", [base, base, base]), 3)
    assert np.all(std == 0)
    with pytest.raises(ValueError):
        mean_std_maps(_normalized_manifest(tmp_path / "b", [base]), 3)


def test_pgm_roundtrip(tmp_path):
    img = np.linspace(-1, 1, 6 * 10).reshape(6, 10)
    write_pgm(tmp_path / "x.pgm", img, -1, 1)
    back = read_pgm(tmp_path / "x.pgm")
    assert back.shape == (6, 10) and back[0, 0] == 0 and back[-1, -1] == 255
    np.testing.assert_allclose(back / 255.0 * 2 - 1, img, atol=1 / 255)
    with pytest.raises(ValueError):
        (tmp_path / "bad.pgm").write_bytes(b"P2\n1 1\n255\n0")
        read_pgm(tmp_path / "bad.pgm")


def test_write_report_files(tmp_path, cohorts):
    rep = hist_report(cohorts["gain"], cohorts["ref"], cohorts["same"], n_slices=2)
    write_report(rep, tmp_path)
    ks = (tmp_path / "reports" / "ks.csv").read_text().splitlines()
    assert ks[0] == "region,ks_before,ks_after" and [l.split(",")[0] for l in ks[1:]] == ["low", "mid", "high",
                                                                                         "pooled"]
    rows = (tmp_path / "reports" / "histograms.csv").read_text().splitlines()
    assert len(rows) == 1 + 3 * 3 * 64
    for g in ("source_before", "source_after", "reference"):
        assert read_pgm(tmp_path / "maps" / f"{g}_mean.pgm").shape == (32, 32)
        assert np.loadtxt(tmp_path / "maps" / f"{g}_std.csv", delimiter=",").shape == (32, 32)
