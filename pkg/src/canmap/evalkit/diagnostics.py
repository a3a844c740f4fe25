"""Regional histograms, KS distances and mean/std maps of slice intensities."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..voldata import Manifest, extract_middle_slices, load_slices, slice_window

N_BINS = 64
BIN_EDGES = np.linspace(-1.0, 1.0, N_BINS + 1)
REGIONS = ("low", "mid", "high")
GROUPS = ("source_before", "source_after", "reference")


def ks_distance(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic sup |F_a - F_b|."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("ks_distance: empty sample")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def tercile_regions(mean_image: np.ndarray) -> np.ndarray:
    """Boolean masks (3, H, W) splitting pixels by terciles of ``mean_image``."""
    q1, q2 = np.quantile(mean_image, [1 / 3, 2 / 3])
    low = mean_image <= q1
    high = mean_image > q2
    return np.stack([low, ~low & ~high, high])


def binned_ks(counts_a, counts_b) -> float:
    """KS distance between two histograms on the same bins (CDFs at bin edges).

    Resolution is one bin; a point mass at -1 and values a hair above it are not
    told apart, which the exact statistic does.
    """
    ca = np.asarray(counts_a, dtype=np.float64)
    cb = np.asarray(counts_b, dtype=np.float64)
    if ca.sum() == 0 or cb.sum() == 0:
        raise ValueError("binned_ks: empty histogram")
    return float(np.max(np.abs(np.cumsum(ca) / ca.sum() - np.cumsum(cb) / cb.sum())))


def histogram(values) -> np.ndarray:
    counts, _ = np.histogram(np.clip(values, -1.0, 1.0), bins=BIN_EDGES)
    return counts


def maps_from_slices(slices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(slices, dtype=np.float64)
    if len(s) < 2:
        raise ValueError("mean/std maps need at least 2 scans")
    return s.mean(axis=0), s.std(axis=0)


def mid_slices(manifest: Manifest, n_slices: int, size: int | None = None) -> np.ndarray:
    """The central slice of each scan's extraction window, one per scan."""
    out = []
    for rec in manifest:
        vol = manifest.load(rec)
        sl = extract_middle_slices(vol, n_slices, size)
        out.append(sl[len(sl) // 2].pixels)
    return np.stack(out) if out else np.zeros((0, 0, 0))


def mean_std_maps(manifest: Manifest, n_slices: int = 80, size: int | None = None):
    """Pixelwise mean and population std of the normalized mid slice across scans."""
    if len(manifest) < 2:
        raise ValueError("mean/std maps need at least 2 scans")
    return maps_from_slices(mid_slices(manifest, n_slices, size))


@dataclass
class HistReport:
    regions: np.ndarray
    histograms: dict[str, np.ndarray]
    region_pixels: dict[str, np.ndarray]
    ks_before: np.ndarray
    ks_after: np.ndarray | None
    pooled_ks_before: float
    pooled_ks_after: float | None
    maps: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def rows(self):
        """Flat rows for CSV: one per (group, region, bin)."""
        for g, h in self.histograms.items():
            for r, name in enumerate(REGIONS):
                for b in range(N_BINS):
                    yield {"group": g, "region": name, "bin_lo": BIN_EDGES[b], "bin_hi": BIN_EDGES[b + 1],
                           "count": int(h[r, b])}

    def ks_rows(self):
        for r, name in enumerate(list(REGIONS) + ["pooled"]):
            before = self.pooled_ks_before if name == "pooled" else self.ks_before[r]
            if self.ks_after is None:
                after = ""
            else:
                after = self.pooled_ks_after if name == "pooled" else self.ks_after[r]
            yield {"region": name, "ks_before": before, "ks_after": after}


def hist_report_from_slices(before: np.ndarray, reference: np.ndarray, after: np.ndarray | None = None,
                            before_mid=None, reference_mid=None, after_mid=None) -> HistReport:
    """Regions come from terciles of the reference mean image over all given slices."""
    if len(before) == 0 or len(reference) == 0 or (after is not None and len(after) == 0):
        raise ValueError("hist report needs non-empty slice sets")
    regions = tercile_regions(np.asarray(reference, dtype=np.float64).mean(axis=0))
    groups = {"source_before": before, "reference": reference}
    if after is not None:
        groups["source_after"] = after
    hists, pixels = {}, {}
    for g, s in groups.items():
        hists[g] = np.stack([histogram(s[:, m]) for m in regions])
        pixels[g] = np.array([s[:, m].size for m in regions])

    def ks(g):
        return np.array([binned_ks(hists[g][r], hists["reference"][r]) for r in range(len(regions))])

    def pooled(g):
        return binned_ks(hists[g].sum(axis=0), hists["reference"].sum(axis=0))

    report = HistReport(regions, hists, pixels, ks("source_before"), ks("source_after") if after is not None else None,
                        pooled("source_before"), pooled("source_after") if after is not None else None)
    for g, mid in (("source_before", before_mid), ("source_after", after_mid), ("reference", reference_mid)):
        if mid is not None and len(mid) >= 2:
            report.maps[g] = maps_from_slices(mid)
    return report


def hist_report(before: Manifest, reference: Manifest, after: Manifest | None = None,
                n_slices: int = 80, size: int | None = None) -> HistReport:
    if len(before) == 0 or len(reference) == 0 or (after is not None and len(after) == 0):
        raise ValueError("hist report needs non-empty manifests")
    b, _ = load_slices(before, n_slices, size)
    r, _ = load_slices(reference, n_slices, size)
    a = load_slices(after, n_slices, size)[0] if after is not None else None
    return hist_report_from_slices(
        b, r, a,
        before_mid=mid_slices(before, n_slices, size), reference_mid=mid_slices(reference, n_slices, size),
        after_mid=mid_slices(after, n_slices, size) if after is not None else None)


def write_pgm(path, image: np.ndarray, lo: float | None = None, hi: float | None = None) -> None:
    """8-bit binary PGM, linearly scaled from [lo, hi] (default: image range)."""
    img = np.asarray(image, dtype=np.float64)
    lo = img.min() if lo is None else lo
    hi = img.max() if hi is None else hi
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    data = np.clip(np.round((img - lo) * scale), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)


def write_report(report: HistReport, out_dir) -> None:
    out_dir = Path(out_dir)
    (out_dir / "reports").mkdir(parents=True, exist_ok=True)
    with open(out_dir / "reports" / "histograms.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["group", "region", "bin_lo", "bin_hi", "count"], lineterminator="\n")
        w.writeheader()
        w.writerows(report.rows())
    with open(out_dir / "reports" / "ks.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["region", "ks_before", "ks_after"], lineterminator="\n")
        w.writeheader()
        w.writerows(report.ks_rows())
    for g, (mean, std) in report.maps.items():
        write_pgm(out_dir / "maps" / f"{g}_mean.pgm", mean, -1.0, 1.0)
        write_pgm(out_dir / "maps" / f"{g}_std.pgm", std, 0.0, max(float(std.max()), 1e-12))
        np.savetxt(out_dir / "maps" / f"{g}_mean.csv", mean, delimiter=",", fmt="%.8g")
        np.savetxt(out_dir / "maps" / f"{g}_std.csv", std, delimiter=",", fmt="%.8g")
