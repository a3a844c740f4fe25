"""Volumes, manifests, slice extraction and intensity normalization.

On-disk volume format is a JSON header next to a raw payload::

    scan.json  {"width": W, "height": H, "depth": D, "dtype": "f32le", "spacing": [sx, sy, sz]}
    scan.raw   W*H*D little-endian float32, x fastest, then y, then z

Voxels are held in memory as a ``(D, H, W)`` C-ordered array so that
``voxels[z, y, x]`` matches the payload order and axial planes are contiguous.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("subject_id", "volume_path", "site", "age", "label", "split")
SPLITS = ("train", "val", "test")
P_LOW, P_HIGH = 1.0, 99.0


class VolumeFormatError(ValueError):
    pass


@dataclass
class Volume:
    voxels: np.ndarray
    subject_id: str = ""
    site: int = 0
    spacing: tuple[float, float, float] | None = None
    # already in [-1, 1] model space (written by the harmonizer); skips percentile mapping
    normalized: bool = False

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise VolumeFormatError(
                f"volume {self.subject_id!r}: expected a non-empty 3D grid, got shape {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise VolumeFormatError(f"volume {self.subject_id!r}: contains non-finite intensities")

    @property
    def width(self) -> int:
        return self.voxels.shape[2]

    @property
    def height(self) -> int:
        return self.voxels.shape[1]

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]

    def voxel(self, x: int, y: int, z: int) -> float:
        return float(self.voxels[z, y, x])


@dataclass
class Slice:
    pixels: np.ndarray
    subject_id: str
    z: int


@dataclass(frozen=True)
class SiteCode:
    index: int
    count: int

    @property
    def vector(self) -> np.ndarray:
        v = np.zeros(self.count, dtype=np.float32)
        v[self.index] = 1.0
        return v


@dataclass(frozen=True)
class QCFlag:
    subject_id: str
    statistic: str
    z_score: float
    flagged: bool


def one_hot(k: int, K: int) -> SiteCode:
    if K < 1:
        raise ValueError(f"site count must be >= 1, got {K}")
    if not 0 <= k < K:
        raise ValueError(f"site index {k} out of range for {K} sites")
    return SiteCode(int(k), int(K))


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".json", ".raw") else p
    return stem.with_suffix(".json"), stem.with_suffix(".raw")


def save_volume(vol: Volume, path) -> None:
    """Write ``vol`` as ``<path>.json`` + ``<path>.raw``; overwrites existing files."""
    header_path, raw_path = _paths(path)
    header = {"width": vol.width, "height": vol.height, "depth": vol.depth, "dtype": "f32le"}
    if vol.spacing is not None:
        header["spacing"] = [float(s) for s in vol.spacing]
    if vol.normalized:
        header["normalized"] = True
    header_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_bytes(np.ascontiguousarray(vol.voxels, dtype="<f4").tobytes())
    header_path.write_text(json.dumps(header))


def load_volume(path, subject_id: str = "", site: int = 0) -> Volume:
    """Read a volume; identity metadata comes from the caller (manifest row)."""
    header_path, raw_path = _paths(path)
    label = subject_id or str(path)
    for p in (header_path, raw_path):
        if not p.exists():
            raise FileNotFoundError(f"volume {label!r}: missing file {p}")
    header = json.loads(header_path.read_text())
    if header.get("dtype", "f32le") != "f32le":
        raise VolumeFormatError(f"volume {label!r}: unsupported dtype {header['dtype']!r}")
    W, H, D = int(header["width"]), int(header["height"]), int(header["depth"])
    payload = raw_path.read_bytes()
    expected = W * H * D * 4
    if len(payload) != expected:
        raise VolumeFormatError(
            f"volume {label!r}: size mismatch, header declares {expected} bytes, payload has {len(payload)}")
    voxels = np.frombuffer(payload, dtype="<f4").reshape(D, H, W).astype(np.float32)
    if not np.all(np.isfinite(voxels)):
        raise VolumeFormatError(f"volume {label!r}: contains non-finite intensities")
    spacing = header.get("spacing")
    return Volume(voxels, subject_id=subject_id, site=site,
                  spacing=tuple(spacing) if spacing else None,
                  normalized=bool(header.get("normalized", False)))


# ---------------------------------------------------------------- normalization

def volume_percentiles(voxels: np.ndarray, subject_id: str = "") -> tuple[float, float]:
    lo, hi = np.percentile(np.asarray(voxels, dtype=np.float64), [P_LOW, P_HIGH])
    if not hi > lo:
        raise ValueError(f"volume {subject_id!r}: zero dynamic range (p1 == p99 == {lo:g})")
    return float(lo), float(hi)


def _resize(img: np.ndarray, size: int | None) -> np.ndarray:
    if size is None or img.shape == (size, size):
        return img
    zoom = (size / img.shape[0], size / img.shape[1])
    out = ndimage.zoom(img, zoom, order=1, mode="nearest", grid_mode=True)
    return np.clip(out, -1.0, 1.0)


def normalize_slice(raw: np.ndarray, p_low: float, p_high: float, size: int | None = None) -> np.ndarray:
    """Map the volume's [p1, p99] onto [-1, 1], clamp, then bilinear-resize to ``size``."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValueError("slice contains non-finite values")
    if not p_high > p_low:
        raise ValueError("zero dynamic range")
    out = 2.0 * (raw - p_low) / (p_high - p_low) - 1.0
    out = np.clip(out, -1.0, 1.0)
    return _resize(out, size).astype(np.float32)


def slice_window(depth: int, n: int) -> range:
    if n < 1:
        raise ValueError(f"number of slices must be >= 1, got {n}")
    if depth < n:
        return range(depth)
    start = (depth - n) // 2
    return range(start, start + n)


def normalize_volume(vol: Volume, size: int | None = None) -> np.ndarray:
    """Every axial plane of ``vol`` in model space, shape (D, size, size)."""
    if vol.normalized:
        return np.stack([_resize(np.clip(p, -1.0, 1.0), size).astype(np.float32) for p in vol.voxels])
    lo, hi = volume_percentiles(vol.voxels, vol.subject_id)
    return np.stack([normalize_slice(p, lo, hi, size) for p in vol.voxels])


def extract_middle_slices(vol: Volume, n: int, size: int | None = None) -> list[Slice]:
    window = slice_window(vol.depth, n)
    if vol.depth < n:
        warnings.warn(f"volume {vol.subject_id!r} has depth {vol.depth} < {n}; using all slices",
                      stacklevel=2)
    if vol.normalized:
        return [Slice(_resize(np.clip(vol.voxels[z], -1.0, 1.0), size).astype(np.float32), vol.subject_id, z)
                for z in window]
    lo, hi = volume_percentiles(vol.voxels, vol.subject_id)
    return [Slice(normalize_slice(vol.voxels[z], lo, hi, size), vol.subject_id, z) for z in window]


def stack_slices(slices: Sequence[Slice]) -> np.ndarray:
    return np.stack([s.pixels for s in slices]).astype(np.float32)


# ---------------------------------------------------------------- manifests

def _opt_float(s: str) -> float | None:
    s = s.strip()
    return float(s) if s else None


def _opt_int(s: str) -> int | None:
    s = s.strip()
    return int(float(s)) if s else None


@dataclass
class ManifestRecord:
    subject_id: str
    volume_path: str
    site: str
    age: float | None = None
    label: int | None = None
    split: str = "train"


@dataclass
class Manifest:
    records: list[ManifestRecord]
    root: Path = field(default_factory=Path)
    site_names: list[str] | None = None

    def __post_init__(self):
        ids = [r.subject_id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate subject ids in manifest: {dup[:5]}")
        for r in self.records:
            if r.split not in SPLITS:
                raise ValueError(f"subject {r.subject_id!r}: unknown split {r.split!r}")
            if r.label is not None and r.label not in (0, 1):
                raise ValueError(f"subject {r.subject_id!r}: label must be 0 or 1")
        if self.site_names is None:
            self.site_names = sorted({r.site for r in self.records})
        missing = {r.site for r in self.records} - set(self.site_names)
        if missing:
            raise ValueError(f"sites {sorted(missing)} not in site list")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def site_index(self, name: str) -> int:
        return self.site_names.index(name)

    def path_of(self, rec: ManifestRecord) -> Path:
        p = Path(rec.volume_path)
        return p if p.is_absolute() else self.root / p

    def load(self, rec: ManifestRecord) -> Volume:
        return load_volume(self.path_of(rec), subject_id=rec.subject_id, site=self.site_index(rec.site))

    def select(self, sites: Iterable[str] | str | None = None, split: str | None = None) -> "Manifest":
        if isinstance(sites, str):
            sites = [sites]
        keep = set(sites) if sites is not None else None
        recs = [r for r in self.records
                if (keep is None or r.site in keep) and (split is None or r.split == split)]
        return Manifest(recs, root=self.root, site_names=self.site_names)

    def check_files(self) -> None:
        for r in self.records:
            for p in _paths(self.path_of(r)):
                if not p.exists():
                    raise FileNotFoundError(f"subject {r.subject_id!r}: missing file {p}")


def read_manifest(path, check_files: bool = True) -> Manifest:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_COLUMNS)}")
        records = [ManifestRecord(row["subject_id"], row["volume_path"], row["site"],
                                  _opt_float(row["age"]), _opt_int(row["label"]), row["split"].strip())
                   for row in reader]
    m = Manifest(records, root=path.parent)
    if check_files:
        m.check_files()
    return m


def write_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in manifest.records:
            vp = manifest.path_of(r)
            try:
                vp = Path(os.path.relpath(vp, path.parent))
            except ValueError:
                pass
            w.writerow([r.subject_id, vp.as_posix(), r.site,
                        "" if r.age is None else repr(float(r.age)),
                        "" if r.label is None else int(r.label), r.split])


def load_slices(manifest: Manifest, n: int, size: int | None = None) -> tuple[np.ndarray, list[ManifestRecord]]:
    """Stacked middle slices of every volume plus the owning record of each slice."""
    arrays, owners = [], []
    for rec in manifest:
        sl = extract_middle_slices(manifest.load(rec), n, size)
        arrays.append(stack_slices(sl))
        owners.extend([rec] * len(sl))
    if not arrays:
        return np.zeros((0, size or 0, size or 0), dtype=np.float32), []
    return np.concatenate(arrays), owners


# ---------------------------------------------------------------- QC

def qc_flag_volumes(volumes: Sequence[Volume], threshold: float = 3.0) -> list[QCFlag]:
    by_site: dict[int, list[Volume]] = {}
    for v in volumes:
        by_site.setdefault(v.site, []).append(v)
    flags = []
    for site, vols in sorted(by_site.items()):
        if len(vols) < 3:
            warnings.warn(f"site {site}: only {len(vols)} volumes, QC skipped", stacklevel=2)
            continue
        stats = {"mean": np.array([v.voxels.mean(dtype=np.float64) for v in vols]),
                 "std": np.array([v.voxels.std(dtype=np.float64) for v in vols])}
        for name, values in stats.items():
            sd = values.std()
            z = np.zeros_like(values) if sd == 0 else (values - values.mean()) / sd
            flags.extend(QCFlag(v.subject_id, name, float(zi), bool(abs(zi) > threshold))
                         for v, zi in zip(vols, z))
    return flags


def qc_flag(manifest: Manifest, threshold: float = 3.0) -> list[QCFlag]:
    """Z-score each volume's mean/std intensity against its own site cohort."""
    return qc_flag_volumes([manifest.load(r) for r in manifest], threshold)
