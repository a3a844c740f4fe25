"""Synthetic multi-site phantom cohorts.

A subject is a cartoon brain: an ellipsoid of "white matter" wrapped in a
"cortical" band that thins with age, with a central "ventricle" that grows with
age. Diseased subjects (label 1) carry a few hypointense blobs. Sites differ
only through a :class:`SiteEffect` applied on top of the anatomy.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .voldata import Manifest, ManifestRecord, Volume, save_volume, write_manifest

logger = logging.getLogger(__name__)

# tissue intensities on the [0, 1] anatomy scale
WM, GM, CSF = 0.9, 0.55, 0.2


@dataclass
class SiteEffect:
    gain: float = 1.0
    gamma: float = 1.0
    bias_amplitude: float = 0.0
    # bias blob centre / width as fractions of the (x, y, z) extent
    bias_center: tuple[float, float, float] = (0.3, 0.3, 0.5)
    bias_width: float = 0.35
    noise_sigma: float = 0.0
    blur_sigma: float = 0.0

    def validate(self):
        if not self.gain > 0 or not self.gamma > 0:
            raise ValueError(f"gain and gamma must be > 0 (got {self.gain}, {self.gamma})")
        if self.bias_amplitude < 0 or self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ValueError("bias amplitude, noise sigma and blur sigma must be >= 0")
        if not self.bias_width > 0:
            raise ValueError("bias width must be > 0")

    @property
    def is_identity(self) -> bool:
        return (self.gain == 1 and self.gamma == 1 and self.bias_amplitude == 0
                and self.noise_sigma == 0 and self.blur_sigma == 0)


@dataclass
class AnatomyConfig:
    size: int = 64
    depth: int = 16
    age_range: tuple[float, float] = (20.0, 90.0)
    # cortical band thickness / ventricle radius in voxels at the youngest and oldest age
    band_young: float = 6.0
    band_old: float = 2.5
    ventricle_young: float = 3.0
    ventricle_old: float = 9.0
    shape_jitter: float = 0.05
    # in-plane head offset range in voxels; with a fixed bias field this decides which anatomy it lands on
    position_jitter: float = 1.0
    intensity_jitter: float = 0.02
    lesion_factor: float = 0.35
    # label-1 subjects: cortical-band intensity scaled by this (1.0 = no diffuse change)
    diffuse_factor: float = 1.0
    lesion_radius: tuple[float, float] = (2.5, 4.0)

    def check_age(self, age: float):
        lo, hi = self.age_range
        if not lo <= age <= hi:
            raise ValueError(f"age {age} outside configured range {self.age_range}")

    def age_fraction(self, age: float) -> float:
        lo, hi = self.age_range
        return (age - lo) / (hi - lo)

    def band_thickness(self, age: float) -> float:
        return self.band_young + (self.band_old - self.band_young) * self.age_fraction(age)

    def ventricle_radius(self, age: float) -> float:
        return self.ventricle_young + (self.ventricle_old - self.ventricle_young) * self.age_fraction(age)


@dataclass
class SiteSpec:
    name: str
    n_subjects: int
    effect: SiteEffect = field(default_factory=SiteEffect)


@dataclass
class CohortConfig:
    sites: list[SiteSpec]
    anatomy: AnatomyConfig = field(default_factory=AnatomyConfig)
    prevalence: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.sites:
            raise ValueError("cohort needs at least one site")
        names = [s.name for s in self.sites]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate site names: {names}")
        for s in self.sites:
            if s.n_subjects < 1:
                raise ValueError(f"site {s.name!r}: n_subjects must be >= 1")
            s.effect.validate()
        lo, hi = self.anatomy.age_range
        if not hi > lo:
            raise ValueError(f"empty age range {self.anatomy.age_range}")
        if not 0 <= self.prevalence <= 1:
            raise ValueError("prevalence must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "CohortConfig":
        anat = dict(d.get("anatomy", {}))
        for key in ("size", "depth", "age_range"):
            if key in d:
                anat[key] = d[key]
        for key in ("age_range", "lesion_radius"):
            if key in anat:
                anat[key] = tuple(anat[key])
        sites = []
        for s in d["sites"]:
            eff = dict(s.get("effect", {}))
            if "bias_center" in eff:
                eff["bias_center"] = tuple(eff["bias_center"])
            sites.append(SiteSpec(s["name"], int(s["n_subjects"]), SiteEffect(**eff)))
        return cls(sites, AnatomyConfig(**anat), float(d.get("prevalence", 0.5)), int(d.get("seed", 0)))

    @classmethod
    def from_json(cls, path) -> "CohortConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- anatomy

def _grid(anat: AnatomyConfig):
    D, S = anat.depth, anat.size
    z, y, x = np.meshgrid(np.arange(D, dtype=np.float64) - (D - 1) / 2,
                          np.arange(S, dtype=np.float64) - (S - 1) / 2,
                          np.arange(S, dtype=np.float64) - (S - 1) / 2, indexing="ij")
    return x, y, z


def _smooth_step(d, width=0.6):
    # soft tissue boundaries, 1 inside (d < 0), 0 outside
    return 1.0 / (1.0 + np.exp(np.clip(d / width, -60, 60)))


def brain_geometry(subject_seed: int, anat: AnatomyConfig):
    """Per-subject shape parameters; independent of age and label."""
    rng = np.random.default_rng(np.random.SeedSequence([subject_seed, 0]))
    j = anat.shape_jitter
    S, D = anat.size, anat.depth
    return dict(
        a=0.40 * S * (1 + j * rng.uniform(-1, 1)),
        b=0.34 * S * (1 + j * rng.uniform(-1, 1)),
        c=0.75 * D * (1 + j * rng.uniform(-1, 1)),
        dx=anat.position_jitter * rng.uniform(-1.0, 1.0), dy=anat.position_jitter * rng.uniform(-1.0, 1.0),
        wm=WM * (1 + anat.intensity_jitter * rng.uniform(-1, 1)),
        gm=GM * (1 + anat.intensity_jitter * rng.uniform(-1, 1)),
    )


def lesion_mask(subject_seed: int, age: float, anat: AnatomyConfig) -> np.ndarray:
    """Union of 1-3 blobs centred in the cortical band (independent of label)."""
    rng = np.random.default_rng(np.random.SeedSequence([subject_seed, 1]))
    g = brain_geometry(subject_seed, anat)
    x, y, z = _grid(anat)
    t = anat.band_thickness(age)
    mask = np.zeros(x.shape, dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        theta = rng.uniform(0, 2 * np.pi)
        r = rng.uniform(*anat.lesion_radius)
        # centre on the mid-line of the band
        scale = 1 - 0.5 * t / min(g["a"], g["b"])
        cx = g["dx"] + g["a"] * scale * np.cos(theta)
        cy = g["dy"] + g["b"] * scale * np.sin(theta)
        cz = rng.uniform(-0.15, 0.15) * anat.depth
        rz = 0.45 * anat.depth
        mask |= ((x - cx) ** 2 + (y - cy) ** 2) / r ** 2 + (z - cz) ** 2 / rz ** 2 <= 1.0
    return mask


def generate_anatomy(subject_seed: int, age: float, label: int,
                     anat: AnatomyConfig | None = None) -> Volume:
    """Noise-free phantom with intensities in [0, 1]; deterministic in its arguments."""
    anat = anat or AnatomyConfig()
    anat.check_age(age)
    g = brain_geometry(subject_seed, anat)
    x, y, z = _grid(anat)
    xs, ys = x - g["dx"], y - g["dy"]
    rho = np.sqrt((xs / g["a"]) ** 2 + (ys / g["b"]) ** 2 + (z / g["c"]) ** 2)
    r_mean = 0.5 * (g["a"] + g["b"])
    # signed distances in (approximate) voxels; negative inside
    d_brain = (rho - 1.0) * r_mean
    t = anat.band_thickness(age)
    d_wm = d_brain + t
    v = anat.ventricle_radius(age)
    d_vent = np.sqrt(xs ** 2 + (ys / 0.8) ** 2 + (z * 2.0) ** 2) - v

    brain = _smooth_step(d_brain)
    wm = _smooth_step(d_wm)
    vent = _smooth_step(d_vent)
    gm = g["gm"] * (anat.diffuse_factor if label else 1.0)
    img = brain * (gm + (g["wm"] - gm) * wm)
    img = img * (1 - vent) + CSF * vent * brain
    if label:
        m = lesion_mask(subject_seed, age, anat)
        img = np.where(m, img * anat.lesion_factor, img)
    return Volume(np.clip(img, 0.0, 1.0).astype(np.float32), spacing=(1.0, 1.0, 1.0))


def midline_band_width(vol: Volume, threshold: float = 0.5 * (GM + WM)) -> float:
    """Cortical band width measured along the central row of the central plane.

    Counts voxels between the outer brain edge and the first white-matter voxel
    on both sides, averaged. Used as a direct geometric read-out of age.
    """
    row = vol.voxels[vol.depth // 2, vol.height // 2].astype(np.float64)
    inside = np.nonzero(row > 0.5 * GM)[0]
    white = np.nonzero(row > threshold)[0]
    if inside.size == 0 or white.size == 0:
        return 0.0
    left = white[0] - inside[0]
    right = inside[-1] - white[-1]
    return 0.5 * float(left + right)


# ---------------------------------------------------------------- site effects

def bias_field(shape: tuple[int, int, int], effect: SiteEffect) -> np.ndarray:
    D, H, W = shape
    z, y, x = np.meshgrid((np.arange(D) + 0.5) / D, (np.arange(H) + 0.5) / H,
                          (np.arange(W) + 0.5) / W, indexing="ij")
    cx, cy, cz = effect.bias_center
    r2 = (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2
    return 1.0 + effect.bias_amplitude * np.exp(-r2 / (2 * effect.bias_width ** 2))


def apply_site_effect(vol: Volume, effect: SiteEffect, rng: np.random.Generator | None = None) -> Volume:
    """gain * bias * vol**gamma, clamped at 0, then blur, then additive noise."""
    effect.validate()
    src = vol.voxels.astype(np.float64)
    if src.min() < 0 or src.max() > 1:
        raise ValueError("site effects expect anatomy intensities in [0, 1]")
    out = effect.gain * bias_field(src.shape, effect) * np.power(src, effect.gamma)
    out = np.maximum(out, 0.0)
    if effect.blur_sigma > 0:
        out = ndimage.gaussian_filter(out, effect.blur_sigma, mode="nearest")
    if effect.noise_sigma > 0:
        if rng is None:
            raise ValueError("noise requires an rng")
        out = out + rng.normal(0.0, effect.noise_sigma, size=out.shape)
    return Volume(out.astype(np.float32), vol.subject_id, vol.site, vol.spacing)


def invert_site_effect(vol: Volume, effect: SiteEffect) -> Volume:
    """Undo gain, bias and gamma (exact only when noise and blur are zero)."""
    x = vol.voxels.astype(np.float64) / (effect.gain * bias_field(vol.voxels.shape, effect))
    x = np.power(np.maximum(x, 0.0), 1.0 / effect.gamma)
    return Volume(x.astype(np.float32), vol.subject_id, vol.site, vol.spacing)


# ---------------------------------------------------------------- cohorts

def stratified_split_sizes(n: int) -> tuple[int, int, int]:
    n_train = int(round(0.7 * n))
    n_val = int(round(0.1 * n))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def generate_cohort(config: CohortConfig, out_dir) -> Manifest:
    """Write every subject volume plus ``manifest.csv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    anat = config.anatomy
    site_names = sorted(s.name for s in config.sites)
    records = []
    idx = 0
    for site_no, site in enumerate(config.sites):
        split_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1_000_003, site_no]))
        n_tr, n_va, n_te = stratified_split_sizes(site.n_subjects)
        splits = np.array(["train"] * n_tr + ["val"] * n_va + ["test"] * n_te)[
            split_rng.permutation(site.n_subjects)]
        for j in range(site.n_subjects):
            # one independent stream per subject: (master seed, subject index)
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, idx]))
            age = float(rng.uniform(*anat.age_range))
            label = int(rng.random() < config.prevalence)
            subject_seed = int(rng.integers(0, 2 ** 31 - 1))
            sid = f"{site.name}-{j:04d}"
            vol = generate_anatomy(subject_seed, age, label, anat)
            vol = apply_site_effect(vol, site.effect, rng)
            rel = Path("volumes") / sid
            save_volume(vol, out_dir / rel)
            records.append(ManifestRecord(sid, rel.with_suffix(".json").as_posix(), site.name,
                                          age, label, str(splits[j])))
            idx += 1
    manifest = Manifest(records, root=out_dir, site_names=site_names)
    write_manifest(manifest, out_dir / "manifest.csv")
    logger.info("wrote %d subjects over %d sites to %s", len(records), len(config.sites), out_dir)
    return manifest
