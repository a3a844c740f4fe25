"""Training loop, inference helpers and dataset harmonization."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn

from .. import checkpoint as ckpt
from ..voldata import (Manifest, ManifestRecord, SiteCode, Volume, normalize_volume, one_hot,
                       save_volume, slice_window, write_manifest)
from .losses import cycle_loss, discriminator_loss, generator_adv_loss
from .networks import DiscriminatorSpec, GeneratorSpec, HarmonizerModel, init_weights

logger = logging.getLogger(__name__)

HISTORY_FIELDS = ("step", "site", "g_adv_ref", "g_adv_src", "cycle", "g_total", "d_ref", "d_src")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, what: str):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass
class HarmonizerTrainConfig:
    steps: int = 3000
    batch_size: int = 1
    lambda_cyc: float = 10.0
    lambda_identity: float = 0.0
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    pool_size: int = 50
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.lambda_cyc < 0 or self.lambda_identity < 0:
            raise ValueError("loss weights must be >= 0")
        if self.pool_size < 0:
            raise ValueError("pool size must be >= 0")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch size must be >= 1")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)


class ImagePool:
    """History buffer of generated images replayed to a discriminator."""

    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng
        self.images: list[torch.Tensor] = []

    def query(self, batch: torch.Tensor) -> torch.Tensor:
        if self.size == 0:
            return batch
        out = []
        for img in batch.detach():
            img = img.unsqueeze(0)
            if len(self.images) < self.size:
                self.images.append(img.clone())
                out.append(img)
            elif self.rng.random() < 0.5:
                j = int(self.rng.integers(self.size))
                out.append(self.images[j].clone())
                self.images[j] = img.clone()
            else:
                out.append(img)
        return torch.cat(out, 0)


class IdentityHarmonizer(nn.Module):
    """Pass-through stand-in for a trained model (null experiments)."""

    def __init__(self, site_names, reference_name="reference", image_size=64):
        super().__init__()
        self.site_names = list(site_names)
        self.reference_name = reference_name
        self.gen_spec = GeneratorSpec(image_size=image_size, n_down=0)
        self.G = nn.Identity()

    @property
    def K(self):
        return len(self.site_names)


def _as_batch(slices, spec: GeneratorSpec, dtype) -> tuple[torch.Tensor, tuple]:
    arr = torch.as_tensor(np.asarray(slices))
    shape = tuple(arr.shape)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[-2:] != (spec.image_size, spec.image_size) or arr.shape[1] != spec.in_channels:
        raise ValueError(f"expected slices of size {spec.image_size}x{spec.image_size}, got shape {shape}")
    return arr.to(dtype), shape


def _param_dtype(module: nn.Module):
    p = next(module.parameters(), None)
    return p.dtype if p is not None else torch.float32


def _site_tensor(model, code) -> torch.Tensor:
    if isinstance(code, SiteCode):
        if code.count != model.K:
            raise ValueError(f"site code for {code.count} sites, model has {model.K}")
        idx = code.index
    else:
        idx = int(code)
        if not 0 <= idx < model.K:
            raise ValueError(f"site index {idx} out of range for {model.K} sites")
    return torch.tensor([idx], dtype=torch.long)


def embed_site(model: HarmonizerModel, code) -> torch.Tensor:
    """The site channel appended to F's latent map, shape (1, h_lat, w_lat)."""
    return model.F.embedding(_site_tensor(model, code))[0]


@torch.no_grad()
def forward_harmonize(model, slices, chunk: int = 64) -> np.ndarray:
    """Map slices (H, W), (N, H, W) or (N, 1, H, W) to the reference domain with G."""
    x, shape = _as_batch(slices, model.gen_spec, _param_dtype(model.G))
    out = torch.cat([model.G(x[i:i + chunk]) for i in range(0, len(x), chunk)]) if len(x) else x
    return out.reshape(shape).numpy()


@torch.no_grad()
def reverse_map(model: HarmonizerModel, slices, code, chunk: int = 64) -> np.ndarray:
    x, shape = _as_batch(slices, model.gen_spec, _param_dtype(model.F))
    s = _site_tensor(model, code)
    out = torch.cat([model.F(x[i:i + chunk], s) for i in range(0, len(x), chunk)]) if len(x) else x
    return out.reshape(shape).numpy()


@torch.no_grad()
def cycle_reconstruction_error(model: HarmonizerModel, slices, code) -> float:
    """mean |F(G(x), code) - x| over the given source slices."""
    rec = reverse_map(model, forward_harmonize(model, slices), code)
    return float(np.mean(np.abs(rec.astype(np.float64) - np.asarray(slices, dtype=np.float64))))


def _to_tensor(arr) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(arr, dtype=np.float32))
    return t[:, None] if t.ndim == 3 else t


def train_harmonizer(sources: Mapping[str, np.ndarray], reference: np.ndarray,
                     config: HarmonizerTrainConfig | None = None,
                     gen_spec: GeneratorSpec | None = None, disc_spec: DiscriminatorSpec | None = None,
                     reference_name: str = "reference", out_dir=None,
                     model: HarmonizerModel | None = None):
    """Train G/F and the discriminators on unpaired slices.

    ``sources`` maps each source-site name to its (N, H, W) slice stack; the
    order of the mapping fixes the site codes. Returns ``(model, history)``.
    """
    config = config or HarmonizerTrainConfig()
    if not sources:
        raise ValueError("need at least one source site")
    names = list(sources)
    src = [_to_tensor(sources[n]) for n in names]
    ref = _to_tensor(reference)
    for n, t in zip(names, src):
        if len(t) == 0:
            raise ValueError(f"source site {n!r} has no slices")
    if len(ref) == 0:
        raise ValueError("reference set is empty")

    torch.manual_seed(config.seed)
    if model is None:
        gen_spec = gen_spec or GeneratorSpec(image_size=ref.shape[-1])
        model = HarmonizerModel(names, reference_name, gen_spec, disc_spec)
        init_weights(model)
    elif model.site_names != names:
        raise ValueError(f"model sites {model.site_names} differ from data sites {names}")
    rng = np.random.default_rng(config.seed)
    pool_ref = ImagePool(config.pool_size, np.random.default_rng([config.seed, 1]))
    pool_src = [ImagePool(config.pool_size, np.random.default_rng([config.seed, 2, i])) for i in range(len(names))]

    opt_g = torch.optim.Adam(model.generator_parameters(), lr=config.lr, betas=(config.beta1, config.beta2))
    opt_d = torch.optim.Adam(model.discriminator_parameters(), lr=config.lr, betas=(config.beta1, config.beta2))
    out_dir = Path(out_dir) if out_dir is not None else None
    history = []
    bs = config.batch_size
    model.train()
    for step in range(1, config.steps + 1):
        k = int(rng.integers(len(names)))
        x = src[k][rng.integers(len(src[k]), size=bs)]
        y = ref[rng.integers(len(ref), size=bs)]
        s = torch.tensor([k], dtype=torch.long)
        D_src = model.D_src[k]

        fake_y = model.G(x)
        rec_x = model.F(fake_y, s)
        fake_x = model.F(y, s)
        rec_y = model.G(fake_x)
        for p in model.discriminator_parameters():
            p.requires_grad_(False)
        g_ref = generator_adv_loss(model.D_ref, fake_y)
        g_src = generator_adv_loss(D_src, fake_x)
        cyc = cycle_loss(x, rec_x, y, rec_y)
        g_total = g_ref + g_src + config.lambda_cyc * cyc
        if config.lambda_identity > 0:
            g_total = g_total + config.lambda_identity * (
                (model.G(y) - y).abs().mean() + (model.F(x, s) - x).abs().mean())
        if not torch.isfinite(g_total):
            raise DivergenceError(step, "generator loss")
        opt_g.zero_grad(set_to_none=True)
        g_total.backward()
        opt_g.step()
        for p in model.discriminator_parameters():
            p.requires_grad_(True)

        d_ref = discriminator_loss(model.D_ref, y, pool_ref.query(fake_y))
        d_src = discriminator_loss(D_src, x, pool_src[k].query(fake_x))
        if not (torch.isfinite(d_ref) and torch.isfinite(d_src)):
            raise DivergenceError(step, "discriminator loss")
        opt_d.zero_grad(set_to_none=True)
        (d_ref + d_src).backward()
        opt_d.step()

        history.append({"step": step, "site": names[k], "g_adv_ref": g_ref.item(), "g_adv_src": g_src.item(),
                        "cycle": cyc.item(), "g_total": g_total.item(), "d_ref": d_ref.item(),
                        "d_src": d_src.item()})
        if config.log_every and step % config.log_every == 0:
            recent = history[-config.log_every:]
            logger.info("step %d  cycle %.4f  g %.4f  d_ref %.4f", step,
                        np.mean([h["cycle"] for h in recent]), np.mean([h["g_total"] for h in recent]),
                        np.mean([h["d_ref"] for h in recent]))
        if out_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
            save_checkpoint(model, out_dir / "harmonizer.ckpt")
    if out_dir is not None:
        save_checkpoint(model, out_dir / "harmonizer.ckpt")
        write_history(history, out_dir / "history.csv")
    model.eval()
    return model, history


def write_history(history, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(history[0]) if history else list(HISTORY_FIELDS)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: HarmonizerModel, path) -> None:
    meta = {"site_names": model.site_names, "reference_name": model.reference_name, "K": model.K,
            "generator": model.gen_spec.to_dict(), "discriminator": model.disc_spec.to_dict()}
    ckpt.write_container(path, "harmonizer", model.state_dict(), meta)


def load_checkpoint(path) -> HarmonizerModel:
    header, state = ckpt.read_container(path, kind="harmonizer")
    model = HarmonizerModel(header["site_names"], header["reference_name"],
                            GeneratorSpec(**header["generator"]), DiscriminatorSpec(**header["discriminator"]))
    if header["K"] != model.K:
        raise ckpt.CheckpointError(f"{path}: header K={header['K']} disagrees with site list")
    missing = set(model.state_dict()) ^ set(state)
    if missing:
        raise ckpt.CheckpointError(f"{path}: parameter set mismatch: {sorted(missing)[:5]}")
    model.load_state_dict(state)
    model.eval()
    return model


# ---------------------------------------------------------------- datasets

def harmonize_volume(model, vol: Volume, n_slices: int) -> Volume:
    planes = normalize_volume(vol, model.gen_spec.image_size)
    window = list(slice_window(vol.depth, n_slices))
    out = planes.copy()
    out[window] = forward_harmonize(model, planes[window]).astype(np.float32)
    return Volume(out, vol.subject_id, vol.site, vol.spacing, normalized=True)


def harmonize_dataset(model, manifest: Manifest, out_dir, n_slices: int = 80) -> Manifest:
    """Forward-map every volume's middle slices and write a harmonized copy of the manifest.

    Planes outside the slice window are copied through in normalized form so the
    output volume stays in one intensity space.
    """
    out_dir = Path(out_dir)
    known = set(model.site_names) | {model.reference_name}
    records = []
    for rec in manifest:
        if rec.site not in known:
            raise ValueError(f"subject {rec.subject_id!r}: site {rec.site!r} unknown to the harmonizer "
                             f"(sites {sorted(known)})")
        hv = harmonize_volume(model, manifest.load(rec), n_slices)
        rel = Path("volumes") / rec.subject_id
        save_volume(hv, out_dir / rel)
        records.append(ManifestRecord(rec.subject_id, rel.with_suffix(".json").as_posix(), rec.site,
                                      rec.age, rec.label, rec.split))
    out = Manifest(records, root=out_dir, site_names=manifest.site_names)
    write_manifest(out, out_dir / "manifest.csv")
    return out
