"""Slice-level residual predictor for age regression and binary classification.

Every extracted slice is an independent training sample; a scan's prediction
is the median over its slices.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as Fn

from . import checkpoint as ckpt
from .voldata import Volume, extract_middle_slices, stack_slices

logger = logging.getLogger(__name__)

TASKS = ("regression", "classification")


@dataclass
class PredictorSpec:
    image_size: int = 64
    base_channels: int = 32
    fc_width: int = 512
    dropout: float = 0.5
    task: str = "regression"
    in_channels: int = 1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.image_size < 8 or self.image_size % 8:
            raise ValueError(f"image size {self.image_size} too small or not divisible for 3 poolings")

    def to_dict(self):
        return asdict(self)


@dataclass
class PredictorTrainConfig:
    lr: float = 3e-4
    batch_size: int = 32
    max_epochs: int = 200
    tolerance: float = 1e-3
    plateau_epochs: int = 5
    stop_constant_epochs: int = 10
    stop_rising_epochs: int = 5
    lr_factor: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0 or not self.tolerance > 0:
            raise ValueError("lr and tolerance must be > 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class ScanPrediction:
    subject_id: str
    slice_predictions: np.ndarray
    aggregate: float = field(init=False)

    def __post_init__(self):
        self.slice_predictions = np.asarray(self.slice_predictions, dtype=np.float64)
        if self.slice_predictions.size == 0:
            raise ValueError(f"scan {self.subject_id!r}: no slice predictions")
        self.aggregate = median(self.slice_predictions)


def median(values) -> float:
    """Median; for an even count the mean of the two middle values."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = v.size
    if n == 0:
        raise ValueError("median of empty sequence")
    return float(v[n // 2]) if n % 2 else float(0.5 * (v[n // 2 - 1] + v[n // 2]))


# ---------------------------------------------------------------- network

class BasicBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        # shortcut projection is not counted as a weighted layer
        self.proj = nn.Conv2d(cin, cout, 1) if cin != cout else None

    def forward(self, x):
        h = self.conv2(Fn.relu(self.conv1(x)))
        skip = x if self.proj is None else self.proj(x)
        return Fn.relu(h + skip)


class SliceResNet(nn.Module):
    """stem conv, pool, 2 blocks, pool, 2 blocks (channels x2), pool, FC -> dropout -> scalar."""

    def __init__(self, spec: PredictorSpec):
        super().__init__()
        self.spec = spec
        c = spec.base_channels
        self.stem = nn.Conv2d(spec.in_channels, c, 3, padding=1)
        self.block1 = BasicBlock(c, c)
        self.block2 = BasicBlock(c, c)
        self.block3 = BasicBlock(c, 2 * c)
        self.block4 = BasicBlock(2 * c, 2 * c)
        side = spec.image_size // 8
        self.fc = nn.Linear(2 * c * side * side, spec.fc_width)
        self.dropout = nn.Dropout(spec.dropout)
        self.out = nn.Linear(spec.fc_width, 1)
        self.register_buffer("target_mean", torch.zeros(()))
        self.register_buffer("target_std", torch.ones(()))

    def weighted_layers(self) -> list[str]:
        names = ["stem"]
        for b in ("block1", "block2", "block3", "block4"):
            names += [f"{b}.conv1", f"{b}.conv2"]
        return names + ["fc"]

    def logits(self, x):
        h = Fn.max_pool2d(Fn.relu(self.stem(x)), 2)
        h = Fn.max_pool2d(self.block2(self.block1(h)), 2)
        h = Fn.max_pool2d(self.block4(self.block3(h)), 2)
        h = self.dropout(Fn.relu(self.fc(h.flatten(1))))
        return self.out(h).squeeze(1)

    def forward(self, x):
        z = self.logits(x)
        if self.spec.task == "classification":
            return torch.sigmoid(z)
        return z * self.target_std + self.target_mean


def build_predictor(spec: PredictorSpec | None = None, seed: int | None = None) -> SliceResNet:
    if seed is not None:
        torch.manual_seed(seed)
    return SliceResNet(spec or PredictorSpec())


def count_parameters(model: nn.Module, prefix: str = "") -> int:
    return sum(p.numel() for n, p in model.named_parameters() if n.startswith(prefix))


def task_loss(model: SliceResNet, x, targets) -> torch.Tensor:
    """MSE on standardized targets (regression) or binary cross-entropy (classification)."""
    z = model.logits(x)
    t = targets.to(z.dtype)
    if model.spec.task == "classification":
        return Fn.binary_cross_entropy_with_logits(z, t)
    return Fn.mse_loss(z, (t - model.target_mean) / model.target_std)


# ---------------------------------------------------------------- schedule

class ConvergenceSchedule:
    """Plateau learning-rate drop and stopping rules driven only by the loss history.

    A training loss is "constant" when its relative change from the previous
    epoch is below ``tolerance``. A run of ``plateau_epochs`` constant epochs
    divides the lr by 10; a run of ``stop_constant_epochs`` or
    ``stop_rising_epochs`` consecutive validation increases stops training.
    """

    def __init__(self, lr: float, tolerance: float = 1e-3, plateau_epochs: int = 5,
                 stop_constant_epochs: int = 10, stop_rising_epochs: int = 5, lr_factor: float = 0.1):
        self.lr = lr
        self.tolerance = tolerance
        self.plateau_epochs = plateau_epochs
        self.stop_constant_epochs = stop_constant_epochs
        self.stop_rising_epochs = stop_rising_epochs
        self.lr_factor = lr_factor
        self.train_losses: list[float] = []
        self.val_losses: list[float] = []
        self.constant_run = 0
        self.plateau_run = 0
        self.rising = 0

    @classmethod
    def from_config(cls, cfg: PredictorTrainConfig):
        return cls(cfg.lr, cfg.tolerance, cfg.plateau_epochs, cfg.stop_constant_epochs,
                   cfg.stop_rising_epochs, cfg.lr_factor)

    def is_constant(self, prev: float, cur: float) -> bool:
        return cur == prev or abs(cur - prev) < self.tolerance * abs(prev)

    def update(self, train_loss: float, val_loss: float | None = None) -> tuple[float, bool, str]:
        """Record one epoch; returns (lr for the next epoch, stop?, reason)."""
        if self.train_losses and self.is_constant(self.train_losses[-1], train_loss):
            self.constant_run += 1
            self.plateau_run += 1
        else:
            self.constant_run = 1
            self.plateau_run = 1
        self.train_losses.append(train_loss)
        if val_loss is not None:
            if self.val_losses and val_loss > self.val_losses[-1]:
                self.rising += 1
            else:
                self.rising = 0
            self.val_losses.append(val_loss)

        if self.constant_run >= self.stop_constant_epochs:
            return self.lr, True, f"training loss constant for {self.constant_run} epochs"
        if self.rising >= self.stop_rising_epochs:
            return self.lr, True, f"validation loss increased for {self.rising} consecutive epochs"
        if self.plateau_run >= self.plateau_epochs:
            self.lr *= self.lr_factor
            self.plateau_run = 0
        return self.lr, False, ""


def replay_schedule(train_losses, val_losses=None, lr: float = 3e-4, **kw) -> dict:
    """Run the schedule over a fixed loss history.

    Returns the lr in force at each epoch, and the 1-based epoch after which
    training stops (or None).
    """
    sched = ConvergenceSchedule(lr, **kw)
    lrs = []
    for i, tl in enumerate(train_losses):
        lrs.append(sched.lr)
        vl = None if val_losses is None else val_losses[i]
        _, stop, reason = sched.update(tl, vl)
        if stop:
            return {"lrs": lrs, "stop_epoch": i + 1, "reason": reason, "next_lr": sched.lr}
    return {"lrs": lrs, "stop_epoch": None, "reason": "", "next_lr": sched.lr}


# ---------------------------------------------------------------- training

def _tensors(slices, targets=None):
    x = torch.as_tensor(np.asarray(slices, dtype=np.float32))
    if x.ndim == 3:
        x = x[:, None]
    if targets is None:
        return x, None
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != (len(x),):
        raise ValueError(f"need one target per slice ({len(x)}), got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError("missing or non-finite targets")
    return x, torch.as_tensor(t, dtype=torch.float32)


@torch.no_grad()
def evaluate_loss(model: SliceResNet, x, t, batch_size: int = 256) -> float:
    model.eval()
    total = 0.0
    for i in range(0, len(x), batch_size):
        total += task_loss(model, x[i:i + batch_size], t[i:i + batch_size]).item() * len(x[i:i + batch_size])
    return total / len(x)


def train_predictor(model: SliceResNet, train_slices, train_targets, val_slices=None, val_targets=None,
                    config: PredictorTrainConfig | None = None, schedule: ConvergenceSchedule | None = None):
    """Adam on per-slice samples with the plateau/stop schedule. Returns ``(model, history)``."""
    config = config or PredictorTrainConfig()
    x, t = _tensors(train_slices, train_targets)
    if len(x) == 0:
        raise ValueError("no training slices")
    if model.spec.task == "classification" and not set(np.unique(t.numpy())) <= {0.0, 1.0}:
        raise ValueError("classification targets must be 0 or 1")
    has_val = val_slices is not None and len(val_slices) > 0
    if has_val:
        xv, tv = _tensors(val_slices, val_targets)
    if model.spec.task == "regression":
        model.target_mean.fill_(float(t.double().mean()))
        model.target_std.fill_(float(max(t.double().std(), 1e-6)) if len(t) > 1 else 1.0)

    schedule = schedule or ConvergenceSchedule.from_config(config)
    opt = torch.optim.Adam(model.parameters(), lr=schedule.lr)
    gen = torch.Generator().manual_seed(config.seed)
    history = []
    for epoch in range(1, config.max_epochs + 1):
        lr = schedule.lr
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        perm = torch.randperm(len(x), generator=gen)
        total = 0.0
        for i in range(0, len(x), config.batch_size):
            idx = perm[i:i + config.batch_size]
            loss = task_loss(model, x[idx], t[idx])
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        train_loss = total / len(x)
        val_loss = evaluate_loss(model, xv, tv) if has_val else None
        _, stop, reason = schedule.update(train_loss, val_loss)
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_loss": float("nan") if val_loss is None else val_loss, "lr": lr})
        logger.info("epoch %d  train %.4f  val %s  lr %.1e", epoch, train_loss,
                    "-" if val_loss is None else f"{val_loss:.4f}", lr)
        if stop:
            logger.info("converged after epoch %d: %s", epoch, reason)
            break
    model.eval()
    return model, history


# ---------------------------------------------------------------- inference

@torch.no_grad()
def predict_slices(model: SliceResNet, slices, batch_size: int = 256) -> np.ndarray:
    model.eval()
    x, _ = _tensors(slices)
    if len(x) == 0:
        return np.zeros(0)
    return torch.cat([model(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]).double().numpy()


def predict_scan(model: SliceResNet, vol: Volume, n_slices: int = 80) -> ScanPrediction:
    slices = extract_middle_slices(vol, n_slices, model.spec.image_size)
    return ScanPrediction(vol.subject_id, predict_slices(model, stack_slices(slices)))


def save_predictor(model: SliceResNet, path, extra: dict | None = None) -> None:
    meta = {"spec": model.spec.to_dict(), "extra": dict(extra or {})}
    ckpt.write_container(path, "predictor", model.state_dict(), meta)


def read_predictor_meta(path) -> dict:
    header, _ = ckpt.read_container(path, kind="predictor")
    return header.get("extra", {})


def load_predictor(path) -> SliceResNet:
    header, state = ckpt.read_container(path, kind="predictor")
    model = SliceResNet(PredictorSpec(**header["spec"]))
    model.load_state_dict(state)
    model.eval()
    return model
