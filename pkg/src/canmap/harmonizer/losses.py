"""Cycle and least-squares adversarial losses."""
from __future__ import annotations

import torch


def _check(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def cycle_loss(x, x_rec, y, y_rec) -> torch.Tensor:
    """mean|x_rec - x| + mean|y_rec - y|."""
    _check(x, x_rec, "cycle loss (source)")
    _check(y, y_rec, "cycle loss (reference)")
    return (x_rec - x).abs().mean() + (y_rec - y).abs().mean()


def discriminator_loss(D, real, fake) -> torch.Tensor:
    _check(real, fake, "discriminator loss")
    return ((D(real) - 1) ** 2).mean() + (D(fake.detach()) ** 2).mean()


def generator_adv_loss(D, fake) -> torch.Tensor:
    return ((D(fake) - 1) ** 2).mean()


def adversarial_losses(D, real, fake):
    """Least-squares GAN losses: real -> 1, fake -> 0.

    ``d_loss`` sees a detached ``fake``; ``g_loss`` lets gradients reach the
    generator that produced it.
    """
    return discriminator_loss(D, real, fake), generator_adv_loss(D, fake)
