"""Reconstruction, KL and beta-weighted VAE objectives (all minimised)."""

from __future__ import annotations

from dataclasses import dataclass

import torch

REDUCTIONS = ("mean_per_pixel", "sum")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    kind: str = "mse"  # mse | vae
    beta: float = 1.0
    reduction: str = "mean_per_pixel"

    def __post_init__(self):
        if self.kind not in ("mse", "vae"):
            raise LossError(f"loss kind must be 'mse' or 'vae', got {self.kind!r}")
        if self.beta < 0:
            raise LossError(f"beta must be non-negative, got {self.beta}")
        if self.reduction not in REDUCTIONS:
            raise LossError(f"reduction must be one of {REDUCTIONS}, got {self.reduction!r}")


def _t(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def mse_loss(x, x_hat, reduction: str = "mean_per_pixel") -> torch.Tensor:
    """Squared error averaged over every element, or summed per sample and
    averaged over the leading batch axis when ``reduction="sum"``."""
    x, x_hat = _t(x), _t(x_hat)
    if x.shape != x_hat.shape:
        raise LossError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    sq = (x - x_hat) ** 2
    if reduction == "mean_per_pixel":
        return sq.mean()
    if reduction == "sum":
        return sq.sum() / (x.shape[0] if x.ndim > 1 else 1)
    raise LossError(f"unknown reduction {reduction!r}")


def kl_gaussian(mu, logvar) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over latent dims, averaged over batch."""
    mu, logvar = _t(mu), _t(logvar)
    if mu.shape != logvar.shape:
        raise LossError(f"shape mismatch: {tuple(mu.shape)} vs {tuple(logvar.shape)}")
    if not (torch.isfinite(mu).all() and torch.isfinite(logvar).all()):
        raise LossError("kl_gaussian received non-finite inputs")
    per_dim = -0.5 * (1.0 + logvar - mu ** 2 - torch.exp(logvar))
    if mu.ndim <= 1:
        return per_dim.sum()
    return per_dim.sum() / mu.shape[0]


def vae_loss(x, x_hat, mu, logvar, beta: float = 1.0, reduction: str = "mean_per_pixel",
             return_parts: bool = False):
    """``mse_loss + beta * kl_gaussian``; optionally also returns both terms."""
    if beta < 0:
        raise LossError(f"beta must be non-negative, got {beta}")
    rec = mse_loss(x, x_hat, reduction)
    kl = kl_gaussian(mu, logvar)
    total = rec + beta * kl if beta != 0 else rec
    if return_parts:
        return total, rec, kl
    return total
