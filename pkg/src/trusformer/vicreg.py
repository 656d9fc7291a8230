from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class VICRegWeights:
    lam: float = 25.0  # invariance
    mu: float = 25.0  # variance
    nu: float = 1.0  # covariance
    gamma: float = 1.0  # target std per dimension
    eps: float = 1e-4

    def __post_init__(self):
        if min(self.lam, self.mu, self.nu, self.gamma, self.eps) < 0:
            raise ValueError("VICReg weights must be nonnegative")


class VICRegTerms(NamedTuple):
    total: torch.Tensor
    invariance: torch.Tensor
    variance: torch.Tensor  # v(Z) + v(Z')
    covariance: torch.Tensor  # c(Z) + c(Z')


def invariance_term(z1: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    return F.mse_loss(z1, z2)


def variance_term(z: torch.Tensor, gamma: float = 1.0, eps: float = 1e-4) -> torch.Tensor:
    """Mean hinge on the per-dimension batch standard deviation."""
    std = torch.sqrt(z.var(dim=0) + eps)
    return F.relu(gamma - std).mean()


def covariance_term(z: torch.Tensor) -> torch.Tensor:
    """Sum of squared off-diagonal batch covariances, divided by the dimension."""
    n, d = z.shape
    zc = z - z.mean(dim=0)
    cov = zc.T @ zc / (n - 1)
    off = cov - torch.diag_embed(torch.diagonal(cov))
    return off.pow(2).sum() / d


def vicreg_loss(z1: torch.Tensor, z2: torch.Tensor, w: VICRegWeights = VICRegWeights()) -> VICRegTerms:
    if z1.shape != z2.shape:
        raise ValueError(f"view batches differ in shape: {tuple(z1.shape)} vs {tuple(z2.shape)}")
    if z1.dim() != 2 or z1.shape[0] < 2:
        raise ValueError("need a 2D batch with at least 2 rows (variance is undefined otherwise)")
    s = invariance_term(z1, z2)
    v = variance_term(z1, w.gamma, w.eps) + variance_term(z2, w.gamma, w.eps)
    c = covariance_term(z1) + covariance_term(z2)
    return VICRegTerms(w.lam * s + w.mu * v + w.nu * c, s, v, c)
