"""Joint-embedding objectives: SimCLR (NT-Xent), Barlow Twins and VICReg.

All three take the projector outputs of the two views, ``z_a`` and ``z_b``
(N x D), and return a scalar :class:`Tensor`, so gradients w.r.t. the
embeddings (and everything upstream) come from the reverse pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError

METHODS = ("simclr", "barlow_twins", "vicreg")


@dataclass(frozen=True)
class SslLossConfig:
    method: str = "barlow_twins"
    temperature: float = 0.1
    bt_lambda: float = 0.005
    vic_invariance: float = 25.0
    vic_variance: float = 25.0
    vic_covariance: float = 1.0
    vic_gamma: float = 1.0
    eps_var: float = 1e-4
    eps_norm: float = 1e-8

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown SSL method {self.method!r}; expected one of {METHODS}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        weights = (self.bt_lambda, self.vic_invariance, self.vic_variance, self.vic_covariance, self.vic_gamma)
        if min(weights) < 0 or self.eps_var < 0 or self.eps_norm < 0:
            raise ConfigError("loss weights and epsilons must be non-negative")


def _check_pair(z_a: Tensor, z_b: Tensor) -> tuple[int, int]:
    if z_a.ndim != 2 or z_a.shape != z_b.shape:
        raise ValueError(f"embedding batches must be matching 2-d arrays, got {z_a.shape} and {z_b.shape}")
    n, d = z_a.shape
    if n < 2:
        raise ValueError(f"need at least 2 pairs per batch, got {n}")
    return n, d


def simclr_loss(z_a, z_b, temperature: float = 0.1, eps_norm: float = 1e-8) -> Tensor:
    """NT-Xent over 2N anchors, each contrasted against the other 2N - 1 embeddings."""
    z_a, z_b = ad.as_tensor(z_a), ad.as_tensor(z_b)
    n, _ = _check_pair(z_a, z_b)
    z = ad.concat([z_a, z_b], axis=0)
    norms = ad.sqrt(ad.tsum(z * z, axis=1, keepdims=True))
    unit = z / (norms + eps_norm)
    logits = (unit @ unit.T) * (1.0 / temperature)

    idx = np.arange(2 * n)
    positive = np.zeros((2 * n, 2 * n))
    positive[idx, (idx + n) % (2 * n)] = 1.0
    not_self = ~np.eye(2 * n, dtype=bool)

    pos_logit = ad.tsum(logits * positive, axis=1)
    per_anchor = ad.logsumexp(logits, axis=1, mask=not_self) - pos_logit
    return ad.mean(per_anchor)


def cross_correlation(z_a, z_b, eps_var: float = 1e-4) -> Tensor:
    """D x D cross-correlation of the batch-standardized views (population statistics)."""
    z_a, z_b = ad.as_tensor(z_a), ad.as_tensor(z_b)
    n, _ = _check_pair(z_a, z_b)
    za = ad.batch_normalize(z_a, eps_var)
    zb = ad.batch_normalize(z_b, eps_var)
    return (za.T @ zb) * (1.0 / n)


def barlow_twins_loss(z_a, z_b, lambda_offdiag: float = 0.005, eps_var: float = 1e-4) -> Tensor:
    c = cross_correlation(z_a, z_b, eps_var)
    d = c.shape[0]
    eye = np.eye(d)
    on_diag = ad.tsum(((c * eye) - eye) ** 2)
    off_diag = ad.tsum((c * (1.0 - eye)) ** 2)
    return on_diag + lambda_offdiag * off_diag


def _vicreg_variance(z: Tensor, gamma: float, eps_var: float) -> Tensor:
    n = z.shape[0]
    centered = z - ad.mean(z, axis=0, keepdims=True)
    var = ad.tsum(centered * centered, axis=0) / (n - 1)
    return ad.mean(ad.relu(gamma - ad.sqrt(var + eps_var)))


def _vicreg_covariance(z: Tensor) -> Tensor:
    n, d = z.shape
    centered = z - ad.mean(z, axis=0, keepdims=True)
    cov = (centered.T @ centered) / (n - 1)
    off = cov * (1.0 - np.eye(d))
    return ad.tsum(off * off) / d


def vicreg_terms(z_a, z_b, gamma: float = 1.0, eps_var: float = 1e-4) -> dict[str, Tensor]:
    """The unweighted invariance, variance and covariance terms."""
    z_a, z_b = ad.as_tensor(z_a), ad.as_tensor(z_b)
    n, _ = _check_pair(z_a, z_b)
    diff = z_a - z_b
    return {
        "invariance": ad.tsum(diff * diff) / n,
        "variance": _vicreg_variance(z_a, gamma, eps_var) + _vicreg_variance(z_b, gamma, eps_var),
        "covariance": _vicreg_covariance(z_a) + _vicreg_covariance(z_b),
    }


def vicreg_loss(
    z_a,
    z_b,
    invariance_weight: float = 25.0,
    variance_weight: float = 25.0,
    covariance_weight: float = 1.0,
    gamma: float = 1.0,
    eps_var: float = 1e-4,
) -> Tensor:
    terms = vicreg_terms(z_a, z_b, gamma, eps_var)
    return (
        invariance_weight * terms["invariance"]
        + variance_weight * terms["variance"]
        + covariance_weight * terms["covariance"]
    )


def ssl_loss(z_a, z_b, config: SslLossConfig) -> Tensor:
    """Dispatch to the objective named by ``config.method``."""
    if config.method == "simclr":
        return simclr_loss(z_a, z_b, config.temperature, config.eps_norm)
    if config.method == "barlow_twins":
        return barlow_twins_loss(z_a, z_b, config.bt_lambda, config.eps_var)
    return vicreg_loss(
        z_a,
        z_b,
        config.vic_invariance,
        config.vic_variance,
        config.vic_covariance,
        config.vic_gamma,
        config.eps_var,
    )
