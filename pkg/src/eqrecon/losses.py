"""VICReg invariance loss, pixel reconstruction loss and their combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gradcore import ContractError, Tensor
from .gradcore import functions as F
from .gradcore.tensor import DimensionError


@dataclass(frozen=True)
class LossWeights:
    lambda_ssl: float = 1.0
    lambda_recon: float = 1.0
    sim_coeff: float = 25.0
    var_coeff: float = 25.0
    cov_coeff: float = 1.0
    gamma: float = 1.0
    eps: float = 1e-4

    def __post_init__(self) -> None:
        for name, val in vars(self).items():
            if val < 0:
                raise ValueError(f"loss weight {name} must be nonnegative, got {val}")


@dataclass
class LossReport:
    invariance: float
    variance: float
    covariance: float
    reconstruction: float
    total: float

    def ssl(self, w: LossWeights) -> float:
        return w.sim_coeff * self.invariance + w.var_coeff * self.variance + w.cov_coeff * self.covariance


def _variance_term(z: Tensor, gamma: float, eps: float) -> Tensor:
    std = F.sqrt(F.add(F.var(z, axis=0, ddof=1), eps))
    return F.mean(F.relu(F.sub(gamma, std)))


def _covariance_term(z: Tensor) -> Tensor:
    n, d = z.shape
    zc = F.sub(z, F.mean(z, axis=0, keepdims=True))
    cov = F.div(F.matmul(F.transpose(zc), zc), n - 1)
    off = F.mul(cov, 1.0 - np.eye(d, dtype=z.dtype))
    return F.div(F.sum(F.mul(off, off)), d)


def vicreg_loss(z1: Tensor, z2: Tensor, w: LossWeights = LossWeights()) -> tuple[Tensor, Tensor, Tensor]:
    """(invariance, variance, covariance), unweighted.

    Invariance is the mean squared difference.  The variance hinge is
    averaged over the two views, the covariance penalty summed over them.
    """
    if z1.shape != z2.shape or z1.ndim != 2:
        raise DimensionError(f"vicreg_loss: shapes {z1.shape} and {z2.shape} must be equal (N, d)")
    if z1.shape[0] < 2:
        raise ContractError("vicreg_loss needs N >= 2 (covariance undefined)")
    inv = F.mse(z1, z2)
    var = F.mul(F.add(_variance_term(z1, w.gamma, w.eps), _variance_term(z2, w.gamma, w.eps)), 0.5)
    cov = F.add(_covariance_term(z1), _covariance_term(z2))
    return inv, var, cov


def weighted_ssl(inv: Tensor, var: Tensor, cov: Tensor, w: LossWeights) -> Tensor:
    return F.add(F.add(F.mul(inv, w.sim_coeff), F.mul(var, w.var_coeff)), F.mul(cov, w.cov_coeff))


def recon_loss(y_recon: Tensor, v2) -> Tensor:
    """Mean over all pixels of the squared difference to the target view."""
    if tuple(y_recon.shape) != tuple(np.shape(v2.data if isinstance(v2, Tensor) else v2)):
        raise DimensionError(f"recon_loss: prediction {y_recon.shape} vs target {np.shape(v2)}")
    return F.mse(y_recon, v2)


def total_loss(ssl, recon, w: LossWeights):
    """lambda_ssl * ssl + lambda_recon * recon (Tensors or floats)."""
    if isinstance(ssl, Tensor) or isinstance(recon, Tensor):
        return F.add(F.mul(ssl, w.lambda_ssl), F.mul(recon, w.lambda_recon))
    return w.lambda_ssl * ssl + w.lambda_recon * recon
