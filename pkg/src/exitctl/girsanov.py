"""Exponential-martingale weights, measure reweighting, and the per-path
cost estimator family.

The weight of a stopped exponential martingale is carried in log form,
log E(M) = M_tau - QV_tau / 2, so finite inputs can never produce NaN; a
weight that underflows to zero in linear form is flagged rather than hidden.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mcstats import EstimatorResult, summarize
from .sampler import BatchStats, PathStats


@dataclass(frozen=True)
class GirsanovWeight:
    log_weight: float
    weight: float
    underflowed: bool = False

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("weight must be positive")


@dataclass(frozen=True)
class KValue:
    """Per-path value of W + QV_u/(2 sigma) + alpha * M_u / sigma."""

    value: float
    alpha: int
    sigma: float

    def __post_init__(self):
        if self.alpha not in (0, 1):
            raise ValueError("alpha must be 0 or 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


def exp_martingale_weight(M_tau: float, QV_tau: float) -> GirsanovWeight:
    """Weight exp(M - QV/2) of a stopped exponential martingale."""
    if QV_tau < 0:
        raise ValueError("quadratic variation must be nonnegative")
    lw = M_tau - 0.5 * QV_tau
    w = math.exp(lw) if lw > -745.0 else 0.0
    return GirsanovWeight(log_weight=lw, weight=w, underflowed=(w == 0.0 and lw != 0.0))


def k_estimator(stats: PathStats, sigma: float, alpha: int) -> KValue:
    """Cost-plus-control-penalty statistic of a single exited path."""
    if not stats.exited:
        raise ValueError("path did not exit; estimator undefined")
    if alpha not in (0, 1):
        raise ValueError("alpha must be 0 or 1")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    v = stats.W + stats.QV_u / (2.0 * sigma) + alpha * stats.M_u / sigma
    return KValue(value=float(v), alpha=alpha, sigma=sigma)


def batch_k_values(batch: BatchStats, sigma: float, alpha: int) -> np.ndarray:
    """K values over the exited paths of a batch, in trajectory order."""
    if alpha not in (0, 1):
        raise ValueError("alpha must be 0 or 1")
    ex = batch.exited
    return (batch.W[ex] + batch.QV_u[ex] / (2.0 * sigma)
            + (alpha / sigma) * batch.M_u[ex])


def log_reweighting_factors(batch: BatchStats, direction="control") -> np.ndarray:
    """log E(M^{-u'})_tau per exited path, for the reweighting direction u'.

    The batch was sampled under u + u'; the recorded martingale is the one
    for u', applied with negative sign ("u = (u + u') + (-u')"). Pass
    direction="control" to reweight away the batch's own driving control,
    or a probe index to use that probe field as u'.
    """
    ex = batch.exited
    if direction == "control":
        M, QV = batch.M_u[ex], batch.QV_u[ex]
    else:
        i = int(direction)
        if not 0 <= i < batch.m:
            raise IndexError(f"probe index {i} out of range (m={batch.m})")
        M, QV = batch.M_probe[ex, i], batch.QV_probe_diag[ex, i]
    return -M - 0.5 * QV


def reweighted_expectation(batch: BatchStats, integrand: np.ndarray,
                           direction="control") -> tuple[EstimatorResult, float]:
    """Mean of integrand * E(M^{-u'})_tau over exited paths.

    `integrand` holds per-path values over exited paths (in trajectory
    order). Returns the estimator together with the effective sample size
    N_eff = (sum w)^2 / sum w^2, which exposes weight degeneracy.
    """
    lw = log_reweighting_factors(batch, direction)
    if lw.size == 0:
        raise ValueError("empty batch")
    integrand = np.asarray(integrand, dtype=float)
    if integrand.shape != lw.shape:
        raise ValueError(f"integrand has shape {integrand.shape}, expected {lw.shape}")
    w = np.exp(lw)
    res = summarize(integrand * w, n_discarded=batch.n_discarded)
    sw, sw2 = w.sum(), (w * w).sum()
    n_eff = float(sw * sw / sw2) if sw2 > 0 else 0.0
    return res, n_eff


def kazamaki_bound(phi_sup_norm: float, sigma_p: float, p: float) -> tuple[float, bool]:
    """Sup-norm budget 2 sigma_p (sqrt(p)-1)^2 / p for L^q-bounded stopped
    exponential martingales (q conjugate to p); returns (bound, satisfied)."""
    if p <= 1:
        raise ValueError("p must exceed 1")
    if phi_sup_norm < 0:
        raise ValueError("sup norm must be nonnegative")
    if sigma_p <= 0:
        raise ValueError("sigma_p must be positive")
    bound = 2.0 * sigma_p * (math.sqrt(p) - 1.0) ** 2 / p
    return bound, phi_sup_norm ** 2 <= bound
