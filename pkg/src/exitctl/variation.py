"""Monte-Carlo estimators of the control functional and of its first and
second variations along probe fields, plus the common-random-number
finite-difference oracle used to validate them.

Conventions: a batch must have been sampled under the control it reports
(its own M_u/QV_u), with probe fields phi_i attached. Non-exited paths are
excluded and counted in n_discarded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .girsanov import batch_k_values
from .mcstats import EstimatorResult, summarize
from .model import BasisControl, BasisSet, ProblemSpec
from .sampler import BatchStats, SimConfig, sample_batch

__all__ = [
    "EstimatorResult", "GradHess", "estimate_functional",
    "estimate_first_variation", "first_variation_form_gap",
    "estimate_second_variation", "second_variation_along",
    "estimate_gradient_hessian", "estimate_gradient", "fd_gradient_oracle",
    "reweight_fd_gradient", "dump_gradient_hessian",
]


@dataclass(frozen=True)
class GradHess:
    """Gradient and Hessian of the basis-restricted functional, with
    entrywise standard errors. The Hessian is exactly symmetric."""

    grad: np.ndarray      # (n,)
    hess: np.ndarray      # (n, n)
    grad_se: np.ndarray
    hess_se: np.ndarray


def estimate_functional(batch: BatchStats, sigma: float) -> EstimatorResult:
    """Mean of W + QV_u/(2 sigma) over exited paths: the control functional."""
    vals = batch_k_values(batch, sigma, alpha=0)
    if vals.size == 0:
        raise ValueError("empty batch")
    return summarize(vals, n_discarded=batch.n_discarded)


def _check_probe(batch: BatchStats, i: int) -> None:
    if not 0 <= i < batch.m:
        raise IndexError(f"probe index {i} out of range (m={batch.m})")


def estimate_first_variation(batch: BatchStats, sigma: float, i: int,
                             form: str = "compact") -> EstimatorResult:
    """Directional derivative of the functional along probe i.

    form="compact" averages K1 * M_probe_i; form="h" averages the
    equivalent K0 * M_probe_i + CV_u_probe_i / sigma. The two agree in
    expectation; the compact form is the default estimator, the h form is
    retained for cross-checks.
    """
    _check_probe(batch, i)
    ex = batch.exited
    if form == "compact":
        vals = batch_k_values(batch, sigma, alpha=1) * batch.M_probe[ex, i]
    elif form == "h":
        vals = (batch_k_values(batch, sigma, alpha=0) * batch.M_probe[ex, i]
                + batch.CV_u_probe[ex, i] / sigma)
    else:
        raise ValueError("form must be 'compact' or 'h'")
    return summarize(vals, n_discarded=batch.n_discarded)


def first_variation_form_gap(batch: BatchStats, sigma: float) -> float:
    """Largest discrepancy between the two first-variation forms, in units
    of their combined standard error (should sit well below 3)."""
    worst = 0.0
    for i in range(batch.m):
        a = estimate_first_variation(batch, sigma, i, form="compact")
        b = estimate_first_variation(batch, sigma, i, form="h")
        se = np.hypot(a.std_error, b.std_error)
        if se > 0:
            worst = max(worst, abs(a.mean - b.mean) / se)
    return worst


def _second_variation_values(batch: BatchStats, sigma: float, i: int, j: int) -> np.ndarray:
    if batch.QV_probe is None:
        raise ValueError("batch lacks pairwise quadratic variations; sample with probe_qv='full'")
    ex = batch.exited
    k0 = batch_k_values(batch, sigma, alpha=0)
    Mi, Mj = batch.M_probe[ex, i], batch.M_probe[ex, j]
    qv_ij = batch.QV_probe[ex, i, j]
    cv_i, cv_j = batch.CV_u_probe[ex, i], batch.CV_u_probe[ex, j]
    return k0 * Mi * Mj + (qv_ij + Mj * cv_i + Mi * cv_j) / sigma


def estimate_second_variation(batch: BatchStats, sigma: float, i: int, j: int) -> EstimatorResult:
    """Mixed second variation along probes (i, j); symmetric in (i, j) by
    construction of the per-path expression."""
    _check_probe(batch, i)
    _check_probe(batch, j)
    vals = _second_variation_values(batch, sigma, i, j)
    if vals.size == 0:
        raise ValueError("empty batch")
    return summarize(vals, n_discarded=batch.n_discarded)


def second_variation_along(batch: BatchStats, sigma: float, z: np.ndarray) -> EstimatorResult:
    """Second variation along the combined probe sum_i z_i phi_i.

    Uses bilinearity of the per-path accumulators, so it needs the full
    pairwise quadratic-variation matrix.
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (batch.m,):
        raise ValueError(f"direction has shape {z.shape}, expected ({batch.m},)")
    if batch.QV_probe is None:
        raise ValueError("batch lacks pairwise quadratic variations; sample with probe_qv='full'")
    ex = batch.exited
    k0 = batch_k_values(batch, sigma, alpha=0)
    Mz = batch.M_probe[ex] @ z
    qv_z = np.einsum("kij,i,j->k", batch.QV_probe[ex], z, z)
    cv_z = batch.CV_u_probe[ex] @ z
    vals = k0 * Mz * Mz + (qv_z + 2.0 * Mz * cv_z) / sigma
    return summarize(vals, n_discarded=batch.n_discarded)


def probe_qv_along(batch: BatchStats, z: np.ndarray) -> EstimatorResult:
    """Mean quadratic variation of the combined probe sum_i z_i phi_i;
    the squared sampling norm that calibrates coercivity checks."""
    z = np.asarray(z, dtype=float)
    if batch.QV_probe is None:
        raise ValueError("batch lacks pairwise quadratic variations; sample with probe_qv='full'")
    vals = np.einsum("kij,i,j->k", batch.QV_probe[batch.exited], z, z)
    return summarize(vals, n_discarded=batch.n_discarded)


def estimate_gradient(batch: BatchStats, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """All first variations at once (the restricted-functional gradient),
    with entrywise standard errors; needs only the plain probe accumulators."""
    ex = batch.exited
    n_ex = int(ex.sum())
    if n_ex == 0:
        raise ValueError("empty batch")
    gvals = batch_k_values(batch, sigma, alpha=1)[:, None] * batch.M_probe[ex]
    g = gvals.mean(axis=0)
    se = gvals.std(axis=0, ddof=1) / np.sqrt(n_ex) if n_ex > 1 else np.zeros(batch.m)
    return g, se


def estimate_gradient_hessian(batch: BatchStats, sigma: float,
                              basis: BasisSet | None = None) -> GradHess:
    """All first variations (gradient) and mixed second variations (Hessian)
    over the batch's probes in one pass. The Hessian estimate is symmetrized
    entry by entry, which is exact because the per-path expression already
    is symmetric."""
    m = batch.m
    if basis is not None and basis.n != m:
        raise ValueError(f"basis has n={basis.n} but batch carries m={m} probes")
    if m == 0:
        raise ValueError("batch carries no probes")
    if batch.QV_probe is None:
        raise ValueError("batch lacks pairwise quadratic variations; sample with probe_qv='full'")
    ex = batch.exited
    n_ex = int(ex.sum())
    if n_ex == 0:
        raise ValueError("empty batch")
    k1 = batch_k_values(batch, sigma, alpha=1)
    k0 = batch_k_values(batch, sigma, alpha=0)
    Mp = batch.M_probe[ex]            # (k, m)
    CV = batch.CV_u_probe[ex]
    QV = batch.QV_probe[ex]

    gvals = k1[:, None] * Mp          # (k, m)
    grad = gvals.mean(axis=0)
    grad_se = gvals.std(axis=0, ddof=1) / np.sqrt(n_ex) if n_ex > 1 else np.zeros(m)

    # per-path Hessian contributions, symmetric by construction
    hvals = (k0[:, None, None] * Mp[:, :, None] * Mp[:, None, :]
             + (QV + Mp[:, None, :] * CV[:, :, None] + Mp[:, :, None] * CV[:, None, :]) / sigma)
    hess = hvals.mean(axis=0)
    hess = 0.5 * (hess + hess.T)
    hess_se = (hvals.std(axis=0, ddof=1) / np.sqrt(n_ex)) if n_ex > 1 else np.zeros((m, m))
    return GradHess(grad=grad, hess=hess, grad_se=grad_se,
                    hess_se=0.5 * (hess_se + hess_se.T))


def reweight_fd_gradient(batch: BatchStats, sigma: float, delta: float) -> np.ndarray:
    """Central differences of the functional under +-delta probe tilts,
    evaluated on one batch by exponential-martingale reweighting.

    The perturbed functional value at u + d*phi_i is the mean of
    (W + <M^{u+d phi_i}>/(2 sigma)) * E(M^{d phi_i}) over the same paths;
    the quadratic variation of the tilted control expands bilinearly from
    the recorded accumulators. Central differencing in d gives a smooth
    per-path statistic, so the oracle noise stays comparable to the
    analytic estimator's instead of blowing up as 1/sqrt(delta).
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    ex = batch.exited
    W, QVu = batch.W[ex], batch.QV_u[ex]
    out = np.empty(batch.m)
    for i in range(batch.m):
        Mi = batch.M_probe[ex, i]
        QVii = batch.QV_probe_diag[ex, i]
        CVi = batch.CV_u_probe[ex, i]
        tilted = {}
        for s in (+1.0, -1.0):
            d = s * delta
            k0 = W + (QVu + 2.0 * d * CVi + d * d * QVii) / (2.0 * sigma)
            tilted[s] = k0 * np.exp(d * Mi - 0.5 * d * d * QVii)
        out[i] = float(np.mean((tilted[+1.0] - tilted[-1.0]) / (2.0 * delta)))
    return out


def fd_gradient_oracle(spec: ProblemSpec, basis: BasisSet, a: np.ndarray, sigma: float,
                       delta: float, cfg: SimConfig, N: int, threads: int = 1,
                       method: str = "reweight") -> np.ndarray:
    """Central-difference gradient of the restricted functional at a; a
    validation oracle, not a production estimator.

    method="reweight" samples one batch under u^a and differences the
    exponential-martingale-tilted functional on the same paths (common
    random numbers in the strongest sense). method="resimulate" re-runs
    the sampler at a +- delta e_i with identical per-trajectory noise
    streams; its estimate is unbiased but carries O(1/sqrt(delta N))
    noise from paths whose exit step flips under the perturbation, so
    comparisons against it need far looser tolerances.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if method not in ("reweight", "resimulate"):
        raise ValueError("method must be 'reweight' or 'resimulate'")
    a = np.asarray(a, dtype=float)
    if method == "reweight":
        batch = sample_batch(spec, BasisControl(basis, a), basis, cfg, N,
                             threads=threads, probe_qv="diag")
        return reweight_fd_gradient(batch, sigma, delta)

    out = np.empty(basis.n)

    def phi_hat(coeffs) -> float:
        batch = sample_batch(spec, BasisControl(basis, coeffs), None, cfg, N,
                             threads=threads)
        return estimate_functional(batch, sigma).mean

    for i in range(basis.n):
        e = np.zeros(basis.n)
        e[i] = delta
        out[i] = (phi_hat(a + e) - phi_hat(a - e)) / (2.0 * delta)
    return out


def dump_gradient_hessian(gh: GradHess, fh) -> None:
    """Long-format CSV: gradient rows carry j = -1, Hessian rows (i, j)."""
    fh.write("i,j,value,se\n")
    n = gh.grad.shape[0]
    for i in range(n):
        fh.write(f"{i},-1,{gh.grad[i]:.17g},{gh.grad_se[i]:.17g}\n")
    for i in range(n):
        for j in range(n):
            fh.write(f"{i},{j},{gh.hess[i, j]:.17g},{gh.hess_se[i, j]:.17g}\n")
