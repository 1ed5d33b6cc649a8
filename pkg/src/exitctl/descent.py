"""Gradient descent over basis coefficients, with convexity preconditions,
coercivity-constant estimation, and convergence-rate diagnostics.

Each iteration samples a fresh batch under the current feedback control,
estimates the functional and its gradient, and steps downhill. Iteration
seeds derive deterministically from the base seed, so a run can be resumed
from a checkpoint and reproduce the uninterrupted iterates bit for bit.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .model import BasisControl, BasisSet, DomainSpec, ProblemSpec
from .sampler import SimConfig, sample_batch
from .variation import estimate_functional, estimate_gradient


@dataclass(frozen=True)
class StepSchedule:
    """Fixed step or Armijo backtracking from an initial step."""

    kind: str = "fixed"      # fixed | backtracking
    h: float = 0.1
    shrink: float = 0.5
    c1: float = 1e-4
    max_shrinks: int = 8

    def __post_init__(self):
        if self.kind not in ("fixed", "backtracking"):
            raise ValueError("step schedule must be 'fixed' or 'backtracking'")
        if self.h <= 0:
            raise ValueError("step size must be positive")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")


@dataclass(frozen=True)
class DescentConfig:
    a0: tuple[float, ...]
    n_iter: int
    n_traj: int
    step: StepSchedule = field(default_factory=StepSchedule)
    grad_tol: float = 1e-2
    seed_policy: str = "fresh"   # fresh | frozen

    def __post_init__(self):
        if self.n_iter < 0 or self.n_traj < 1:
            raise ValueError("n_iter must be >= 0 and n_traj >= 1")
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be positive")
        if self.seed_policy not in ("fresh", "frozen"):
            raise ValueError("seed_policy must be 'fresh' or 'frozen'")


@dataclass
class IterationRecord:
    iteration: int
    a: np.ndarray
    phi: float
    phi_se: float
    grad: np.ndarray
    grad_se: np.ndarray
    grad_norm: float
    step_size: float
    wall_time: float


@dataclass
class DescentTrace:
    records: list[IterationRecord]
    final_a: np.ndarray
    converged: bool
    aborted_reason: str | None = None

    def __len__(self):
        return len(self.records)


@dataclass(frozen=True)
class ConvexityCertificate:
    """Strong-convexity margin of the terminal cost and, when estimated,
    the uniform probe quadratic-variation floor."""

    gamma: float
    satisfied: bool
    suggested_shift: float
    m_x_estimate: float | None = None
    m_x_se: float | None = None


class DescentDiverged(RuntimeError):
    def __init__(self, message: str, trace: DescentTrace):
        super().__init__(message)
        self.trace = trace


# ---------------------------------------------------------------------------
# preconditions
# ---------------------------------------------------------------------------

def boundary_grid(domain: DomainSpec, n: int = 64) -> np.ndarray:
    """Deterministic sample of the boundary for cost minimisation checks."""
    d = domain.dim
    if domain.shape == "interval":
        lo, hi = domain.bounding_box()
        return np.array([[lo[0]], [hi[0]]])
    if domain.shape == "box":
        lo, hi = domain.bounding_box()
        pts = []
        per_face = max(2, n // (2 * d))
        for ax in range(d):
            for val in (lo[ax], hi[ax]):
                others = [np.linspace(lo[j], hi[j], per_face) for j in range(d) if j != ax]
                mesh = np.meshgrid(*others, indexing="ij") if others else []
                face = np.empty((per_face ** (d - 1) if d > 1 else 1, d))
                face[:, ax] = val
                k = 0
                for j in range(d):
                    if j != ax:
                        face[:, j] = mesh[k].reshape(-1)
                        k += 1
                pts.append(face)
        return np.vstack(pts)
    # ball
    c = np.asarray(domain.center, dtype=float)
    if d == 1:
        return np.array([[c[0] - domain.radius], [c[0] + domain.radius]])
    angles = np.linspace(0.0, 2.0 * math.pi, max(8, n), endpoint=False)
    return np.stack([c[0] + domain.radius * np.cos(angles),
                     c[1] + domain.radius * np.sin(angles)], axis=1)


def check_convexity_preconditions(spec: ProblemSpec,
                                  boundary_pts: np.ndarray | None = None) -> ConvexityCertificate:
    """Margin gamma = min kappa_t - 1/sigma over a boundary grid.

    A nonpositive margin comes with the shift that restores it: replacing
    kappa_t by kappa_t + max(0, -gamma) makes the functional strongly convex
    without changing the minimiser.
    """
    if boundary_pts is None:
        boundary_pts = boundary_grid(spec.domain)
    pts = np.atleast_2d(np.asarray(boundary_pts, dtype=float))
    if pts.shape[0] == 0:
        raise ValueError("empty boundary grid")
    kt = np.atleast_1d(spec.terminal_cost(pts))
    gamma = float(kt.min()) - 1.0 / spec.sigma
    return ConvexityCertificate(gamma=gamma, satisfied=gamma > 0,
                                suggested_shift=max(0.0, -gamma))


def estimate_coercivity_constant(spec: ProblemSpec, basis: BasisSet,
                                 a_samples: Sequence[np.ndarray], cfg: SimConfig,
                                 N: int, threads: int = 1) -> tuple[float, float]:
    """Smallest mean probe quadratic variation over the sampled coefficient
    neighbourhood: min over a, then over probes, of E[<M^phi_i>_tau under u^a].

    Returns the estimate with the standard error of the binding entry. A
    value indistinguishable from zero flags a probe whose support the paths
    never visit.
    """
    a_samples = list(a_samples)
    if not a_samples:
        raise ValueError("need at least one coefficient sample")
    best = math.inf
    best_se = math.nan
    for k, a in enumerate(a_samples):
        control = BasisControl(basis, a)
        batch = sample_batch(spec, control, basis,
                             replace(cfg, seed=cfg.seed + k), N,
                             threads=threads, probe_qv="diag")
        qv = batch.QV_probe_diag[batch.exited]
        means = qv.mean(axis=0)
        ses = qv.std(axis=0, ddof=1) / math.sqrt(qv.shape[0]) if qv.shape[0] > 1 \
            else np.zeros(batch.m)
        i = int(np.argmin(means))
        if means[i] < best:
            best, best_se = float(means[i]), float(ses[i])
    return best, best_se


# ---------------------------------------------------------------------------
# the descent loop
# ---------------------------------------------------------------------------

def _iteration_seed(base: int, iteration: int, policy: str) -> int:
    return base if policy == "frozen" else base + 1 + iteration


def run_descent(spec: ProblemSpec, basis: BasisSet, dcfg: DescentConfig,
                sim: SimConfig, *, allow_nonconvex: bool = False,
                threads: int = 1, start_iteration: int = 0,
                a_start: np.ndarray | None = None) -> DescentTrace:
    """Iterate a <- a - h * grad until the gradient norm falls below
    grad_tol plus three standard errors, the iteration budget runs out, or
    the divergence guard trips (five consecutive increases beyond noise).

    `start_iteration`/`a_start` resume a checkpointed run; iteration seeds
    depend only on (sim.seed, iteration), so the resumed trajectory of
    iterates matches an uninterrupted run exactly.
    """
    cert = check_convexity_preconditions(spec)
    if not cert.satisfied:
        msg = (f"terminal cost margin gamma={cert.gamma:.4g} <= 0; "
               f"suggested shift {cert.suggested_shift:.4g}")
        if not allow_nonconvex:
            raise ValueError(msg + " (pass allow_nonconvex=True to proceed)")
        import warnings
        warnings.warn(msg, RuntimeWarning, stacklevel=2)

    a = np.asarray(a_start if a_start is not None else dcfg.a0, dtype=float)
    if a.shape != (basis.n,):
        raise ValueError(f"a0 has shape {a.shape}, basis has n={basis.n}")
    sigma = spec.sigma
    records: list[IterationRecord] = []
    increases = 0
    prev_phi = None
    prev_se = 0.0

    def evaluate(coeffs, seed, with_probes=True):
        cfg_i = replace(sim, seed=seed)
        return sample_batch(spec, BasisControl(basis, coeffs),
                            basis if with_probes else None, cfg_i, dcfg.n_traj,
                            threads=threads, probe_qv="diag")

    converged = False
    for it in range(start_iteration, start_iteration + dcfg.n_iter + 1):
        t0 = time.perf_counter()
        seed = _iteration_seed(sim.seed, it, dcfg.seed_policy)
        batch = evaluate(a, seed)
        phi = estimate_functional(batch, sigma)
        g, g_se = estimate_gradient(batch, sigma)
        gnorm = float(np.linalg.norm(g))
        # standard error of the norm itself (projection of the entrywise
        # errors onto the gradient direction; falls back to the full norm
        # when the gradient is statistically indistinguishable from zero)
        if gnorm > 0:
            se_norm = float(np.sqrt(np.sum((g * g_se) ** 2)) / gnorm)
        else:
            se_norm = float(np.linalg.norm(g_se))

        trace_step = 0.0
        rec = IterationRecord(iteration=it, a=a.copy(), phi=phi.mean,
                              phi_se=phi.std_error, grad=g, grad_se=g_se,
                              grad_norm=gnorm, step_size=trace_step,
                              wall_time=time.perf_counter() - t0)
        records.append(rec)

        if prev_phi is not None:
            if phi.mean > prev_phi + 3.0 * math.hypot(phi.std_error, prev_se):
                increases += 1
            else:
                increases = 0
            if increases >= 5:
                trace = DescentTrace(records, a.copy(), False,
                                     aborted_reason="objective increased for 5 "
                                                    "consecutive iterations beyond noise")
                raise DescentDiverged(trace.aborted_reason, trace)
        prev_phi, prev_se = phi.mean, phi.std_error

        if gnorm <= dcfg.grad_tol + 3.0 * se_norm:
            converged = True
            break
        if it >= start_iteration + dcfg.n_iter:
            break

        h = dcfg.step.h
        if dcfg.step.kind == "backtracking":
            h = _backtrack(evaluate, seed, a, g, gnorm, phi, sigma, dcfg)
        a = a - h * g
        rec.step_size = h

    return DescentTrace(records=records, final_a=a.copy(), converged=converged)


def _backtrack(evaluate, seed, a, g, gnorm, phi, sigma, dcfg) -> float:
    """Armijo backtracking with common random numbers within the iteration.

    Candidate evaluations reuse the iteration seed; under a frozen seed
    policy the surrogate objective is deterministic, so the accepted step
    never increases it (monotone descent).
    """
    sched = dcfg.step
    h = sched.h
    frozen = dcfg.seed_policy == "frozen"
    best_h, best_phi = None, math.inf
    for _ in range(sched.max_shrinks + 1):
        cand = a - h * g
        try:
            phi_c = estimate_functional(evaluate(cand, seed, with_probes=False), sigma)
        except RuntimeError:
            # candidate control produced no exits within the step budget
            h *= sched.shrink
            continue
        slack = 0.0 if frozen else math.hypot(phi.std_error, phi_c.std_error)
        if phi_c.mean <= phi.mean - sched.c1 * h * gnorm ** 2 + slack:
            return h
        if phi_c.mean < best_phi:
            best_h, best_phi = h, phi_c.mean
        h *= sched.shrink
    if frozen and best_phi > phi.mean:
        return 0.0  # no decreasing step found: stay put rather than ascend
    return best_h if best_h is not None else h


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RateDiagnostics:
    passed: bool
    trivial: bool
    fitted_rate: float     # decay rate of |a - a_inf|^2 per unit descent time
    bound: float           # gamma * m_x
    n_points: int

    def __str__(self):
        tag = "PASS" if self.passed else "FAIL"
        if self.trivial:
            return f"[{tag}] already at the fixed point"
        return (f"[{tag}] fitted decay {self.fitted_rate:.4g} vs bound "
                f"{self.bound:.4g} (factor-of-5 band), {self.n_points} points")


def convergence_diagnostics(trace: DescentTrace, gamma: float, m_x: float,
                            a_inf: np.ndarray) -> RateDiagnostics:
    """Log-linear fit of |a - a_inf|^2 against cumulative descent time,
    compared with the strong-convexity decay rate gamma * m_x.

    The discrete noisy iteration only approximates the continuous descent
    flow, so PASS is deliberately loose: negative fitted slope within a
    factor of five of the bound.
    """
    if len(trace) < 3:
        raise ValueError("need at least 3 trace points")
    a_inf = np.asarray(a_inf, dtype=float)
    d2 = np.array([float(np.sum((r.a - a_inf) ** 2)) for r in trace.records])
    t = np.concatenate([[0.0], np.cumsum([r.step_size for r in trace.records[:-1]])])
    bound = float(gamma * m_x)
    if np.all(d2 <= 1e-20):
        return RateDiagnostics(True, True, math.inf, bound, len(trace))
    keep = d2 > max(1e-300, 1e-12 * d2.max())
    if keep.sum() < 3 or np.ptp(t[keep]) == 0:
        return RateDiagnostics(True, True, math.inf, bound, int(keep.sum()))
    slope, _ = np.polyfit(t[keep], np.log(d2[keep]), 1)
    rate = -float(slope)
    passed = rate > 0 and bound / 5.0 <= rate <= 5.0 * bound
    return RateDiagnostics(passed, False, rate, bound, int(keep.sum()))


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def dump_trace(trace: DescentTrace, fh) -> None:
    n = trace.records[0].a.shape[0] if trace.records else 0
    cols = ["iter"] + [f"a_{i + 1}" for i in range(n)] + ["phi_hat", "phi_se", "grad_norm", "step"]
    fh.write(",".join(cols) + "\n")
    for r in trace.records:
        vals = [str(r.iteration)] + [f"{v:.17g}" for v in r.a]
        vals += [f"{r.phi:.17g}", f"{r.phi_se:.17g}", f"{r.grad_norm:.17g}", f"{r.step_size:.17g}"]
        fh.write(",".join(vals) + "\n")


def save_checkpoint(trace: DescentTrace, dcfg: DescentConfig, sim: SimConfig, fh) -> None:
    last = trace.records[-1]
    json.dump({
        "iteration": last.iteration,
        "a": [float(v) for v in trace.final_a],
        "seed_base": sim.seed,
        "seed_policy": dcfg.seed_policy,
        "grad_tol": dcfg.grad_tol,
        "n_traj": dcfg.n_traj,
        "converged": trace.converged,
    }, fh, indent=2)


def load_checkpoint(fh) -> dict:
    data = json.load(fh)
    data["a"] = np.asarray(data["a"], dtype=float)
    return data
