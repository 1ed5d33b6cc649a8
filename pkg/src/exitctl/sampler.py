"""Euler-Maruyama simulation of the controlled diffusion until first exit.

Every trajectory is driven by its own counter-based random stream derived
from (seed, trajectory index), so batch results are bitwise independent of
chunking, block size, and worker count. Along each path the sampler
accumulates the work functional plus all stochastic integrals and
quadratic-variation terms needed by the estimator modules:

  W           running cost (left-point rectangle rule) + terminal cost
  M_u         (2 eps)^{-1/2} * sum_k u(X_k) . dB_k
  QV_u        (2 eps)^{-1}   * sum_k |u(X_k)|^2 dt
  M_probe[i]  same Ito sums for each probe field phi_i
  QV_probe    (2 eps)^{-1}   * sum_k phi_i . phi_j dt   (pairwise, optional)
  CV_u_probe  (2 eps)^{-1}   * sum_k u . phi_i dt

Exit handling: by default a trajectory stops at the first grid time with
X_{k+1} outside the open domain (documented O(sqrt(dt)) bias). The "bridge"
detector additionally samples Brownian-bridge boundary crossings between
grid times, removing the leading-order bias; it consumes a second uniform
stream per trajectory.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import BasisControl, BasisSet, ProblemSpec

Array = np.ndarray

_BRIDGE_SALT = 0x9E3779B97F4A7C15  # distinct stream for crossing uniforms
_CHUNK = 16384                     # fixed; results do not depend on it


@dataclass(frozen=True)
class SimConfig:
    """Time discretization and stream policy for one batch.

    The seed fully determines every trajectory; `block_steps` only sets the
    draw granularity of the per-trajectory streams and has no effect on
    results.
    """

    dt: float
    max_steps: int
    seed: int = 0
    exit_interpolation: bool = True
    exit_detection: str = "grid"  # "grid" | "bridge"
    block_steps: int = 256

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.exit_detection not in ("grid", "bridge"):
            raise ValueError("exit_detection must be 'grid' or 'bridge'")
        if self.block_steps < 1:
            raise ValueError("block_steps must be >= 1")


@dataclass
class PathStats:
    """Per-trajectory accumulators at the stopping time."""

    tau: float
    exit_point: Array
    W: float
    M_u: float
    QV_u: float
    M_probe: Array        # (m,)
    QV_probe: Array       # (m, m), symmetric PSD
    CV_u_probe: Array     # (m,)
    n_steps: int
    exited: bool
    seed: int = 0


@dataclass
class BatchStats:
    """Column-wise accumulators for N trajectories, ordered by trajectory index.

    Aggregation from chunks is a pure scatter into preallocated rows, so any
    reduction over these arrays is scheduling-invariant. `QV_probe` is None
    when pairwise quadratic variations were not requested.
    """

    seed_base: int
    indices: Array        # (N,) trajectory indices
    tau: Array            # (N,)
    W: Array
    M_u: Array
    QV_u: Array
    M_probe: Array        # (N, m)
    QV_probe_diag: Array  # (N, m)
    CV_u_probe: Array     # (N, m)
    QV_probe: Array | None  # (N, m, m)
    exit_point: Array     # (N, d)
    n_steps: Array        # (N,)
    exited: Array         # (N,) bool

    @property
    def n(self) -> int:
        return self.tau.shape[0]

    @property
    def m(self) -> int:
        return self.M_probe.shape[1]

    @property
    def n_exited(self) -> int:
        return int(self.exited.sum())

    @property
    def n_discarded(self) -> int:
        return self.n - self.n_exited

    @property
    def seeds(self) -> Array:
        return self.seed_base + self.indices

    def path(self, i: int) -> PathStats:
        qv = self.QV_probe[i] if self.QV_probe is not None else np.diag(self.QV_probe_diag[i])
        return PathStats(
            tau=float(self.tau[i]), exit_point=self.exit_point[i].copy(),
            W=float(self.W[i]), M_u=float(self.M_u[i]), QV_u=float(self.QV_u[i]),
            M_probe=self.M_probe[i].copy(), QV_probe=qv.copy(),
            CV_u_probe=self.CV_u_probe[i].copy(), n_steps=int(self.n_steps[i]),
            exited=bool(self.exited[i]), seed=int(self.seeds[i]))

    @classmethod
    def concat(cls, parts: Sequence["BatchStats"]) -> "BatchStats":
        """Associative merge; order of trajectories follows the given parts."""
        if not parts:
            raise ValueError("nothing to merge")
        full = all(p.QV_probe is not None for p in parts)
        return cls(
            seed_base=parts[0].seed_base,
            indices=np.concatenate([p.indices for p in parts]),
            tau=np.concatenate([p.tau for p in parts]),
            W=np.concatenate([p.W for p in parts]),
            M_u=np.concatenate([p.M_u for p in parts]),
            QV_u=np.concatenate([p.QV_u for p in parts]),
            M_probe=np.concatenate([p.M_probe for p in parts]),
            QV_probe_diag=np.concatenate([p.QV_probe_diag for p in parts]),
            CV_u_probe=np.concatenate([p.CV_u_probe for p in parts]),
            QV_probe=np.concatenate([p.QV_probe for p in parts]) if full else None,
            exit_point=np.concatenate([p.exit_point for p in parts]),
            n_steps=np.concatenate([p.n_steps for p in parts]),
            exited=np.concatenate([p.exited for p in parts]))


# ---------------------------------------------------------------------------
# step evaluators
# ---------------------------------------------------------------------------

def _probe_stack(probes, dim: int):
    """Normalise the probe argument to (m, eval(X)->(k,m,d))."""
    if probes is None:
        return 0, None
    if isinstance(probes, BasisSet):
        return probes.n, probes.gradients
    fields = list(probes)

    def eval_all(X: Array) -> Array:
        out = np.empty((X.shape[0], len(fields), dim))
        for i, f in enumerate(fields):
            out[:, i, :] = np.asarray(f(X), dtype=float).reshape(X.shape[0], dim)
        return out

    return len(fields), eval_all


def _make_step_eval(control, probes, dim: int):
    """Build eval(X) -> (u | None, G | None) with a fused path when the
    control lives in the same basis as the probes (one gradient pass)."""
    m, probe_eval = _probe_stack(probes, dim)
    if probe_eval is None:
        if control is None:
            return m, lambda X: (None, None)
        return m, lambda X: (np.asarray(control(X), dtype=float).reshape(-1, dim), None)
    if isinstance(control, BasisControl) and isinstance(probes, BasisSet) \
            and control.basis is probes:
        a = control.a

        def fused(X):
            G = probe_eval(X)
            return np.einsum("kmd,m->kd", G, a), G

        return m, fused
    if control is None:
        return m, lambda X: (None, probe_eval(X))
    return m, lambda X: (np.asarray(control(X), dtype=float).reshape(-1, dim), probe_eval(X))


def _noise_generator(seed_base: int, index: int) -> np.random.Generator:
    key = np.array([seed_base & 0xFFFFFFFFFFFFFFFF, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _bridge_generator(seed_base: int, index: int) -> np.random.Generator:
    key = np.array([(seed_base ^ _BRIDGE_SALT) & 0xFFFFFFFFFFFFFFFF, index],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# the chunk engine
# ---------------------------------------------------------------------------

def _run_chunk(spec: ProblemSpec, control, probes, cfg: SimConfig,
               indices: Array, out: dict, want_full: bool) -> None:
    """Simulate the trajectories `indices` and scatter results into `out`."""
    d = spec.dim
    dom = spec.domain
    m, step_eval = _make_step_eval(control, probes, d)
    w = indices.size
    dt = cfg.dt
    sqrt_dt = math.sqrt(dt)
    sqrt2eps = math.sqrt(2.0 * spec.epsilon)
    inv_s2e = 1.0 / sqrt2eps
    dt_2eps = dt / (2.0 * spec.epsilon)
    inv_eps_dt = 1.0 / (spec.epsilon * dt)
    bridge = cfg.exit_detection == "bridge"
    kr_const = spec.running_cost.constant
    zero_V = spec.potential.is_zero
    track_diag = m > 0 and not want_full

    gens = [_noise_generator(cfg.seed, int(i)) for i in indices]
    ugens = [_bridge_generator(cfg.seed, int(i)) for i in indices] if bridge else None

    X = np.tile(spec.start_point, (w, 1))
    rows = indices.copy()
    steps = np.zeros(w, dtype=np.int64)
    Wrun = np.zeros(w)
    kt_at_exit = np.zeros(w)
    M_u = np.zeros(w)
    QV_u = np.zeros(w)
    M_p = np.zeros((w, m))
    QVd = np.zeros((w, m))
    CV = np.zeros((w, m))
    QVf = np.zeros((w, m, m)) if want_full and m else None
    exit_pt = np.full((w, d), np.nan)
    done_exited = np.zeros(w, dtype=bool)

    k_chunk = 0
    while X.shape[0] > 0 and k_chunk < cfg.max_steps:
        wa = X.shape[0]
        B = min(cfg.block_steps, cfg.max_steps - k_chunk)
        noise = np.empty((wa, B, d))
        for j in range(wa):
            noise[j] = gens[j].standard_normal((B, d))
        if bridge:
            unif = np.empty((wa, B))
            for j in range(wa):
                unif[j] = ugens[j].random(B)
        hist = np.zeros((wa, B, m, d)) if QVf is not None else None

        active = np.ones(wa, dtype=bool)
        for s in range(B):
            u, G = step_eval(X)
            dB = noise[:, s, :] * sqrt_dt
            if zero_V:
                drift = u
            else:
                gV = spec.potential.gradient(X)
                drift = (u - gV) if u is not None else -gV
            Xn = X + sqrt2eps * dB if drift is None else X + drift * dt + sqrt2eps * dB

            amask = active.astype(float)
            wdt = dt * amask
            dBm = dB * amask[:, None]
            steps += active
            if kr_const is not None:
                Wrun += kr_const * wdt
            else:
                Wrun += spec.running_cost(X) * wdt
            if u is not None:
                M_u += np.einsum("kd,kd->k", u, dBm) * inv_s2e
                QV_u += np.einsum("kd,kd->k", u, u) * (wdt / (2.0 * spec.epsilon))
            if G is not None:
                M_p += np.einsum("kmd,kd->km", G, dBm) * inv_s2e
                if track_diag:
                    QVd += np.einsum("kmd,kmd->km", G, G) * (wdt / (2.0 * spec.epsilon))[:, None]
                if u is not None:
                    CV += np.einsum("kmd,kd->km", G, u) * (wdt / (2.0 * spec.epsilon))[:, None]
                if hist is not None:
                    hist[:, s] = G * amask[:, None, None]

            # exit detection on the step just taken
            if bridge:
                d0 = dom.face_distances(X)
                d1 = dom.face_distances(Xn)
                arg = np.minimum(-(d0 * d1) * inv_eps_dt, 50.0)
                P = np.minimum(np.exp(arg), 1.0)
                U = unif[:, s]
                face = np.full(wa, -1, dtype=np.int64)
                c = np.zeros(wa)
                for f in range(P.shape[1]):
                    c_new = c + (1.0 - c) * P[:, f]
                    hit = (face < 0) & (U < c_new)
                    face[hit] = f
                    c = c_new
                newly = (face >= 0) & active
            else:
                newly = ~np.asarray(dom.contains(Xn)) & active

            if newly.any():
                Xi, Xni = X[newly], Xn[newly]
                if bridge:
                    pts = dom.face_point(0.5 * (Xi + Xni), face[newly])
                    hard = np.atleast_1d(~np.asarray(dom.contains(Xni)))
                    if hard.any():
                        if cfg.exit_interpolation:
                            pts[hard] = dom.crossing_point(Xi[hard], Xni[hard])
                        else:
                            pts[hard] = np.atleast_2d(dom.project_boundary(Xni[hard]))
                elif cfg.exit_interpolation:
                    pts = dom.crossing_point(Xi, Xni)
                else:
                    pts = np.atleast_2d(dom.project_boundary(Xni))
                exit_pt[newly] = pts
                kt_at_exit[newly] = np.atleast_1d(spec.terminal_cost(pts))
                done_exited[newly] = True
                active &= ~newly

            X = np.where(active[:, None], Xn, X)
            if not active.any():
                break

        k_chunk += B

        if QVf is not None:
            # pairwise quadratic variation, flushed blockwise as G^T G sums
            if d > 1:
                QVf += np.einsum("kbid,kbjd->kij", hist, hist) * dt_2eps
            else:
                H = hist[:, :, :, 0]
                QVf += np.matmul(H.transpose(0, 2, 1), H) * dt_2eps

        finished = ~active if k_chunk < cfg.max_steps else np.ones(wa, dtype=bool)
        if finished.any():
            rr = rows[finished]
            out["tau"][rr] = steps[finished] * dt
            out["W"][rr] = Wrun[finished] + np.where(done_exited[finished],
                                                     kt_at_exit[finished], 0.0)
            out["M_u"][rr] = M_u[finished]
            out["QV_u"][rr] = QV_u[finished]
            out["n_steps"][rr] = steps[finished]
            out["exited"][rr] = done_exited[finished]
            out["exit_point"][rr] = exit_pt[finished]
            if m:
                out["M_probe"][rr] = M_p[finished]
                out["CV_u_probe"][rr] = CV[finished]
                if QVf is not None:
                    out["QV_probe"][rr] = QVf[finished]
                    out["QV_probe_diag"][rr] = np.diagonal(QVf[finished], axis1=1, axis2=2)
                else:
                    out["QV_probe_diag"][rr] = QVd[finished]
        keep = ~finished
        if not keep.all():
            X, rows, steps = X[keep], rows[keep], steps[keep]
            Wrun, kt_at_exit = Wrun[keep], kt_at_exit[keep]
            M_u, QV_u = M_u[keep], QV_u[keep]
            M_p, QVd, CV = M_p[keep], QVd[keep], CV[keep]
            if QVf is not None:
                QVf = QVf[keep]
            exit_pt, done_exited = exit_pt[keep], done_exited[keep]
            gens = [g for g, k in zip(gens, keep) if k]
            if bridge:
                ugens = [g for g, k in zip(ugens, keep) if k]


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

def _sample_raw(spec: ProblemSpec, control, probes, cfg: SimConfig, N: int,
                threads: int, want_full: bool, m: int) -> BatchStats:
    d = spec.dim
    out = {
        "tau": np.zeros(N), "W": np.zeros(N), "M_u": np.zeros(N),
        "QV_u": np.zeros(N), "M_probe": np.zeros((N, m)),
        "QV_probe_diag": np.zeros((N, m)), "CV_u_probe": np.zeros((N, m)),
        "QV_probe": np.zeros((N, m, m)) if want_full else None,
        "exit_point": np.full((N, d), np.nan), "n_steps": np.zeros(N, dtype=np.int64),
        "exited": np.zeros(N, dtype=bool),
    }
    chunks = [np.arange(lo, min(lo + _CHUNK, N)) for lo in range(0, N, _CHUNK)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_run_chunk, spec, control, probes, cfg, c, out, want_full)
                       for c in chunks]
            for f in futures:
                f.result()
    else:
        for c in chunks:
            _run_chunk(spec, control, probes, cfg, c, out, want_full)
    return BatchStats(
        seed_base=cfg.seed, indices=np.arange(N, dtype=np.int64),
        tau=out["tau"], W=out["W"], M_u=out["M_u"], QV_u=out["QV_u"],
        M_probe=out["M_probe"], QV_probe_diag=out["QV_probe_diag"],
        CV_u_probe=out["CV_u_probe"], QV_probe=out["QV_probe"],
        exit_point=out["exit_point"], n_steps=out["n_steps"], exited=out["exited"])


def sample_batch(spec: ProblemSpec, control, probes, cfg: SimConfig, N: int,
                 threads: int = 1, probe_qv: str = "full") -> BatchStats:
    """Simulate N independent trajectories and collect their accumulators.

    Trajectory i is driven by the counter-based stream keyed on
    (cfg.seed, i); the returned arrays are ordered by i and identical for
    any `threads` value. `probe_qv` selects whether the full pairwise
    quadratic-variation matrix is accumulated ("full") or only its diagonal
    ("diag", cheaper for many probes).

    Raises RuntimeError when no trajectory exits within max_steps.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if probe_qv not in ("full", "diag"):
        raise ValueError("probe_qv must be 'full' or 'diag'")
    if not spec.domain.contains(spec.start_point):
        raise ValueError("start point must be strictly interior")
    m, _ = _probe_stack(probes, spec.dim)
    batch = _sample_raw(spec, control, probes, cfg, N, threads,
                        probe_qv == "full" and m > 0, m)
    if batch.n_exited == 0:
        raise RuntimeError("no exits; increase max_steps")
    return batch


def simulate_trajectory(spec: ProblemSpec, control, probes, cfg: SimConfig) -> PathStats:
    """Single trajectory; equals row 0 of a batch with the same config.

    A trajectory that hits max_steps before exiting is returned with
    exited=False and no terminal cost in W; callers decide how to count it.
    """
    m, _ = _probe_stack(probes, spec.dim)
    return _sample_raw(spec, control, probes, cfg, 1, 1, m > 0, m).path(0)


def dump_trajectories(batch: BatchStats, fh) -> None:
    """Per-trajectory CSV dump with reproducible 17-significant-digit floats."""
    d = batch.exit_point.shape[1]
    cols = ["seed", "tau", "W", "M_u", "QV_u", "exited"] + [f"exit_{j + 1}" for j in range(d)]
    fh.write(",".join(cols) + "\n")
    seeds = batch.seeds
    for i in range(batch.n):
        vals = [str(int(seeds[i]))] + [f"{v:.17g}" for v in
                                       (batch.tau[i], batch.W[i], batch.M_u[i], batch.QV_u[i])]
        vals.append("1" if batch.exited[i] else "0")
        vals += [f"{v:.17g}" for v in batch.exit_point[i]]
        fh.write(",".join(vals) + "\n")
