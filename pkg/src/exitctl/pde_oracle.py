"""Finite-difference reference solutions in one and two dimensions.

Solves the linear Dirichlet problem for the exponential moment psi of the
stopped work functional,

    eps * Lap psi - grad V . grad psi - sigma * kappa_r * psi = 0   in Omega,
    psi = exp(-sigma * kappa_t)                                     on the boundary,

then transforms nodewise to the value function F = -log(psi)/sigma and to
the zero-variance feedback control u_opt = -2 eps sigma grad F. A generic
assembler also serves the exit-time exponential-moment problem and its
divergence threshold. Second-order central differences with a per-node
upwind fallback when the cell Peclet number |drift| h / (2 eps) exceeds 1;
the upwind scheme preserves the M-matrix structure and hence positivity.

Boxes and intervals are resolved exactly by grid-aligned boundary nodes;
balls (2D) use a staircase boundary with first-order accuracy near the rim.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import BasisSet, DomainSpec, ProblemSpec

Array = np.ndarray


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid covering the closed domain.

    Node classification: interior nodes are strictly inside the open domain
    and carry unknowns; boundary nodes are the remaining nodes adjacent to
    an interior node, and carry Dirichlet data evaluated at their projection
    onto the true boundary.
    """

    axes: tuple[Array, ...]
    interior: Array          # boolean, full tensor shape
    boundary: Array          # boolean, full tensor shape
    boundary_points: Array   # (n_boundary, d) projected Dirichlet locations

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(ax) for ax in self.axes)

    @property
    def h(self) -> float:
        return float(self.axes[0][1] - self.axes[0][0])

    @cached_property
    def points(self) -> Array:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, self.dim)

    def interpolate(self, field: Array, x: Array) -> Array:
        """Linear interpolation of a nodal field at arbitrary points."""
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        if self.dim == 1:
            out = np.interp(pts[:, 0], self.axes[0], field.reshape(-1))
        else:
            from scipy.interpolate import RegularGridInterpolator
            itp = RegularGridInterpolator(self.axes, field.reshape(self.shape),
                                          bounds_error=False, fill_value=None)
            out = itp(pts)
        return out if np.ndim(x) > 1 else float(out[0])


def make_grid(domain: DomainSpec, h: float) -> Grid:
    """Uniform grid with spacing ~h aligned to the bounding box."""
    if domain.dim > 2:
        raise OracleError("oracle supports d in {1, 2}")
    lo, hi = domain.bounding_box()
    axes = []
    for j in range(domain.dim):
        n = max(3, int(round((hi[j] - lo[j]) / h)) + 1)
        axes.append(np.linspace(lo[j], hi[j], n))
    g = np.meshgrid(*axes, indexing="ij")
    pts = np.stack(g, axis=-1).reshape(-1, domain.dim)
    shape = tuple(len(ax) for ax in axes)
    inside = np.asarray(domain.contains(pts)).reshape(shape)

    # boundary = non-interior nodes touching an interior node
    bnd = np.zeros(shape, dtype=bool)
    for ax in range(domain.dim):
        for shift in (-1, 1):
            rolled = np.roll(inside, shift, axis=ax)
            edge_slice = [slice(None)] * domain.dim
            edge_slice[ax] = 0 if shift == 1 else -1
            rolled[tuple(edge_slice)] = False
            bnd |= rolled & ~inside
    proj = np.asarray(domain.project_boundary(pts.reshape(-1, domain.dim)[bnd.reshape(-1)]))
    return Grid(axes=tuple(axes), interior=inside, boundary=bnd,
                boundary_points=np.atleast_2d(proj))


@dataclass
class PdeSolution:
    """Nodal psi > 0, value function F, its gradient, and the feedback
    control u_opt = -2 eps sigma grad F."""

    grid: Grid
    spec: ProblemSpec
    psi: Array            # full tensor shape
    F: Array
    gradF: Array          # shape + (d,)
    u_opt: Array          # shape + (d,)

    def psi_at(self, x) -> float | Array:
        return self.grid.interpolate(self.psi, x)

    def F_at(self, x) -> float | Array:
        return self.grid.interpolate(self.F, x)

    def u_opt_field(self):
        """Vector-field callable suitable as a sampler control."""
        grid, comps = self.grid, self.u_opt

        def field(x):
            pts = np.atleast_2d(np.asarray(x, dtype=float))
            out = np.empty_like(pts)
            for j in range(grid.dim):
                out[:, j] = grid.interpolate(comps[..., j], pts)
            return out if np.ndim(x) > 1 else out[0]

        return field


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def _assemble(spec: ProblemSpec, grid: Grid, drift_at, reaction_at,
              boundary_value_at, rhs_at=None):
    """Sparse system for eps*Lap v + drift . grad v + reaction * v = rhs with
    Dirichlet data; per-node upwinding of the advection when the cell Peclet
    number exceeds 1. Returns (A, b, peclet_max)."""
    shape = grid.shape
    d = grid.dim
    h = grid.h
    eps = spec.epsilon
    interior = grid.interior.reshape(-1)
    boundary = grid.boundary.reshape(-1)
    n_nodes = interior.size
    idx_of = -np.ones(n_nodes, dtype=np.int64)
    int_ids = np.flatnonzero(interior)
    idx_of[int_ids] = np.arange(int_ids.size)

    pts = grid.points[int_ids]
    b_drift = np.atleast_2d(drift_at(pts))
    react = np.asarray(reaction_at(pts), dtype=float).reshape(-1)
    rhs = np.zeros(int_ids.size) if rhs_at is None else np.asarray(rhs_at(pts), float).reshape(-1)

    bvals = np.zeros(n_nodes)
    bids = np.flatnonzero(boundary)
    bvals[bids] = boundary_value_at(grid.boundary_points)

    peclet = np.abs(b_drift) * h / (2.0 * eps)
    pmax = float(peclet.max()) if peclet.size else 0.0

    strides = np.array([int(np.prod(shape[ax + 1:], dtype=int)) for ax in range(d)])

    rows, cols, data = [], [], []
    bvec = rhs.copy()
    diag = np.zeros(int_ids.size)
    for ax in range(d):
        bd = b_drift[:, ax]
        up = peclet[:, ax] > 1.0
        # central coefficients, switched to first-order upwind where marked
        c_lo = eps / h ** 2 - bd / (2.0 * h)
        c_hi = eps / h ** 2 + bd / (2.0 * h)
        c_di = -2.0 * eps / h ** 2
        c_lo = np.where(up, eps / h ** 2 + np.maximum(bd, 0.0) / h, c_lo)
        c_hi = np.where(up, eps / h ** 2 + np.maximum(-bd, 0.0) / h, c_hi)
        c_di = np.where(up, -2.0 * eps / h ** 2 - np.abs(bd) / h, c_di)
        diag += c_di
        for sign, coef in ((-1, c_lo), (1, c_hi)):
            nb = int_ids + sign * strides[ax]
            nb_interior = interior[nb]
            k = idx_of[nb[nb_interior]]
            rows.append(np.arange(int_ids.size)[nb_interior])
            cols.append(k)
            data.append(coef[nb_interior])
            nb_bnd = ~nb_interior
            bvec[nb_bnd] -= coef[nb_bnd] * bvals[nb[nb_bnd]]
    diag += react
    rows.append(np.arange(int_ids.size))
    cols.append(np.arange(int_ids.size))
    data.append(diag)

    A = sp.csc_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(int_ids.size, int_ids.size))
    return A, bvec, pmax, int_ids, bvals


def _central_gradient(grid: Grid, field: Array) -> Array:
    """Central differences in the interior, one-sided at the array edges."""
    f = field.reshape(grid.shape)
    out = np.stack([np.gradient(f, ax, axis=k) for k, ax in enumerate(grid.axes)], axis=-1)
    return out


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def solve_feynman_kac(spec: ProblemSpec, grid: Grid) -> PdeSolution:
    """Exact-reference solve of the exponential-moment boundary value problem."""
    if grid.dim != spec.dim:
        raise OracleError("grid/problem dimension mismatch")
    sigma = spec.sigma

    def drift_at(pts):
        return -spec.potential.gradient(pts)

    def reaction_at(pts):
        return -sigma * np.asarray(spec.running_cost(pts), dtype=float)

    def boundary_value_at(pts):
        return np.exp(-sigma * np.asarray(spec.terminal_cost(pts), dtype=float))

    A, b, pmax, int_ids, bvals = _assemble(spec, grid, drift_at, reaction_at,
                                           boundary_value_at)
    if pmax > 1.0:
        warnings.warn(f"cell Peclet number {pmax:.3g} > 1; upwinding engaged",
                      RuntimeWarning, stacklevel=2)
    try:
        v = spla.spsolve(A, b)
    except Exception as e:  # singular system signals a grid/coefficient bug
        raise OracleError(f"linear solve failed: {e}") from e
    if not np.all(np.isfinite(v)):
        raise OracleError("linear solve produced non-finite values")

    psi_flat = np.full(int_ids.size + 0, np.nan)
    full = np.full(int(np.prod(grid.shape)), np.nan)
    full[int_ids] = v
    full[grid.boundary.reshape(-1)] = bvals[grid.boundary.reshape(-1)]
    psi = full.reshape(grid.shape)
    # outside-domain nodes (ball in a box): fill with boundary data so the
    # nodewise transform stays finite; they carry no information
    nanmask = ~np.isfinite(psi)
    if nanmask.any():
        psi = np.where(nanmask, np.nanmean(bvals[grid.boundary.reshape(-1)]), psi)
    if np.any(psi[grid.interior] <= 0):
        raise OracleError("psi lost positivity; check running cost sign or grid")

    F = -np.log(psi) / sigma
    gradF = _central_gradient(grid, F)
    u_opt = -2.0 * spec.epsilon * sigma * gradF
    return PdeSolution(grid=grid, spec=spec, psi=psi, F=F, gradF=gradF, u_opt=u_opt)


def hjb_residual(sol: PdeSolution, spec: ProblemSpec) -> tuple[Array, float]:
    """Nodal residual of eps*Lap F - grad V . grad F - eps sigma |grad F|^2 + kappa_r
    on interior nodes (central differences); returns (field, max-norm).

    Interior nodes adjacent to the boundary are excluded from the max-norm:
    the nodewise log transform is only first-order accurate there.
    """
    grid = sol.grid
    h = grid.h
    F = sol.F
    eps, sigma = spec.epsilon, spec.sigma
    lap = np.zeros_like(F)
    for ax in range(grid.dim):
        lap += (np.roll(F, -1, axis=ax) - 2 * F + np.roll(F, 1, axis=ax)) / h ** 2
    gradF = _central_gradient(grid, F)
    pts = grid.points
    gV = np.asarray(spec.potential.gradient(pts)).reshape(F.shape + (grid.dim,))
    kr = np.asarray(spec.running_cost(pts), dtype=float).reshape(F.shape)
    res = eps * lap - np.einsum("...d,...d->...", gV, gradF) \
        - eps * sigma * np.einsum("...d,...d->...", gradF, gradF) + kr

    deep = grid.interior.copy()
    for ax in range(grid.dim):
        deep &= np.roll(grid.interior, 1, axis=ax) & np.roll(grid.interior, -1, axis=ax)
    res = np.where(deep, res, 0.0)
    return res, float(np.max(np.abs(res)))


@dataclass(frozen=True)
class ExitMgfResult:
    values: Array | None   # nodal field when solvable with positive values
    diverged: bool
    rate: float


def exit_mgf(spec: ProblemSpec, u, rate: float, grid: Grid) -> ExitMgfResult:
    """Exponential moment of the exit time at the given rate, as a nodal field.

    Solves eps*Lap v + (u - grad V) . grad v + rate * v = 0 with v = 1 on the
    boundary. Returns diverged=True when the discrete system is unsolvable
    or loses positivity, i.e. the rate sits beyond the divergence threshold.
    """

    def drift_at(pts):
        base = -spec.potential.gradient(pts)
        if u is not None:
            base = base + np.atleast_2d(u(pts))
        return base

    A, b, _, int_ids, bvals = _assemble(
        spec, grid, drift_at, lambda pts: np.full(pts.shape[0], rate),
        lambda pts: np.ones(pts.shape[0]))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        try:
            v = spla.spsolve(A, b)
        except Exception:
            return ExitMgfResult(values=None, diverged=True, rate=rate)
    if not np.all(np.isfinite(v)) or np.any(v <= 0):
        return ExitMgfResult(values=None, diverged=True, rate=rate)
    full = np.full(int(np.prod(grid.shape)), np.nan)
    full[int_ids] = v
    full[grid.boundary.reshape(-1)] = 1.0
    out = full.reshape(grid.shape)
    out = np.where(np.isfinite(out), out, 1.0)
    return ExitMgfResult(values=out, diverged=False, rate=rate)


def exit_mgf_threshold(spec: ProblemSpec, u, grid: Grid, rel_tol: float = 1e-3) -> float:
    """Divergence threshold of the exit-time exponential moment, located by
    bisection on solvability-plus-positivity."""
    lo = 0.0
    hi = max(spec.epsilon, 1.0)
    for _ in range(60):
        if exit_mgf(spec, u, hi, grid).diverged:
            break
        lo, hi = hi, 2.0 * hi
    else:
        raise OracleError("no divergence found; domain may be unbounded")
    while hi - lo > rel_tol * max(hi, 1e-12):
        mid = 0.5 * (lo + hi)
        if exit_mgf(spec, u, mid, grid).diverged:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def mean_exit_time_field(spec: ProblemSpec, u, grid: Grid) -> Array:
    """Expected exit time as a nodal field (Poisson problem with unit source);
    a planning/diagnostic helper for choosing step counts."""

    def drift_at(pts):
        base = -spec.potential.gradient(pts)
        if u is not None:
            base = base + np.atleast_2d(u(pts))
        return base

    A, b, _, int_ids, _ = _assemble(
        spec, grid, drift_at, lambda pts: np.zeros(pts.shape[0]),
        lambda pts: np.zeros(pts.shape[0]), rhs_at=lambda pts: -np.ones(pts.shape[0]))
    v = spla.spsolve(A, b)
    full = np.zeros(int(np.prod(grid.shape)))
    full[int_ids] = v
    return full.reshape(grid.shape)


def project_control(sol: PdeSolution, basis: BasisSet) -> tuple[Array, float]:
    """Least-squares fit of u_opt by the basis gradient span in the
    grid-weighted L2 inner product; returns (coefficients, residual norm)."""
    grid = sol.grid
    mask = (grid.interior | grid.boundary).reshape(-1)
    pts = grid.points[mask]
    w = grid.h ** grid.dim
    G = basis.gradients(pts)                      # (k, n, d)
    target = sol.u_opt.reshape(-1, grid.dim)[mask]
    design = G.transpose(0, 2, 1).reshape(-1, basis.n)  # rows = node x component
    y = target.reshape(-1)
    sol_ls, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < basis.n:
        gram = design.T @ design
        _, vecs = np.linalg.eigh(gram)
        dependent = np.argsort(np.abs(vecs[:, 0]))[::-1][:2]
        raise OracleError(f"basis gradients are numerically dependent "
                          f"(rank {rank} < {basis.n}); entries {sorted(dependent.tolist())} implicated")
    resid = y - design @ sol_ls
    return sol_ls, float(math.sqrt(w * np.sum(resid ** 2)))


def poincare_error_report(sol: PdeSolution, F_approx: Array, p: float = 2.0) -> tuple[float, float]:
    """Mean-centred L^p norm of F - F_approx and the L^p norm of its gradient,
    by grid quadrature over the closed domain. The two should co-decay as the
    approximation space is refined."""
    if p < 1:
        raise ValueError("p must be >= 1")
    grid = sol.grid
    F_approx = np.asarray(F_approx, dtype=float).reshape(grid.shape)
    if F_approx.shape != sol.F.shape:
        raise ValueError("grid mismatch")
    mask = grid.interior | grid.boundary
    w = grid.h ** grid.dim
    err = sol.F - F_approx
    centred = err - err[mask].mean()
    lhs = float((w * np.sum(np.abs(centred[mask]) ** p)) ** (1.0 / p))
    gerr = _central_gradient(grid, err)
    gnorm = np.linalg.norm(gerr, axis=-1)
    rhs = float((w * np.sum(gnorm[mask] ** p)) ** (1.0 / p))
    return lhs, rhs


def dump_solution(sol: PdeSolution, fh) -> None:
    """Nodal CSV dump: coordinates, psi, F, gradient of F, feedback control."""
    d = sol.grid.dim
    cols = [f"x_{j + 1}" for j in range(d)] + ["psi", "F"] \
        + [f"gradF_{j + 1}" for j in range(d)] + [f"u_opt_{j + 1}" for j in range(d)]
    fh.write(",".join(cols) + "\n")
    pts = sol.grid.points
    psi = sol.psi.reshape(-1)
    F = sol.F.reshape(-1)
    gF = sol.gradF.reshape(-1, d)
    uo = sol.u_opt.reshape(-1, d)
    for i in range(pts.shape[0]):
        vals = [f"{v:.17g}" for v in pts[i]] + [f"{psi[i]:.17g}", f"{F[i]:.17g}"]
        vals += [f"{v:.17g}" for v in gF[i]] + [f"{v:.17g}" for v in uo[i]]
        fh.write(",".join(vals) + "\n")
