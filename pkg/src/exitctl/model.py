"""Problem instances: potential, domain geometry, costs, and control bases.

Everything here is immutable after construction and safe to share across
workers. Points are float64 arrays of shape (d,); batched evaluations take
(k, d) arrays and return (k,) or (k, d).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Mapping, Sequence

import numpy as np

Array = np.ndarray

_GRAM_COND_LIMIT = 1e8
_SUPPORT_CUTOFF = 1e-12  # numerical support of a Gaussian bump


def _as_points(x, dim: int) -> Array:
    """Coerce a point or a batch of points to shape (k, dim)."""
    a = np.asarray(x, dtype=float)
    if a.ndim == 1:
        if a.shape[0] != dim:
            raise ValueError(f"point has dimension {a.shape[0]}, expected {dim}")
        return a.reshape(1, dim)
    if a.ndim == 2 and a.shape[1] == dim:
        return a
    raise ValueError(f"expected point(s) of dimension {dim}, got shape {a.shape}")


# ---------------------------------------------------------------------------
# scalar fields (costs)
# ---------------------------------------------------------------------------

class ScalarField:
    """Scalar function on the closed domain, vectorised over point batches.

    `constant` is set when the field is known constant; samplers use it to
    skip per-step evaluation.
    """

    def __init__(self, fn: Callable[[Array], Array], constant: float | None = None,
                 description: str = ""):
        self._fn = fn
        self.constant = constant
        self.description = description

    def __call__(self, x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = x.reshape(1, -1) if single else x
        if self.constant is not None:
            out = np.full(pts.shape[0], self.constant)
        else:
            out = np.asarray(self._fn(pts), dtype=float).reshape(pts.shape[0])
        return float(out[0]) if single else out

    def __repr__(self):
        return f"ScalarField({self.description or ('const=%g' % self.constant if self.constant is not None else 'callable')})"


def constant_field(value: float, description: str = "") -> ScalarField:
    return ScalarField(lambda p: np.full(p.shape[0], float(value)),
                       constant=float(value),
                       description=description or f"constant {value:g}")


def expression_field(expr: str, dim: int) -> ScalarField:
    """Field from a numpy expression in coordinates x1..xd (alias x, y in 1D/2D)."""
    code = compile(expr, "<cost expression>", "eval")

    def fn(pts: Array) -> Array:
        names = {"np": np, "pi": math.pi}
        for j in range(dim):
            names[f"x{j + 1}"] = pts[:, j]
        names["x"] = pts[:, 0]
        if dim >= 2:
            names["y"] = pts[:, 1]
        out = eval(code, {"__builtins__": {}}, names)
        return np.broadcast_to(np.asarray(out, dtype=float), (pts.shape[0],)).copy()

    return ScalarField(fn, description=f"expr: {expr}")


# ---------------------------------------------------------------------------
# potentials
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PotentialSpec:
    """Energy landscape with an evaluable gradient.

    kinds:
      zero              V = 0
      quadratic         V = 0.5 * curvature * |x - center|^2
      double-well-1d    V = height * (x^2 - minima^2)^2   (d = 1 only)
      grid-interpolated V, dV from tabulated values (see `potential_from_csv`)
    """

    kind: str
    dim: int
    parameters: Mapping[str, object] = field(default_factory=dict)
    growth_constants: tuple[float, float] | None = None  # declared (K0, K1)

    def __post_init__(self):
        if self.kind not in ("zero", "quadratic", "double-well-1d", "grid-interpolated"):
            raise ValueError(f"unknown potential kind {self.kind!r}")
        if self.kind == "double-well-1d" and self.dim != 1:
            raise ValueError("double-well-1d potential requires dimension 1")

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero"

    @cached_property
    def _quad(self):
        c = np.asarray(self.parameters.get("center", np.zeros(self.dim)), dtype=float)
        k = float(self.parameters.get("curvature", 1.0))
        return c, k

    @cached_property
    def _dw(self):
        return (float(self.parameters.get("height", 1.0)),
                float(self.parameters.get("minima", 1.0)))

    @cached_property
    def _interp(self):
        pts = np.asarray(self.parameters["points"], dtype=float)
        vals = np.asarray(self.parameters["values"], dtype=float)
        grads = np.asarray(self.parameters["gradients"], dtype=float)
        if self.dim == 1:
            order = np.argsort(pts[:, 0])
            return pts[order, 0], vals[order], grads[order, :]
        from scipy.interpolate import RegularGridInterpolator

        xs = np.unique(pts[:, 0])
        ys = np.unique(pts[:, 1])
        if xs.size * ys.size != pts.shape[0]:
            raise ValueError("grid-interpolated potential needs a full tensor grid")
        order = np.lexsort((pts[:, 1], pts[:, 0]))
        shape = (xs.size, ys.size)
        v = vals[order].reshape(shape)
        g = grads[order].reshape(shape + (self.dim,))
        mode = dict(bounds_error=False, fill_value=None)  # extrapolate at box edge
        return (RegularGridInterpolator((xs, ys), v, **mode),
                RegularGridInterpolator((xs, ys), g, **mode))

    def value(self, x) -> Array:
        pts = _as_points(x, self.dim)
        if self.kind == "zero":
            out = np.zeros(pts.shape[0])
        elif self.kind == "quadratic":
            c, k = self._quad
            out = 0.5 * k * np.sum((pts - c) ** 2, axis=1)
        elif self.kind == "double-well-1d":
            h, m = self._dw
            out = h * (pts[:, 0] ** 2 - m ** 2) ** 2
        else:
            if self.dim == 1:
                xs, vs, _ = self._interp
                out = np.interp(pts[:, 0], xs, vs)
            else:
                out = self._interp[0](pts)
        return out if np.ndim(x) > 1 else float(out[0])

    def gradient(self, x) -> Array:
        pts = _as_points(x, self.dim)
        if self.kind == "zero":
            out = np.zeros_like(pts)
        elif self.kind == "quadratic":
            c, k = self._quad
            out = k * (pts - c)
        elif self.kind == "double-well-1d":
            h, m = self._dw
            out = (4.0 * h * pts[:, 0] * (pts[:, 0] ** 2 - m ** 2)).reshape(-1, 1)
        else:
            if self.dim == 1:
                xs, _, gs = self._interp
                out = np.interp(pts[:, 0], xs, gs[:, 0]).reshape(-1, 1)
            else:
                out = self._interp[1](pts)
        return out if np.ndim(x) > 1 else out[0]


def potential_from_csv(path, dim: int, growth_constants=None) -> PotentialSpec:
    """Load a grid-interpolated potential (columns x_1..x_d, V, dV_1..dV_d)."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header = [h.strip() for h in rows[0]]
    expected = [f"x_{j + 1}" for j in range(dim)] + ["V"] + [f"dV_{j + 1}" for j in range(dim)]
    if header != expected:
        raise ValueError(f"potential CSV header {header} != expected {expected}")
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    return PotentialSpec(
        kind="grid-interpolated", dim=dim,
        parameters={"points": data[:, :dim], "values": data[:, dim],
                    "gradients": data[:, dim + 1:]},
        growth_constants=growth_constants)


# ---------------------------------------------------------------------------
# domains
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DomainSpec:
    """Bounded open domain: interval, axis-aligned box, or ball.

    A "face" below is one boundary piece: interval and box have two per
    axis, the ball has one. Face distances feed the exit detectors.
    """

    shape: str  # interval | box | ball
    lower: tuple[float, ...] | None = None
    upper: tuple[float, ...] | None = None
    center: tuple[float, ...] | None = None
    radius: float | None = None
    boundary_tol: float = 1e-9

    def __post_init__(self):
        if self.shape in ("interval", "box"):
            lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
            if lo.shape != hi.shape or not np.all(hi > lo):
                raise ValueError("box/interval needs lower < upper componentwise")
            if self.shape == "interval" and lo.size != 1:
                raise ValueError("interval is one-dimensional")
        elif self.shape == "ball":
            if self.radius is None or self.radius <= 0 or self.center is None:
                raise ValueError("ball needs a center and a positive radius")
        else:
            raise ValueError(f"unknown domain shape {self.shape!r}")
        if self.boundary_tol <= 0:
            raise ValueError("boundary_tol must be positive")

    @property
    def dim(self) -> int:
        if self.shape == "ball":
            return len(self.center)
        return len(self.lower)

    @cached_property
    def _lo(self):
        return np.asarray(self.lower, float)

    @cached_property
    def _hi(self):
        return np.asarray(self.upper, float)

    @cached_property
    def _c(self):
        return np.asarray(self.center, float)

    def bounding_box(self) -> tuple[Array, Array]:
        if self.shape == "ball":
            return self._c - self.radius, self._c + self.radius
        return self._lo.copy(), self._hi.copy()

    @property
    def n_faces(self) -> int:
        return 1 if self.shape == "ball" else 2 * self.dim

    def contains(self, x) -> Array:
        """Strict interior membership (the domain is open)."""
        pts = _as_points(x, self.dim)
        if self.shape == "ball":
            inside = np.sum((pts - self._c) ** 2, axis=1) < self.radius ** 2
        else:
            inside = np.all((pts > self._lo) & (pts < self._hi), axis=1)
        return inside if np.ndim(x) > 1 else bool(inside[0])

    def face_distances(self, pts: Array) -> Array:
        """Signed distances (k, n_faces) to each boundary piece; positive inside.

        Box faces are ordered (lo_0, hi_0, lo_1, hi_1, ...).
        """
        if self.shape == "ball":
            return (self.radius - np.linalg.norm(pts - self._c, axis=1)).reshape(-1, 1)
        out = np.empty((pts.shape[0], 2 * self.dim))
        out[:, 0::2] = pts - self._lo
        out[:, 1::2] = self._hi - pts
        return out

    def face_point(self, pts: Array, face: Array) -> Array:
        """Nearest point on the given face index for each row of pts."""
        out = np.clip(pts, *self.bounding_box()) if self.shape != "ball" else pts.copy()
        if self.shape == "ball":
            rel = pts - self._c
            norm = np.linalg.norm(rel, axis=1, keepdims=True)
            norm[norm == 0] = 1.0
            return self._c + rel * (self.radius / norm)
        axis, side = face // 2, face % 2
        vals = np.where(side == 0, self._lo[axis], self._hi[axis])
        out[np.arange(pts.shape[0]), axis] = vals
        return out

    def project_boundary(self, x) -> Array:
        """Nearest boundary point; intended for points outside or near the boundary."""
        pts = _as_points(x, self.dim)
        if self.shape == "ball":
            out = self.face_point(pts, np.zeros(pts.shape[0], int))
        else:
            clipped = np.clip(pts, self._lo, self._hi)
            inside = self.contains(clipped) if clipped.ndim > 1 else None
            out = clipped.copy()
            # interior points: push the coordinate closest to a face onto it
            d = self.face_distances(clipped)
            strict = np.all((clipped > self._lo) & (clipped < self._hi), axis=1)
            if np.any(strict):
                f = np.argmin(d[strict], axis=1)
                out[strict] = self.face_point(clipped[strict], f)
        return out if np.ndim(x) > 1 else out[0]

    def crossing_point(self, x_in: Array, x_out: Array) -> Array:
        """Intersection of the segment [x_in, x_out] with the boundary.

        x_in must be inside and x_out outside; returns the first crossing.
        """
        a = np.atleast_2d(np.asarray(x_in, float))
        b = np.atleast_2d(np.asarray(x_out, float))
        if self.shape == "ball":
            # solve |a + t(b-a) - c|^2 = r^2 for t in (0, 1]
            u = b - a
            w = a - self._c
            A = np.sum(u * u, axis=1)
            B = 2 * np.sum(u * w, axis=1)
            C = np.sum(w * w, axis=1) - self.radius ** 2
            disc = np.maximum(B * B - 4 * A * C, 0.0)
            t = (-B + np.sqrt(disc)) / (2 * np.where(A == 0, 1.0, A))
        else:
            # earliest face crossing over all axes
            t = np.full(a.shape[0], np.inf)
            for j in range(self.dim):
                dj = b[:, j] - a[:, j]
                with np.errstate(divide="ignore", invalid="ignore"):
                    t_lo = (self._lo[j] - a[:, j]) / dj
                    t_hi = (self._hi[j] - a[:, j]) / dj
                for tc in (t_lo, t_hi):
                    ok = np.isfinite(tc) & (tc > 0) & (tc <= 1 + 1e-12)
                    t = np.where(ok & (tc < t), tc, t)
            t = np.where(np.isfinite(t), t, 1.0)
        pt = a + np.clip(t, 0.0, 1.0)[:, None] * (b - a)
        return pt if np.ndim(x_in) > 1 else pt[0]


def interval(a: float, b: float, boundary_tol: float = 1e-9) -> DomainSpec:
    return DomainSpec("interval", lower=(float(a),), upper=(float(b),),
                      boundary_tol=boundary_tol)


def box(lower: Sequence[float], upper: Sequence[float], boundary_tol: float = 1e-9) -> DomainSpec:
    return DomainSpec("box", lower=tuple(map(float, lower)),
                      upper=tuple(map(float, upper)), boundary_tol=boundary_tol)


def ball(center: Sequence[float], radius: float, boundary_tol: float = 1e-9) -> DomainSpec:
    return DomainSpec("ball", center=tuple(map(float, center)), radius=float(radius),
                      boundary_tol=boundary_tol)


# ---------------------------------------------------------------------------
# control bases
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BasisSet:
    """Finite family of scalar functions b_i with gradients and supports.

    The spanned control family is u^a(x) = sum_i a_i * grad b_i(x). Concrete
    families are built by `gaussian_bumps`, `disjoint_bumps`, `bspline_basis`,
    or `custom_basis`.
    """

    kind: str
    dim: int
    n: int
    params: Mapping[str, object] = field(default_factory=dict)

    # -- evaluation ---------------------------------------------------------

    def values(self, x) -> Array:
        """(k, n) matrix of basis values."""
        pts = _as_points(x, self.dim)
        if self.kind == "gaussian":
            return self._gaussian(pts)[0]
        if self.kind == "disjoint-bump":
            return self._bump(pts)[0]
        if self.kind == "bspline":
            return self._bspline(pts, 0)
        vals = np.empty((pts.shape[0], self.n))
        for i, (v, _, _) in enumerate(self.params["entries"]):
            vals[:, i] = np.asarray(v(pts), dtype=float).reshape(-1)
        return vals

    def gradients(self, x) -> Array:
        """(k, n, dim) stack of basis gradients."""
        pts = _as_points(x, self.dim)
        if self.kind == "gaussian":
            return self._gaussian(pts)[1]
        if self.kind == "disjoint-bump":
            return self._bump(pts)[1]
        if self.kind == "bspline":
            return self._bspline(pts, 1).reshape(pts.shape[0], self.n, 1)
        out = np.empty((pts.shape[0], self.n, self.dim))
        for i, (_, g, _) in enumerate(self.params["entries"]):
            out[:, i, :] = np.asarray(g(pts), dtype=float).reshape(-1, self.dim)
        return out

    def _gaussian(self, pts: Array):
        c = self.params["centers"]          # (n, d)
        w2 = self.params["width"] ** 2
        diff = pts[:, None, :] - c[None, :, :]          # (k, n, d)
        vals = np.exp(-0.5 * np.sum(diff * diff, axis=2) / w2)
        grads = -(diff / w2) * vals[:, :, None]
        return vals, grads

    def _bump(self, pts: Array):
        # quartic bump (1 - r^2/h^2)^2 on disjoint cells, C^1 across edges
        c = self.params["centers"]
        h2 = self.params["half_width"] ** 2
        diff = pts[:, None, :] - c[None, :, :]
        r2 = np.sum(diff * diff, axis=2)
        inside = r2 < h2
        q = np.where(inside, 1.0 - r2 / h2, 0.0)
        vals = q * q
        grads = (-4.0 / h2) * q[:, :, None] * diff * inside[:, :, None]
        return vals, grads

    def _bspline(self, pts: Array, deriv: int):
        from scipy.interpolate import BSpline

        knots = self.params["knots"]
        out = np.empty((pts.shape[0], self.n))
        x = np.clip(pts[:, 0], knots[0], knots[-1])
        for i in range(self.n):
            coeffs = np.zeros(self.n)
            coeffs[i] = 1.0
            sp = BSpline(knots, coeffs, 3, extrapolate=False)
            if deriv:
                sp = sp.derivative()
            out[:, i] = np.nan_to_num(sp(x))
        return out

    # -- supports -----------------------------------------------------------

    def support_radius(self, i: int) -> float:
        """Radius of the (numerically truncated) support around its center."""
        if self.kind == "gaussian":
            w = self.params["width"]
            return w * math.sqrt(-2.0 * math.log(_SUPPORT_CUTOFF))
        if self.kind == "disjoint-bump":
            return self.params["half_width"]
        if self.kind == "bspline":
            knots = self.params["knots"]
            return 2.0 * (knots[4] - knots[3])  # cubic: support spans 4 intervals
        return self.params["entries"][i][2]

    def support_center(self, i: int) -> Array:
        if self.kind in ("gaussian", "disjoint-bump"):
            return self.params["centers"][i]
        if self.kind == "bspline":
            knots = self.params["knots"]
            return np.array([0.5 * (knots[i] + knots[i + 4])])
        v = self.params["entries"][i]
        return np.asarray(v[3]) if len(v) > 3 else np.zeros(self.dim)

    def in_support(self, x, i: int) -> Array:
        pts = _as_points(x, self.dim)
        r = np.linalg.norm(pts - self.support_center(i), axis=1)
        return r <= self.support_radius(i)

    def disjoint_supports(self) -> bool:
        """True when closed supports overlap at most along their boundaries."""
        for i in range(self.n):
            for j in range(i + 1, self.n):
                gap = np.linalg.norm(self.support_center(i) - self.support_center(j))
                if gap < self.support_radius(i) + self.support_radius(j) - 1e-12:
                    return False
        return True


def gaussian_bumps(domain: DomainSpec, n: int, width: float | None = None) -> BasisSet:
    """n Gaussian bumps with centers on a regular grid over the bounding box."""
    lo, hi = domain.bounding_box()
    d = domain.dim
    if d == 1:
        centers = np.linspace(lo[0], hi[0], n + 2)[1:-1].reshape(-1, 1)
        spacing = (hi[0] - lo[0]) / (n + 1)
    else:
        per_axis = int(round(n ** (1.0 / d)))
        if per_axis ** d != n:
            raise ValueError(f"n={n} is not a {d}-dimensional grid size")
        axes = [np.linspace(lo[j], hi[j], per_axis + 2)[1:-1] for j in range(d)]
        centers = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        spacing = min((hi[j] - lo[j]) / (per_axis + 1) for j in range(d))
    if width is None:
        width = 0.75 * spacing
    return BasisSet("gaussian", d, int(centers.shape[0]),
                    {"centers": centers, "width": float(width)})


def disjoint_bumps(domain: DomainSpec, n: int) -> BasisSet:
    """Compactly supported quartic bumps on n disjoint cells tiling an interval."""
    if domain.dim != 1:
        raise ValueError("disjoint bumps are implemented for intervals")
    lo, hi = domain.bounding_box()
    edges = np.linspace(lo[0], hi[0], n + 1)
    centers = 0.5 * (edges[:-1] + edges[1:]).reshape(-1, 1)
    return BasisSet("disjoint-bump", 1, n,
                    {"centers": centers, "half_width": float(0.5 * (edges[1] - edges[0]))})


def bspline_basis(domain: DomainSpec, n: int) -> BasisSet:
    """Cubic B-spline basis on a uniform knot grid over an interval."""
    if domain.dim != 1:
        raise ValueError("B-spline basis is one-dimensional")
    lo, hi = domain.bounding_box()
    inner = np.linspace(lo[0], hi[0], n - 2)
    knots = np.concatenate([[lo[0]] * 3, inner, [hi[0]] * 3])
    return BasisSet("bspline", 1, n, {"knots": knots})


def custom_basis(entries: Sequence[tuple], dim: int) -> BasisSet:
    """Basis from explicit (value_fn, grad_fn, support_radius[, center]) tuples."""
    return BasisSet("custom", dim, len(entries), {"entries": list(entries)})


def control_field(basis: BasisSet, a, x) -> Array:
    """Evaluate u^a(x) = sum_i a_i grad b_i(x); exactly linear in a."""
    a = np.asarray(a, dtype=float)
    if a.shape != (basis.n,):
        raise ValueError(f"coefficient vector has length {a.shape}, basis has n={basis.n}")
    g = basis.gradients(x)  # (k, n, d)
    out = np.einsum("knd,n->kd", g, a)
    return out if np.ndim(x) > 1 else out[0]


class BasisControl:
    """Callable feedback control u^a built on a basis; recognised by the sampler
    so basis gradients are evaluated once per step and shared with probes."""

    def __init__(self, basis: BasisSet, a):
        self.basis = basis
        self.a = np.asarray(a, dtype=float)
        if self.a.shape != (basis.n,):
            raise ValueError(f"coefficient vector has length {self.a.shape}, basis has n={basis.n}")

    def __call__(self, x):
        return control_field(self.basis, self.a, x)


# ---------------------------------------------------------------------------
# the problem instance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProblemSpec:
    """Full problem instance: dynamics, geometry, costs, and the estimation point.

    `sigma` is the tilt of the exponential average, `epsilon` the temperature,
    `start` the (strictly interior) initial point of every trajectory.
    """

    dim: int
    epsilon: float
    sigma: float
    potential: PotentialSpec
    domain: DomainSpec
    running_cost: ScalarField
    terminal_cost: ScalarField
    start: tuple[float, ...]

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dimension must be >= 1")
        if self.epsilon <= 0 or self.sigma <= 0:
            raise ValueError("epsilon and sigma must be positive")
        if self.domain.dim != self.dim or self.potential.dim != self.dim:
            raise ValueError("domain/potential dimension mismatch")
        if len(self.start) != self.dim:
            raise ValueError("start point dimension mismatch")

    @property
    def start_point(self) -> Array:
        return np.asarray(self.start, dtype=float)

    def drift(self, pts: Array, u: Array | None) -> Array:
        """Drift field u - grad V at a batch of points."""
        g = -self.potential.gradient(pts) if not self.potential.is_zero else None
        if u is None:
            return g if g is not None else np.zeros_like(pts)
        return u + g if g is not None else u


def eval_costs(spec: ProblemSpec, x, at_boundary: bool) -> float:
    """Running cost at an interior point, or terminal cost at a boundary point."""
    pt = np.asarray(x, dtype=float)
    lo, hi = spec.domain.bounding_box()
    pad = 10 * spec.domain.boundary_tol
    if np.any(pt < lo - pad) or np.any(pt > hi + pad):
        raise ValueError(f"point {pt} outside the bounding box")
    f = spec.terminal_cost if at_boundary else spec.running_cost
    return float(f(pt))


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    location: tuple[float, ...] | None = None


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[CheckResult, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def __str__(self):
        lines = [f"[{'ok' if c.passed else 'FAIL'}] {c.name}"
                 + (f": {c.detail}" if c.detail else "")
                 + (f" at {tuple(round(v, 6) for v in c.location)}" if c.location else "")
                 for c in self.checks]
        return "\n".join(lines)


def _validation_grid(domain: DomainSpec, target: int = 256) -> Array:
    lo, hi = domain.bounding_box()
    d = domain.dim
    per_axis = max(4, int(round(target ** (1.0 / d))))
    axes = [np.linspace(lo[j], hi[j], per_axis) for j in range(d)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    return pts


def validate_problem(spec: ProblemSpec, basis: BasisSet | None = None) -> ValidationReport:
    """Check every declared invariant on a deterministic sampling grid.

    Each check reports pass/fail and, on failure, an offending sample point.
    """
    checks: list[CheckResult] = []
    pts = _validation_grid(spec.domain)
    closure = pts[np.asarray(spec.domain.contains(pts)) | (np.min(
        spec.domain.face_distances(pts), axis=1) >= -1e-9)]
    if closure.size == 0:
        closure = pts

    checks.append(CheckResult("positive parameters",
                              spec.epsilon > 0 and spec.sigma > 0 and spec.dim >= 1))

    lo, hi = spec.domain.bounding_box()
    checks.append(CheckResult("bounded domain", bool(np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)))))

    inside = bool(spec.domain.contains(spec.start_point))
    checks.append(CheckResult("start point strictly interior", inside,
                              location=None if inside else tuple(spec.start)))

    # potential and costs evaluable and finite everywhere on the grid
    try:
        v = spec.potential.value(closure)
        g = spec.potential.gradient(closure)
        bad = ~(np.isfinite(v) & np.all(np.isfinite(g), axis=1))
        loc = tuple(closure[np.argmax(bad)]) if bad.any() else None
        checks.append(CheckResult("potential evaluable", not bad.any(),
                                  "non-finite value/gradient" if bad.any() else "", loc))
    except Exception as e:  # unevaluable field counts as a validation failure
        checks.append(CheckResult("potential evaluable", False, str(e)))
        v = g = None

    if spec.potential.growth_constants is not None and v is not None:
        K0, K1 = spec.potential.growth_constants
        norms = np.linalg.norm(closure, axis=1)
        ok0 = np.abs(v) <= K0 * (1 + norms) + 1e-12
        ok1 = np.sum(g * g, axis=1) <= K1 ** 2 * (1 + norms ** 2) + 1e-12
        bad = ~(ok0 & ok1)
        loc = tuple(closure[np.argmax(bad)]) if bad.any() else None
        checks.append(CheckResult("declared growth bounds", not bad.any(),
                                  "growth condition violated" if bad.any() else "", loc))

    try:
        kr = spec.running_cost(closure)
        neg = kr < 0
        loc = tuple(closure[np.argmax(neg)]) if neg.any() else None
        checks.append(CheckResult("running cost nonnegative", not neg.any(),
                                  f"kappa_r={kr.min():g} < 0" if neg.any() else "", loc))
    except Exception as e:
        checks.append(CheckResult("running cost nonnegative", False, f"unevaluable: {e}"))

    try:
        bpts = spec.domain.project_boundary(closure[:: max(1, closure.shape[0] // 64)])
        kt = spec.terminal_cost(bpts)
        ok = bool(np.all(np.isfinite(kt)))
        checks.append(CheckResult("terminal cost evaluable", ok))
    except Exception as e:
        checks.append(CheckResult("terminal cost evaluable", False, f"unevaluable: {e}"))

    # geometry consistency: projected outside points land near the boundary
    probe = np.vstack([lo - 0.1 * (hi - lo), hi + 0.1 * (hi - lo)])
    proj = spec.domain.project_boundary(probe)
    dist = np.abs(np.min(spec.domain.face_distances(np.atleast_2d(proj)), axis=1))
    checks.append(CheckResult("boundary projection", bool(np.all(dist <= spec.domain.boundary_tol + 1e-12)),
                              "" if np.all(dist <= spec.domain.boundary_tol + 1e-12) else f"distance {dist.max():g}"))

    if basis is not None:
        checks.extend(_validate_basis(spec, basis, closure))

    return ValidationReport(tuple(checks))


def _validate_basis(spec: ProblemSpec, basis: BasisSet, closure: Array) -> list[CheckResult]:
    checks = []
    if basis.dim != spec.dim:
        return [CheckResult("basis dimension", False, f"basis dim {basis.dim} != {spec.dim}")]

    vals = basis.values(closure)  # (k, n)

    const = np.ptp(vals, axis=0) < 1e-14
    loc = None
    checks.append(CheckResult("basis entries nonconstant", not const.any(),
                              f"entry {np.argmax(const)} constant on grid" if const.any() else "", loc))

    gram = vals.T @ vals / closure.shape[0]
    cond = float(np.linalg.cond(gram))
    checks.append(CheckResult("basis linearly independent",
                              np.isfinite(cond) and cond < _GRAM_COND_LIMIT,
                              f"Gram condition {cond:.3g} (limit {_GRAM_COND_LIMIT:g})"))

    frac = np.array([np.mean(basis.in_support(closure, i)) for i in range(basis.n)])
    empty = frac <= 0
    checks.append(CheckResult("supports have positive volume", not empty.any(),
                              f"entry {np.argmax(empty)} has empty sampled support" if empty.any() else ""))

    covered = np.zeros(closure.shape[0], bool)
    for i in range(basis.n):
        covered |= basis.in_support(closure, i)
    loc = tuple(closure[np.argmin(covered)]) if not covered.all() else None
    checks.append(CheckResult("closed supports cover the domain", bool(covered.all()),
                              "" if covered.all() else "uncovered sample point", loc))
    return checks
