"""Desk-scale benchmark problems used by the verification suite and scripts.

B1: free diffusion on the unit interval at temperature 0.5, unit running
cost; terminal cost 1.5 keeps the strong-convexity margin at 0.5.

B2: bistable double-well landscape on (-1.5, 1.5) at temperature 0.25,
where reaching the boundary is a genuine rare event under the uncontrolled
dynamics (mean exit time ~38 from the saddle, exit-weight expectation ~3e-3).
"""

from __future__ import annotations

from .model import (BasisSet, PotentialSpec, ProblemSpec, constant_field,
                    gaussian_bumps, interval)


def b1_problem(kappa_t: float = 1.5) -> ProblemSpec:
    return ProblemSpec(
        dim=1, epsilon=0.5, sigma=1.0,
        potential=PotentialSpec(kind="zero", dim=1),
        domain=interval(0.0, 1.0),
        running_cost=constant_field(1.0),
        terminal_cost=constant_field(kappa_t),
        start=(0.5,))


def b2_problem() -> ProblemSpec:
    return ProblemSpec(
        dim=1, epsilon=0.25, sigma=1.0,
        potential=PotentialSpec(kind="double-well-1d", dim=1,
                                parameters={"height": 1.0, "minima": 1.0}),
        domain=interval(-1.5, 1.5),
        running_cost=constant_field(1.0),
        terminal_cost=constant_field(1.5),
        start=(0.0,))


def b2_basis(n: int = 8) -> BasisSet:
    return gaussian_bumps(b2_problem().domain, n)
