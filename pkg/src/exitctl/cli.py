"""Command-line front end: config ingestion, experiment orchestration, and
reproducible artifact emission.

Commands: simulate | estimate | descend | pde | verify. Exit codes: 0 on
success, 1 on runtime failure, 2 on config errors, 3 when verification
fails. Every run echoes its fully resolved configuration to
<output>/config.resolved.json; artifacts are CSV with fixed column order
and 17-significant-digit floats, so reruns diff byte for byte.
"""

from __future__ import annotations

import argparse
import difflib
import io
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model
from .descent import DescentConfig, StepSchedule
from .sampler import SimConfig

_EXIT_RUNTIME = 1
_EXIT_CONFIG = 2
_EXIT_VERIFY = 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# schema: nested dict of {key: (default | REQUIRED, validator)}
# ---------------------------------------------------------------------------

_REQUIRED = object()

_SCHEMA: dict = {
    "problem": {
        "dimension": 1,
        "epsilon": _REQUIRED,
        "temperature": None,          # accepted alias for epsilon
        "sigma": 1.0,
        "start": _REQUIRED,
        "potential": {
            "kind": "zero",
            "parameters": dict,        # free-form, kind-specific
            "csv_path": None,
            "growth_constants": None,
        },
        "domain": {
            "shape": _REQUIRED,
            "lower": None,
            "upper": None,
            "center": None,
            "radius": None,
            "boundary_tol": 1e-9,
        },
        "running_cost": {"kind": "constant", "value": 0.0, "expr": None},
        "terminal_cost": {"kind": "constant", "value": 0.0, "expr": None},
    },
    "basis": {
        "family": "gaussian",
        "n": 8,
        "width": None,
    },
    "control": {"coefficients": None},
    "sim": {
        "dt": 1e-3,
        "max_steps": 1000000,
        "seed": 0,
        "exit_interpolation": True,
        "exit_detection": "grid",
        "block_steps": 256,
        "n_trajectories": 10000,
        "probe_quadratic": "full",
    },
    "descent": {
        "a0": None,
        "n_iter": 20,
        "n_traj": 1000,
        "step": {"schedule": "fixed", "h": 0.05, "shrink": 0.5, "c1": 1e-4},
        "grad_tol": 0.05,
        "seed_policy": "fresh",
    },
    "pde": {"grid_h": 1e-3},
    "output_dir": "out",
}


def _reject_unknown(doc, schema, path: str) -> None:
    if not isinstance(doc, dict):
        return
    allowed = [k for k in schema if isinstance(schema, dict)]
    for key, val in doc.items():
        if key not in allowed:
            hint = difflib.get_close_matches(key, allowed, n=1, cutoff=0.6)
            suggestion = f" (did you mean {hint[0]!r}?)" if hint else ""
            raise ConfigError(f"unknown key {path}/{key}{suggestion}")
        sub = schema[key]
        if isinstance(sub, dict) and sub is not dict:
            _reject_unknown(val, sub, f"{path}/{key}")


def _resolve(doc, schema):
    """Fill defaults; _REQUIRED keys must be present."""
    out = {}
    for key, spec in schema.items():
        if isinstance(spec, dict):
            out[key] = _resolve(doc.get(key, {}) if isinstance(doc, dict) else {}, spec)
        elif spec is dict:
            out[key] = dict(doc.get(key, {})) if isinstance(doc, dict) else {}
        else:
            present = isinstance(doc, dict) and key in doc
            if spec is _REQUIRED and not present:
                out[key] = _REQUIRED
            else:
                out[key] = doc[key] if present else spec
    return out


def _require(resolved, path: str):
    node = resolved
    for part in path.strip("/").split("/"):
        node = node[part]
    if node is _REQUIRED:
        raise ConfigError(f"missing required key {path}")
    return node


def _positive(resolved_value, path: str, strict: bool = True):
    try:
        v = float(resolved_value)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected a number, got {resolved_value!r}")
    if (strict and v <= 0) or (not strict and v < 0):
        raise ConfigError(f"{path}: must be {'positive' if strict else 'nonnegative'}, got {v:g}")
    return v


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def _build_cost(node: dict, dim: int, path: str) -> model.ScalarField:
    kind = node["kind"]
    if kind == "constant":
        return model.constant_field(float(node["value"]))
    if kind == "expression":
        if not node.get("expr"):
            raise ConfigError(f"{path}/expr: expression cost needs 'expr'")
        return model.expression_field(node["expr"], dim)
    raise ConfigError(f"{path}/kind: unknown cost kind {kind!r}")


def _build_domain(node: dict, path: str) -> model.DomainSpec:
    shape = node["shape"]
    if shape is _REQUIRED:
        raise ConfigError(f"missing required key {path}/shape")
    try:
        if shape == "interval":
            return model.interval(node["lower"][0], node["upper"][0],
                                  boundary_tol=node["boundary_tol"])
        if shape == "box":
            return model.box(node["lower"], node["upper"],
                             boundary_tol=node["boundary_tol"])
        if shape == "ball":
            return model.ball(node["center"], node["radius"],
                              boundary_tol=node["boundary_tol"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}")
    raise ConfigError(f"{path}/shape: unknown shape {shape!r}")


def _build_potential(node: dict, dim: int, path: str) -> model.PotentialSpec:
    kind = node["kind"]
    gc = node.get("growth_constants")
    gc = tuple(gc) if gc else None
    try:
        if kind == "grid-interpolated":
            if not node.get("csv_path"):
                raise ConfigError(f"{path}/csv_path: grid-interpolated potential needs a CSV")
            return model.potential_from_csv(node["csv_path"], dim, growth_constants=gc)
        return model.PotentialSpec(kind=kind, dim=dim, parameters=node["parameters"],
                                   growth_constants=gc)
    except ConfigError:
        raise
    except (TypeError, ValueError, OSError) as e:
        raise ConfigError(f"{path}: {e}")


def _build_basis(node: dict, domain: model.DomainSpec, path: str) -> model.BasisSet:
    family = node["family"]
    n = int(node["n"])
    try:
        if family == "gaussian":
            return model.gaussian_bumps(domain, n, width=node["width"])
        if family == "disjoint-bump":
            return model.disjoint_bumps(domain, n)
        if family == "bspline":
            return model.bspline_basis(domain, n)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}")
    raise ConfigError(f"{path}/family: unknown basis family {family!r}")


@dataclass
class ExperimentConfig:
    problem: model.ProblemSpec
    basis: model.BasisSet | None
    coefficients: np.ndarray | None
    sim: SimConfig
    n_trajectories: int
    probe_quadratic: str
    descent: DescentConfig
    grid_h: float
    output_dir: Path
    resolved: dict


def parse_config(text: str) -> ExperimentConfig:
    """Validate a JSON config document, fill defaults, and build the objects.

    Unknown keys are rejected with a nearest-match suggestion; value errors
    name the JSON path of the offending key.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown(doc, _SCHEMA, "")
    resolved = _resolve(doc, _SCHEMA)

    prob = resolved["problem"]
    if prob["temperature"] is not None:
        if prob["epsilon"] is not _REQUIRED:
            raise ConfigError("/problem: give either 'epsilon' or 'temperature', not both")
        prob["epsilon"] = prob["temperature"]
    prob["temperature"] = None
    eps = _positive(_require(resolved, "/problem/epsilon"), "/problem/epsilon")
    sigma = _positive(prob["sigma"], "/problem/sigma")
    dim = int(prob["dimension"])
    if dim < 1:
        raise ConfigError("/problem/dimension: must be >= 1")
    start = _require(resolved, "/problem/start")
    domain = _build_domain(prob["domain"], "/problem/domain")
    potential = _build_potential(prob["potential"], dim, "/problem/potential")
    try:
        spec = model.ProblemSpec(
            dim=dim, epsilon=eps, sigma=sigma, potential=potential, domain=domain,
            running_cost=_build_cost(prob["running_cost"], dim, "/problem/running_cost"),
            terminal_cost=_build_cost(prob["terminal_cost"], dim, "/problem/terminal_cost"),
            start=tuple(float(v) for v in np.atleast_1d(start)))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"/problem: {e}")

    basis = None
    if "basis" in doc:
        basis = _build_basis(resolved["basis"], domain, "/basis")

    coeffs = None
    if resolved["control"]["coefficients"] is not None:
        coeffs = np.asarray(resolved["control"]["coefficients"], dtype=float)

    sim_node = resolved["sim"]
    try:
        sim = SimConfig(dt=_positive(sim_node["dt"], "/sim/dt"),
                        max_steps=int(sim_node["max_steps"]),
                        seed=int(sim_node["seed"]),
                        exit_interpolation=bool(sim_node["exit_interpolation"]),
                        exit_detection=sim_node["exit_detection"],
                        block_steps=int(sim_node["block_steps"]))
    except ValueError as e:
        raise ConfigError(f"/sim: {e}")
    n_traj = int(sim_node["n_trajectories"])
    if n_traj < 1:
        raise ConfigError("/sim/n_trajectories: must be >= 1")
    if sim_node["probe_quadratic"] not in ("full", "diag"):
        raise ConfigError("/sim/probe_quadratic: must be 'full' or 'diag'")

    dnode = resolved["descent"]
    snode = dnode["step"]
    if snode["schedule"] not in ("fixed", "backtracking"):
        raise ConfigError("/descent/step/schedule: must be 'fixed' or 'backtracking'")
    n_basis = basis.n if basis is not None else 0
    a0 = dnode["a0"] if dnode["a0"] is not None else [0.0] * n_basis
    try:
        dcfg = DescentConfig(
            a0=tuple(float(v) for v in a0),
            n_iter=int(dnode["n_iter"]), n_traj=int(dnode["n_traj"]),
            step=StepSchedule(kind=snode["schedule"], h=float(snode["h"]),
                              shrink=float(snode["shrink"]), c1=float(snode["c1"])),
            grad_tol=float(dnode["grad_tol"]), seed_policy=dnode["seed_policy"])
    except ValueError as e:
        raise ConfigError(f"/descent: {e}")

    resolved["problem"].pop("temperature", None)
    return ExperimentConfig(
        problem=spec, basis=basis, coefficients=coeffs, sim=sim,
        n_trajectories=n_traj, probe_quadratic=sim_node["probe_quadratic"],
        descent=dcfg, grid_h=_positive(resolved["pde"]["grid_h"], "/pde/grid_h"),
        output_dir=Path(resolved["output_dir"]), resolved=resolved)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _echo_resolved(cfg: ExperimentConfig) -> None:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    with open(cfg.output_dir / "config.resolved.json", "w") as fh:
        json.dump(cfg.resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _control_and_probes(cfg: ExperimentConfig, need_probes: bool):
    control = None
    if cfg.coefficients is not None:
        if cfg.basis is None:
            raise ConfigError("/control/coefficients given without a /basis section")
        control = model.BasisControl(cfg.basis, cfg.coefficients)
    probes = cfg.basis if (need_probes and cfg.basis is not None) else None
    return control, probes


def _cmd_simulate(cfg: ExperimentConfig, threads: int) -> int:
    from .sampler import dump_trajectories, sample_batch

    control, _ = _control_and_probes(cfg, need_probes=False)
    batch = sample_batch(cfg.problem, control, None, cfg.sim, cfg.n_trajectories,
                         threads=threads)
    with open(cfg.output_dir / "trajectories.csv", "w") as fh:
        dump_trajectories(batch, fh)
    print(f"simulate: {batch.n_exited}/{batch.n} exited; "
          f"wrote {cfg.output_dir / 'trajectories.csv'}")
    return 0


def _cmd_estimate(cfg: ExperimentConfig, threads: int) -> int:
    from .sampler import sample_batch
    from .variation import (dump_gradient_hessian, estimate_functional,
                            estimate_gradient_hessian)

    if cfg.basis is None:
        raise ConfigError("estimate requires a /basis section")
    control, probes = _control_and_probes(cfg, need_probes=True)
    batch = sample_batch(cfg.problem, control, probes, cfg.sim, cfg.n_trajectories,
                         threads=threads, probe_qv=cfg.probe_quadratic)
    phi = estimate_functional(batch, cfg.problem.sigma)
    path = cfg.output_dir / "estimators.csv"
    with open(path, "w") as fh:
        fh.write("i,j,value,se\n")
        fh.write(f"-1,-1,{phi.mean:.17g},{phi.std_error:.17g}\n")
        if cfg.probe_quadratic == "full":
            gh = estimate_gradient_hessian(batch, cfg.problem.sigma, cfg.basis)
            buf = io.StringIO()
            dump_gradient_hessian(gh, buf)               # long format (i, j, value, se)
            fh.write(buf.getvalue().split("\n", 1)[1])   # skip its duplicate header
    print(f"estimate: phi = {phi.mean:.6g} +- {phi.std_error:.2g}; wrote {path}")
    return 0


def _cmd_descend(cfg: ExperimentConfig, threads: int) -> int:
    from .descent import dump_trace, run_descent, save_checkpoint

    if cfg.basis is None:
        raise ConfigError("descend requires a /basis section")
    trace = run_descent(cfg.problem, cfg.basis, cfg.descent, cfg.sim, threads=threads)
    with open(cfg.output_dir / "descent_trace.csv", "w") as fh:
        dump_trace(trace, fh)
    with open(cfg.output_dir / "checkpoint.json", "w") as fh:
        save_checkpoint(trace, cfg.descent, cfg.sim, fh)
    last = trace.records[-1]
    print(f"descend: {len(trace)} evaluations, phi {trace.records[0].phi:.6g} -> "
          f"{last.phi:.6g}, |grad| {last.grad_norm:.4g}, "
          f"converged={trace.converged}")
    return 0


def _cmd_pde(cfg: ExperimentConfig) -> int:
    from .pde_oracle import dump_solution, hjb_residual, make_grid, solve_feynman_kac

    if cfg.problem.dim > 2:
        raise ConfigError("oracle supports d in {1, 2}")
    grid = make_grid(cfg.problem.domain, cfg.grid_h)
    sol = solve_feynman_kac(cfg.problem, grid)
    _, res = hjb_residual(sol, cfg.problem)
    with open(cfg.output_dir / "pde_solution.csv", "w") as fh:
        dump_solution(sol, fh)
    print(f"pde: solved on {'x'.join(str(s) for s in grid.shape)} grid, "
          f"value at start {sol.F_at(cfg.problem.start_point):.6g}, "
          f"HJB residual {res:.3g}")
    return 0


def _cmd_verify(cfg: ExperimentConfig, threads: int) -> int:
    from .acceptance import run_all

    results = run_all(threads=threads)
    lines = [str(r) for r in results]
    report = "\n".join(lines) + "\n"
    sys.stdout.write(report)
    with open(cfg.output_dir / "verify_report.txt", "w") as fh:
        fh.write(report)
    return 0 if all(r.passed for r in results) else _EXIT_VERIFY


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="exitctl",
        description="Rare-event exit statistics of controlled diffusions: "
                    "sampling, estimator verification, control descent, and "
                    "finite-difference references.")
    parser.add_argument("command",
                        choices=["simulate", "estimate", "descend", "pde", "verify"])
    parser.add_argument("--config", required=True, metavar="PATH",
                        help="JSON experiment configuration")
    parser.add_argument("--seed", type=int, default=None, metavar="U64",
                        help="override /sim/seed")
    parser.add_argument("--threads", type=int, default=None, metavar="N",
                        help="sampling workers (fallback: EXITCTL_THREADS, then 1)")
    parser.add_argument("--output", default=None, metavar="DIR",
                        help="override /output_dir")
    args = parser.parse_args(argv)

    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("EXITCTL_THREADS", "1"))

    try:
        text = Path(args.config).read_text()
    except OSError as e:
        print(f"config error: {e}", file=sys.stderr)
        return _EXIT_CONFIG

    try:
        cfg = parse_config(text)
        if args.seed is not None:
            from dataclasses import replace
            cfg.sim = replace(cfg.sim, seed=args.seed)
            cfg.resolved["sim"]["seed"] = args.seed
        if args.output is not None:
            cfg.output_dir = Path(args.output)
            cfg.resolved["output_dir"] = args.output
        cfg.resolved["threads"] = threads
        _echo_resolved(cfg)
        if args.command == "simulate":
            return _cmd_simulate(cfg, threads)
        if args.command == "estimate":
            return _cmd_estimate(cfg, threads)
        if args.command == "descend":
            return _cmd_descend(cfg, threads)
        if args.command == "pde":
            return _cmd_pde(cfg)
        return _cmd_verify(cfg, threads)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return _EXIT_CONFIG
    except Exception as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return _EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
