"""Rare-event exit statistics of controlled diffusions: Monte-Carlo
estimators with importance-sampling controls, gradient descent over a
control basis, and finite-difference reference solutions."""

from .model import (BasisControl, BasisSet, DomainSpec, PotentialSpec,
                    ProblemSpec, ScalarField, ball, box, bspline_basis,
                    constant_field, control_field, custom_basis,
                    disjoint_bumps, eval_costs, expression_field,
                    gaussian_bumps, interval, potential_from_csv,
                    validate_problem)
from .sampler import (BatchStats, PathStats, SimConfig, dump_trajectories,
                      sample_batch, simulate_trajectory)
from .girsanov import (GirsanovWeight, KValue, exp_martingale_weight,
                       k_estimator, kazamaki_bound, reweighted_expectation)
from .mcstats import EstimatorResult
from .variation import (GradHess, estimate_first_variation,
                        estimate_functional, estimate_gradient_hessian,
                        estimate_second_variation, fd_gradient_oracle,
                        second_variation_along)
from .descent import (ConvexityCertificate, DescentConfig, DescentDiverged,
                      DescentTrace, StepSchedule, check_convexity_preconditions,
                      convergence_diagnostics, estimate_coercivity_constant,
                      run_descent)
from .pde_oracle import (ExitMgfResult, Grid, OracleError, PdeSolution,
                         exit_mgf, exit_mgf_threshold, hjb_residual,
                         make_grid, poincare_error_report, project_control,
                         solve_feynman_kac)

__version__ = "0.1.0"
