"""Backstepping control kernels for ensembles of linear hyperbolic PDEs.

The package computes the kernel pair (k, kbar) of the ensemble kernel
equations either by truncated power series with least-squares coefficient
matching or, for separable problems, in closed form; samples the kernels
into state-feedback gain tables for large-scale n+1 systems; provides an
independent characteristics-based reference solver for the n+1 kernel
equations; and validates stabilization in a closed-loop method-of-lines
simulator.
"""

__version__ = "0.1.0"

from .closed_form import (ClosedFormError, ClosedFormKernel, NotApplicable,
                          SeparableProblem, build_f, build_kernels,
                          check_cy, check_largescale_conditions, compute_cx,
                          solve_closed_form)
from .fd_kernels import (ConvergenceError, LsKernelSolution, TriGrid,
                         refine_study, solve_characteristics)
from .gains import (GainTable, continuum_residual, diff_solutions, gains,
                    largescale_residual, read_gain_csv, sample_gains,
                    write_gain_csv)
from .params import (ConfigError, ContinuumParams, FitResult,
                     LargeScaleParams, PositivityReport, Problem,
                     check_positivity, fit_q, lift_separable, load_problem,
                     parse_problem_dict, sample_continuum)
from .power_series import (LinearSystem, PsKernelSolution, SolverConfig,
                           assemble, coeff_vector, count_unknowns,
                           optimality_check, residual_series, solve,
                           solve_ls)
from .series import (AnalyticFactor, Constant, Cos, Exp, Polynomial,
                     SeparableSum, SeparableTerm, Sin, TruncatedSeries, Var,
                     taylor)
from .simulate import SimConfig, SimReport, Simulator, run_closed_loop
