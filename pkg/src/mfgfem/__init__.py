"""Stabilized P1 finite elements for stationary mean field games with
nondifferentiable Hamiltonians, with Moreau-Yosida regularization and
convergence-rate studies."""

from .coupling import CouplingF, CouplingKind, assemble_f_load, eval_f
from .diagnostics import (RateFit, ResidualReport, dual_norm, fit_rate,
                          nonnegativity_report, residuals)
from .fem import (DmpReport, NodalField, P1Space, SparseOperator,
                  Stabilization, StabilizationMode, assemble_convection,
                  assemble_load, assemble_load_G, assemble_mass,
                  assemble_stiffness, build_stabilization, error_between,
                  error_vs_function, h1_norm, kfp_operator, l2_norm,
                  verify_dmp)
from .hamiltonian import (MoreauEnvelope, PolyhedralHamiltonian, QpMode,
                          QpNonConvergence, eval_H, eval_envelope,
                          grad_envelope, prox, subgradient_selection)
from .mesh import (DomainTag, Mesh, MeshMetrics, build_structured,
                   check_conformity, metrics, prolong_map, refine_uniform,
                   summary_row, write_vtk)
from .solver import (MfgProblem, MfgSolution, NonConvergence, PolicyCycling,
                     SingularOperator, SolverConfig, SolverError,
                     SolveTelemetry, linear_solve, solve_hjb_howard,
                     solve_hjb_regularized, solve_kfp, solve_mfg)
from .source import SourceG, load_vector

__all__ = [name for name in dir() if not name.startswith("_")]
