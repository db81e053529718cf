"""Discrete residuals of the regularized system, dual norms, rate fits.

The dual norm of a residual functional R over the discrete space is computed
through the Riesz problem (r, v)_{H1} = <R, v> for all basis functions, with
the full H1 inner product (mass plus unit stiffness, no stabilization); the
norm is then ||r||_{H1} = sqrt(coeffs . riesz).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import fem
from .coupling import assemble_f_load
from .fem import NodalField, assemble_convection, assemble_stiffness, \
    build_stabilization
from .hamiltonian import MoreauEnvelope
from .solver import MfgProblem, linear_solve


@dataclass(frozen=True)
class ResidualReport:
    r1_dual_norm: float
    r2_dual_norm: float
    r1_inf: float
    r2_inf: float

    @property
    def dual_total(self) -> float:
        return self.r1_dual_norm + self.r2_dual_norm


@dataclass(frozen=True)
class RateFit:
    pairs: tuple
    fitted_slope: float
    fit_residual: float


def dual_norm(space, coefficients: np.ndarray) -> float:
    """V_k* norm of the functional with the given basis coefficients."""
    riesz = linear_solve(space.h1_operator(), coefficients)
    return float(np.sqrt(max(riesz @ coefficients, 0.0)))


def residuals(problem: MfgProblem, u: NodalField, m: NodalField,
              lam: Optional[float] = None,
              sigma: Optional[float] = None) -> ResidualReport:
    """Residuals of both regularized discrete equations at (u, m).

    <R1, v> = (F[m], v) - (A_k grad u, grad v) - (H_lam[grad u], v)
    <R2, w> = <G, w>    - (A_k grad m, grad w) - (m dH_lam/dp[grad u], grad w)
    """
    space = problem.space
    if lam is None:
        lam = problem.lam
    if lam is None:
        raise ValueError("residuals are defined for the regularized system; "
                         "pass lam explicitly for PDI solutions")
    if sigma is None:
        sigma = problem.sigma
    envelope = MoreauEnvelope(problem.hamiltonian, lam)
    stab = build_stabilization(space, problem.hamiltonian.l_h, sigma)
    stiff = assemble_stiffness(space, problem.nu, stab)
    grad_u = space.gradient_per_element(u.full())
    pts = space.quad_points.reshape(-1, space.dim)
    env = envelope.batch(pts, np.repeat(grad_u, space.n_quad, axis=0))
    shape = (space.mesh.n_elements, space.n_quad)
    h_load = fem.assemble_load(space, g0=env.values.reshape(shape))
    r1 = assemble_f_load(space, problem.coupling, m) \
        - stiff.matrix @ u.values - h_load
    drift = env.gradients.reshape(shape + (space.dim,))
    conv = assemble_convection(space, drift)
    r2 = problem.source.load_vector(space) \
        - (stiff.matrix + conv.matrix.T) @ m.values
    return ResidualReport(
        r1_dual_norm=dual_norm(space, r1),
        r2_dual_norm=dual_norm(space, r2),
        r1_inf=float(np.abs(r1).max(initial=0.0)),
        r2_inf=float(np.abs(r2).max(initial=0.0)))


def fit_rate(pairs: Sequence[tuple]) -> RateFit:
    """Least-squares slope of log(error) against log(parameter)."""
    pairs = tuple((float(a), float(b)) for a, b in pairs)
    if len(pairs) < 2:
        raise ValueError("need at least two (parameter, error) pairs")
    arr = np.asarray(pairs)
    if np.any(arr <= 0):
        raise ValueError("rate fits need positive parameters and errors")
    logs = np.log(arr)
    slope, intercept = np.polyfit(logs[:, 0], logs[:, 1], 1)
    resid = logs[:, 1] - (slope * logs[:, 0] + intercept)
    return RateFit(pairs=pairs, fitted_slope=float(slope),
                   fit_residual=float(np.sqrt(np.mean(resid ** 2))))


def nonnegativity_report(m: NodalField, tol: float = 1e-12):
    """Exact minimum nodal value and the vertex ids below -tol."""
    values = m.values
    min_value = float(values.min()) if values.size else 0.0
    bad = np.nonzero(values < -tol)[0]
    return min_value, m.space.interior_dofs[bad]
