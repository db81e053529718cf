"""Solvers for the discrete MFG systems.

The outer loop is a damped fixed point mirroring the HJB/KFP structure:
given the density, solve the HJB equation (damped Newton with the envelope
gradient when regularized, Howard policy iteration for the max-form
Hamiltonian otherwise), feed the resulting drift into a linear KFP solve,
and relax the density update.  Linear systems use sparse direct LU.

Every convection-bearing operator is checked against the discrete maximum
principle.  If verification fails, the stabilization multiplier sigma is
escalated geometrically and assembly repeats; escalation stops early when
the worst violation does not improve (on right-triangle meshes the Galerkin
convection carries small positive couplings across cell diagonals that no
isotropic diffusion can cancel, and there the exact inverse-positivity
certificate inside verify_dmp decides the matter instead).
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .coupling import CouplingF, assemble_f_load
from .fem import (DmpReport, NodalField, P1Space, SparseOperator,
                  assemble_convection, assemble_stiffness,
                  build_stabilization, kfp_operator, l2_norm, verify_dmp)
from .hamiltonian import MoreauEnvelope, PolyhedralHamiltonian
from .source import SourceG

logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class SingularOperator(SolverError):
    pass


class NonConvergence(SolverError):
    def __init__(self, message: str, residual_history=None, iterations=0):
        super().__init__(message)
        self.residual_history = list(residual_history or [])
        self.iterations = iterations


class PolicyCycling(NonConvergence):
    def __init__(self, cycle_length: int, iterations: int):
        super().__init__(
            f"Howard policy iteration entered a cycle of length {cycle_length}",
            iterations=iterations)
        self.cycle_length = cycle_length


@dataclass(frozen=True)
class SolverConfig:
    outer_tol: float = 1e-9
    outer_max: int = 200
    theta: float = 0.5
    theta_floor: float = 1.0 / 64.0
    inner_tol: float = 1e-11
    inner_max: int = 50
    linesearch: bool = True
    max_backtracks: int = 20
    sigma_escalation_max: int = 8
    dmp_exact_cap: int = 2500
    qp_tol: float = 1e-10

    def __post_init__(self):
        if min(self.outer_tol, self.inner_tol) <= 0:
            raise ValueError("tolerances must be positive")
        if not (0.0 < self.theta <= 1.0):
            raise ValueError("theta must lie in (0, 1]")


@dataclass(frozen=True)
class MfgProblem:
    """Problem bundle: diffusion, Hamiltonian, coupling, source, and the
    optional regularization parameter (absent means the unregularized PDI)."""

    nu: float
    space: P1Space
    hamiltonian: PolyhedralHamiltonian
    coupling: CouplingF
    source: SourceG
    lam: Optional[float] = None
    sigma: float = 0.5

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError("nu must be positive")
        if self.lam is not None and not (0.0 < self.lam <= 1.0):
            raise ValueError("lambda must be in (0, 1]")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    @property
    def regularized(self) -> bool:
        return self.lam is not None

    def with_lambda(self, lam: float) -> "MfgProblem":
        return replace(self, lam=lam)


@dataclass
class SolveTelemetry:
    outer_iterations: int = 0
    inner_iterations: list = field(default_factory=list)
    outer_residuals: list = field(default_factory=list)
    hjb_residual: float = np.inf
    dmp_report: Optional[DmpReport] = None
    dmp_certified: bool = False
    sigma_escalations: int = 0
    sigma_final: float = 0.0
    policy_iterations: int = 0
    fallback_lambda: Optional[float] = None
    seconds: float = 0.0
    notes: list = field(default_factory=list)


@dataclass(eq=False)
class MfgSolution:
    u: NodalField
    m: NodalField
    drift: np.ndarray  # (n_elements, n_quad, d) samples fed to the KFP solve
    telemetry: SolveTelemetry


def linear_solve(op, rhs: np.ndarray) -> np.ndarray:
    """Direct sparse solve with a residual check and one refinement step."""
    matrix = op.matrix if isinstance(op, SparseOperator) else op
    rhs = np.asarray(rhs, dtype=float)
    if matrix.shape[0] != matrix.shape[1] or matrix.shape[0] != rhs.shape[0]:
        raise ValueError("operator/right-hand side dimension mismatch")
    try:
        lu = spla.splu(sp.csc_matrix(matrix))
    except RuntimeError as exc:  # scipy reports the zero pivot in the message
        raise SingularOperator(f"sparse LU failed: {exc}") from exc
    x = lu.solve(rhs)
    tol = 1e-10 * (1.0 + np.abs(rhs).max(initial=0.0))
    r = rhs - matrix @ x
    if np.abs(r).max(initial=0.0) > tol:
        x = x + lu.solve(r)
        r = rhs - matrix @ x
        if np.abs(r).max(initial=0.0) > tol:
            raise SolverError(
                f"linear solve residual {np.abs(r).max():.3e} exceeds {tol:.3e}")
    return x


class _DmpFail(Exception):
    def __init__(self, report: DmpReport):
        self.report = report


class _Engine:
    """Assembled operators and inner solvers for one stabilization level."""

    def __init__(self, problem: MfgProblem, config: SolverConfig,
                 sigma: float, enforce_dmp: bool = True):
        self.problem = problem
        self.config = config
        self.sigma = sigma
        self.enforce_dmp = enforce_dmp
        self.space = problem.space
        ham = problem.hamiltonian
        self.stab = build_stabilization(self.space, ham.l_h, sigma)
        self.stiffness = assemble_stiffness(self.space, problem.nu, self.stab)
        self.load_g = problem.source.load_vector(self.space)
        self.envelope = (MoreauEnvelope(ham, problem.lam, qp_tol=config.qp_tol)
                         if problem.regularized else None)
        self.qp_x = self.space.quad_points.reshape(-1, self.space.dim)
        self._dmp_cache: dict = {}
        self.last_kfp_op: Optional[SparseOperator] = None

    # -- DMP policy --------------------------------------------------------

    def _check_operator(self, op: SparseOperator, kind: str) -> None:
        quick = verify_dmp(op, self.space, exact_cap=0)
        if quick.m_matrix:
            return
        # the sign pattern of the convection part is drift dependent but the
        # structural violations are not; run the expensive certificate once
        # per operator kind and trust it for the rest of this solve (the
        # final KFP operator is re-certified for the telemetry)
        if kind not in self._dmp_cache:
            report = verify_dmp(op, self.space,
                                exact_cap=self.config.dmp_exact_cap)
            self._dmp_cache[kind] = report
            if not report.passed and self.enforce_dmp:
                raise _DmpFail(report)

    # -- HJB, regularized path ----------------------------------------------

    def _f_load(self, m: NodalField) -> np.ndarray:
        return assemble_f_load(self.space, self.problem.coupling, m)

    def _envelope_at(self, u: NodalField):
        grad_u = self.space.gradient_per_element(u.full())
        p = np.repeat(grad_u, self.space.n_quad, axis=0)
        return self.envelope.batch(self.qp_x, p)

    def _hjb_residual_reg(self, u: NodalField, load_f: np.ndarray):
        env = self._envelope_at(u)
        shape = (self.space.mesh.n_elements, self.space.n_quad)
        nonlin = fem.assemble_load(self.space, g0=env.values.reshape(shape))
        r = self.stiffness.matrix @ u.values + nonlin - load_f
        return r, env

    def hjb_newton(self, m: NodalField, u_init: NodalField):
        """Damped Newton for the regularized HJB equation at fixed density."""
        cfg = self.config
        load_f = self._f_load(m)
        u = u_init.copy()
        r, env = self._hjb_residual_reg(u, load_f)
        rnorm = np.abs(r).max(initial=0.0)
        history = [rnorm]
        for iteration in range(1, cfg.inner_max + 1):
            if rnorm <= cfg.inner_tol:
                drift = env.gradients.reshape(
                    self.space.mesh.n_elements, self.space.n_quad, -1)
                return u, rnorm, drift, iteration - 1
            nq = self.space.n_quad
            drift = env.gradients.reshape(self.space.mesh.n_elements, nq, -1)
            jac = self.stiffness + assemble_convection(self.space, drift)
            self._check_operator(jac, "hjb_jacobian")
            delta = linear_solve(jac, -r)
            alpha = 1.0
            accepted = False
            for _ in range(cfg.max_backtracks + 1):
                trial = NodalField(self.space, u.values + alpha * delta)
                r_new, env_new = self._hjb_residual_reg(trial, load_f)
                rnorm_new = np.abs(r_new).max(initial=0.0)
                if rnorm_new < rnorm or not self.config.linesearch:
                    u, r, env, rnorm = trial, r_new, env_new, rnorm_new
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                raise NonConvergence("Newton line search stalled",
                                     residual_history=history,
                                     iterations=iteration)
            history.append(rnorm)
        raise NonConvergence(
            f"HJB Newton did not reach {cfg.inner_tol:.1e} in "
            f"{cfg.inner_max} iterations", residual_history=history,
            iterations=cfg.inner_max)

    # -- HJB, unregularized path (Howard policy iteration) ------------------

    def _policy_arrays(self, policy: np.ndarray):
        ham = self.problem.hamiltonian
        b, f = ham.control_arrays(self.qp_x)
        flat = policy.ravel()
        take = np.arange(flat.size)
        drift = b[take, flat].reshape(policy.shape + (self.space.dim,))
        cost = f[take, flat].reshape(policy.shape)
        return drift, cost

    def _hjb_residual_pdi(self, u: NodalField, load_f: np.ndarray):
        ham = self.problem.hamiltonian
        grad_u = self.space.gradient_per_element(u.full())
        p = np.repeat(grad_u, self.space.n_quad, axis=0)
        values, idx = ham.value_batch(self.qp_x, p)
        shape = (self.space.mesh.n_elements, self.space.n_quad)
        nonlin = fem.assemble_load(self.space, g0=values.reshape(shape))
        r = self.stiffness.matrix @ u.values + nonlin - load_f
        return r, idx.reshape(shape)

    def hjb_howard(self, m: NodalField, u_init: NodalField):
        """Policy iteration with lowest-index tie-breaking.

        Stops when the policy repeats or the max-form residual drops below
        the inner tolerance; a policy revisited after more than one step is
        reported as cycling.
        """
        cfg = self.config
        load_f = self._f_load(m)
        u = u_init.copy()
        _, policy = self._hjb_residual_pdi(u, load_f)
        seen: dict = {self._policy_hash(policy): 0}
        for iteration in range(1, cfg.inner_max + 1):
            drift, cost = self._policy_arrays(policy)
            op = self.stiffness + assemble_convection(
                self.space, drift, l_h=self.problem.hamiltonian.l_h)
            self._check_operator(op, "howard")
            rhs = load_f + fem.assemble_load(self.space, g0=cost)
            u = NodalField(self.space, linear_solve(op, rhs))
            r, new_policy = self._hjb_residual_pdi(u, load_f)
            rnorm = np.abs(r).max(initial=0.0)
            if rnorm <= cfg.inner_tol or np.array_equal(new_policy, policy):
                drift, _ = self._policy_arrays(new_policy)
                return u, rnorm, drift, iteration
            key = self._policy_hash(new_policy)
            if key in seen:
                raise PolicyCycling(cycle_length=iteration - seen[key],
                                    iterations=iteration)
            if len(seen) >= 8:
                # bounded window: forget the oldest entries
                oldest = min(seen, key=seen.get)
                del seen[oldest]
            seen[key] = iteration
            policy = new_policy
        raise NonConvergence(
            f"Howard iteration did not converge in {cfg.inner_max} steps",
            iterations=cfg.inner_max)

    @staticmethod
    def _policy_hash(policy: np.ndarray) -> bytes:
        return hashlib.blake2b(policy.tobytes(), digest_size=16).digest()

    # -- KFP -----------------------------------------------------------------

    def kfp(self, drift: np.ndarray) -> NodalField:
        conv = assemble_convection(self.space, drift,
                                   l_h=self.problem.hamiltonian.l_h)
        op = kfp_operator(self.stiffness, conv)
        self._check_operator(op, "kfp")
        self.last_kfp_op = op
        return NodalField(self.space, linear_solve(op, self.load_g))


def _outer_loop(engine: _Engine, config: SolverConfig,
                u0: NodalField, m0: NodalField):
    space = engine.space
    u = u0.copy()
    m = m0.copy()
    theta = config.theta
    telemetry = SolveTelemetry(sigma_final=engine.sigma)
    prev_res = np.inf
    for outer in range(1, config.outer_max + 1):
        if engine.problem.regularized:
            u, hjb_res, drift, inner = engine.hjb_newton(m, u)
        else:
            u, hjb_res, drift, inner = engine.hjb_howard(m, u)
            telemetry.policy_iterations += inner
        m_kfp = engine.kfp(drift)
        res = l2_norm(NodalField(space, m_kfp.values - m.values))
        telemetry.inner_iterations.append(inner)
        telemetry.outer_residuals.append(res)
        telemetry.outer_iterations = outer
        telemetry.hjb_residual = hjb_res
        if res <= config.outer_tol * (1.0 + l2_norm(m)) and \
                hjb_res <= config.inner_tol:
            return u, m_kfp, drift, telemetry
        if res > prev_res:
            theta = max(theta / 2.0, config.theta_floor)
        prev_res = res
        m = NodalField(space, (1.0 - theta) * m.values + theta * m_kfp.values)
    raise NonConvergence(
        f"fixed point did not reach {config.outer_tol:.1e} in "
        f"{config.outer_max} outer iterations",
        residual_history=telemetry.outer_residuals,
        iterations=config.outer_max)


def _solve_with_escalation(problem: MfgProblem, config: SolverConfig,
                           u0: NodalField, m0: NodalField) -> MfgSolution:
    sigma = problem.sigma
    escalations = 0
    prev_violation = None
    enforce = True
    notes = []
    start = time.perf_counter()
    while True:
        engine = _Engine(problem, config, sigma, enforce_dmp=enforce)
        try:
            u, m, drift, telemetry = _outer_loop(engine, config, u0, m0)
            break
        except _DmpFail as fail:
            v = fail.report.violation
            stagnant = prev_violation is not None and v >= 0.9 * prev_violation
            if escalations >= config.sigma_escalation_max or stagnant:
                if stagnant and escalations > 0:
                    sigma /= 2.0  # the last doubling bought nothing
                    escalations -= 1
                notes.append(
                    "DMP verification kept failing (worst violation "
                    f"{v:.3e}); proceeding without certification")
                enforce = False
                continue
            prev_violation = v
            sigma = sigma * 2.0 if sigma > 0 else 0.5
            escalations += 1
            notes.append(f"sigma escalated to {sigma} after DMP failure "
                         f"(violation {v:.3e})")
            logger.info(notes[-1])
    if engine.last_kfp_op is not None:
        final = verify_dmp(engine.last_kfp_op, engine.space,
                           exact_cap=config.dmp_exact_cap)
        telemetry.dmp_report = final
        telemetry.dmp_certified = final.passed
    telemetry.sigma_escalations = escalations
    telemetry.sigma_final = sigma
    telemetry.notes.extend(notes)
    telemetry.seconds = time.perf_counter() - start
    return MfgSolution(u=u, m=m, drift=drift, telemetry=telemetry)


def solve_mfg(problem: MfgProblem, config: Optional[SolverConfig] = None,
              u0: Optional[NodalField] = None, m0: Optional[NodalField] = None,
              fallback_lambda: Optional[float] = None) -> MfgSolution:
    """Solve the discrete MFG system (regularized when problem.lam is set).

    Starts from (u, m) = (0, 0) unless warm starts are given.  On the
    unregularized path, policy cycling or outer nonconvergence falls back to
    the regularized system at ``fallback_lambda`` when one is supplied.
    """
    config = config or SolverConfig()
    space = problem.space
    u0 = u0 or NodalField.zeros(space)
    m0 = m0 or NodalField.zeros(space)
    try:
        return _solve_with_escalation(problem, config, u0, m0)
    except NonConvergence as exc:
        if problem.regularized or fallback_lambda is None:
            raise
        logger.info("PDI solve failed (%s); falling back to lambda=%.3e",
                    exc, fallback_lambda)
        solution = _solve_with_escalation(
            problem.with_lambda(fallback_lambda), config, u0, m0)
        solution.telemetry.fallback_lambda = fallback_lambda
        solution.telemetry.notes.append(
            f"unregularized path failed ({exc}); "
            f"fell back to lambda={fallback_lambda:.6e}")
        return solution


# -- single-equation entry points (no escalation policy) --------------------

def solve_hjb_regularized(problem: MfgProblem, m_fixed: NodalField,
                          u_init: Optional[NodalField] = None) -> NodalField:
    """Damped Newton solve of the regularized HJB equation at fixed density."""
    if not problem.regularized:
        raise ValueError("problem has no regularization parameter")
    engine = _Engine(problem, SolverConfig(), problem.sigma, enforce_dmp=False)
    u_init = u_init or NodalField.zeros(problem.space)
    u, _, _, _ = engine.hjb_newton(m_fixed, u_init)
    return u


def solve_hjb_howard(problem: MfgProblem, m_fixed: NodalField,
                     u_init: Optional[NodalField] = None):
    """Policy iteration for the max-form HJB equation; returns (u, drift)."""
    engine = _Engine(problem, SolverConfig(), problem.sigma, enforce_dmp=False)
    u_init = u_init or NodalField.zeros(problem.space)
    u, _, drift, _ = engine.hjb_howard(m_fixed, u_init)
    return u, drift


def solve_kfp(problem: MfgProblem, drift: np.ndarray) -> NodalField:
    """Linear KFP solve (stiffness + convection^T) m = load_G."""
    engine = _Engine(problem, SolverConfig(), problem.sigma, enforce_dmp=False)
    return engine.kfp(drift)


def hjb_residual(problem: MfgProblem, m: NodalField, u: NodalField,
                 sigma: Optional[float] = None) -> np.ndarray:
    """Residual coefficients of the regularized HJB equation (test hook)."""
    engine = _Engine(problem, SolverConfig(),
                     problem.sigma if sigma is None else sigma,
                     enforce_dmp=False)
    r, _ = engine._hjb_residual_reg(u, engine._f_load(m))
    return r


def hjb_jacobian(problem: MfgProblem, u: NodalField,
                 sigma: Optional[float] = None) -> SparseOperator:
    """Newton Jacobian stiffness + convection(grad H_lambda) at u (test hook)."""
    engine = _Engine(problem, SolverConfig(),
                     problem.sigma if sigma is None else sigma,
                     enforce_dmp=False)
    env = engine._envelope_at(u)
    drift = env.gradients.reshape(
        problem.space.mesh.n_elements, problem.space.n_quad, -1)
    return engine.stiffness + assemble_convection(problem.space, drift)
