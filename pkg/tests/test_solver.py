import numpy as np
import pytest
import scipy.sparse as sp

import oracles
from conftest import mesh_level
from mfgfem import (CouplingF, CouplingKind, DomainTag, MfgProblem,
                    MoreauEnvelope, NodalField, P1Space, PolyhedralHamiltonian,
                    SolverConfig, SourceG, assemble_convection,
                    assemble_stiffness, build_stabilization, build_structured,
                    l2_norm, linear_solve, nonnegativity_report, residuals,
                    solve_hjb_howard, solve_hjb_regularized, solve_kfp,
                    solve_mfg, verify_dmp)
from mfgfem.solver import (NonConvergence, PolicyCycling, SingularOperator,
                           hjb_jacobian, hjb_residual)


def interval_problem(n, lam=None, sigma=0.5, kappa=1.0, g0=1.0, nu=1.0,
                     controls=((1.0, 0.0), (-1.0, 0.0))):
    space = P1Space(build_structured(DomainTag.UNIT_INTERVAL, n))
    return MfgProblem(
        nu=nu, space=space,
        hamiltonian=PolyhedralHamiltonian(list(controls)),
        coupling=CouplingF(CouplingKind.LOCAL_LINEAR, kappa=kappa),
        source=SourceG(g0=g0), lam=lam, sigma=sigma)


# -- zero data ----------------------------------------------------------------

def test_zero_data_regularized_exact():
    prob = interval_problem(16, lam=0.25, g0=0.0)
    sol = solve_mfg(prob)
    assert sol.telemetry.outer_iterations == 1
    assert np.all(sol.u.values == 0.0) and np.all(sol.m.values == 0.0)
    rep = residuals(prob, sol.u, sol.m)
    assert rep.r1_dual_norm <= 1e-12 and rep.r2_dual_norm <= 1e-12


def test_zero_data_pdi_exact():
    prob = interval_problem(16, lam=None, g0=0.0)
    sol = solve_mfg(prob)
    assert sol.telemetry.outer_iterations == 1
    assert np.all(sol.u.values == 0.0) and np.all(sol.m.values == 0.0)


# -- HJB, regularized ------------------------------------------------------------

def test_hjb_single_control_is_linear():
    # N = 1 makes the envelope affine, so one Newton step must match the
    # direct solve of (A grad u, grad v) + (b . grad u, v) = (F + f, v)
    b, f = 1.5, 0.25
    prob = interval_problem(16, lam=0.5, controls=((b, f),))
    space = prob.space
    m = NodalField.zeros(space)
    u = solve_hjb_regularized(prob, m)
    stab = build_stabilization(space, prob.hamiltonian.l_h, prob.sigma)
    stiff = assemble_stiffness(space, prob.nu, stab)
    conv = assemble_convection(space, b)
    # H_lam(p) = b p - f - lam b^2 / 2 exactly for one control
    from mfgfem.fem import assemble_load
    rhs = assemble_load(space, g0=f + 0.5 * prob.lam * b ** 2)
    direct = linear_solve(stiff + conv, rhs)
    assert np.max(np.abs(u.values - direct)) < 1e-12


def test_hjb_regularized_benchmark_and_picard_cross_validation():
    prob = interval_problem(16, lam=0.25)
    space = prob.space
    m_fixed = NodalField.zeros(space)
    # F[0] = kappa*0 + F0 = 0; use F0 = 1 through the coupling background
    prob = MfgProblem(nu=1.0, space=space, hamiltonian=prob.hamiltonian,
                      coupling=CouplingF(CouplingKind.LOCAL_LINEAR, kappa=1.0,
                                         f0=1.0),
                      source=prob.source, lam=0.25, sigma=prob.sigma)
    u = solve_hjb_regularized(prob, m_fixed)
    r = hjb_residual(prob, m_fixed, u)
    assert np.abs(r).max() <= SolverConfig().inner_tol
    # independent damped Picard iteration on the same discrete system
    stab = build_stabilization(space, prob.hamiltonian.l_h, prob.sigma)
    stiff = assemble_stiffness(space, prob.nu, stab).matrix.toarray()
    env = MoreauEnvelope(prob.hamiltonian, 0.25)
    from mfgfem.fem import assemble_load
    load_f = assemble_load(space, g0=1.0)
    pts = space.quad_points.reshape(-1, 1)

    def nonlinear_term(u_vals):
        full = np.zeros(space.mesh.n_vertices)
        full[space.interior_dofs] = u_vals
        grads = space.gradient_per_element(full)
        vals = env.batch(pts, np.repeat(grads, space.n_quad, axis=0)).values
        return assemble_load(
            space, g0=vals.reshape(space.mesh.n_elements, space.n_quad))

    u_pic = np.zeros(space.n_dofs)
    for _ in range(400):
        resid = load_f - stiff @ u_pic - nonlinear_term(u_pic)
        u_pic = u_pic + 0.5 * np.linalg.solve(stiff, resid)
    assert np.max(np.abs(u.values - u_pic)) < 1e-8


def test_newton_jacobian_matches_finite_differences():
    prob = interval_problem(16, lam=0.25)
    rng = np.random.default_rng(8)
    space = prob.space
    u = NodalField(space, 0.3 * rng.normal(size=space.n_dofs))
    v = rng.normal(size=space.n_dofs)
    m = NodalField.zeros(space)
    jac = hjb_jacobian(prob, u)
    eps = 1e-6
    up = NodalField(space, u.values + eps * v)
    dn = NodalField(space, u.values - eps * v)
    fd = (hjb_residual(prob, m, up) - hjb_residual(prob, m, dn)) / (2 * eps)
    jv = jac.matrix @ v
    scale = np.abs(jv).max() + 1.0
    assert np.max(np.abs(jv - fd)) / scale < 1e-5


# -- HJB, Howard -------------------------------------------------------------------

def test_howard_zero_data_single_iteration():
    prob = interval_problem(8, g0=0.0)
    u, drift = solve_hjb_howard(prob, NodalField.zeros(prob.space))
    assert np.all(u.values == 0.0)
    assert np.all(np.abs(drift) <= prob.hamiltonian.l_h)


def test_howard_single_control_single_solve():
    # single affine control: one policy, one linear solve
    prob = interval_problem(8, controls=((1.0, 0.5),), g0=1.0)
    u, drift = solve_hjb_howard(prob, NodalField.zeros(prob.space))
    assert np.all(drift == 1.0)
    space = prob.space
    stab = build_stabilization(space, 1.0, 0.5)
    stiff = assemble_stiffness(space, 1.0, stab)
    conv = assemble_convection(space, 1.0)
    from mfgfem.fem import assemble_load
    rhs = assemble_load(space, g0=0.5)
    direct = linear_solve(stiff + conv, rhs)
    assert np.max(np.abs(u.values - direct)) < 1e-12


def test_howard_benchmark_policy_antisymmetric():
    prob = interval_problem(16)
    sol = solve_mfg(prob)
    xs = prob.space.quad_points[:, :, 0]
    d = sol.drift[:, :, 0]
    assert np.all(d[xs < 0.5] == 1.0)
    assert np.all(d[xs > 0.5] == -1.0)


def test_howard_cycling_detected_and_fallback_recovers():
    # a non-monotone operator (tiny diffusion, large drift, stabilization
    # disabled) makes the policy flip-flop; the regularized fallback converges
    mesh = build_structured(DomainTag.UNIT_INTERVAL, 16)
    space = P1Space(mesh)
    prob = MfgProblem(
        nu=0.02, space=space,
        hamiltonian=PolyhedralHamiltonian([(5.0, 0.0), (-5.0, 0.0)]),
        coupling=CouplingF(CouplingKind.LOCAL_LINEAR, kappa=1.0),
        source=SourceG(g0=lambda x: 1.0 + np.sin(3 * np.pi * x[:, 0]) ** 2),
        lam=None, sigma=0.0)
    cfg = SolverConfig(sigma_escalation_max=0)
    with pytest.raises(PolicyCycling) as err:
        solve_mfg(prob, cfg)
    assert err.value.cycle_length >= 2
    sol = solve_mfg(prob, cfg, fallback_lambda=0.25)
    assert sol.telemetry.fallback_lambda == 0.25
    assert any("fell back" in note for note in sol.telemetry.notes)


# -- KFP ------------------------------------------------------------------------

def test_kfp_1d_nodally_exact():
    # b = 0 reduction with no stabilization: P1 Galerkin with exact loads is
    # nodally exact for -m'' = 1, giving m = x(1-x)/2 at the vertices
    prob = interval_problem(4, sigma=0.0)
    m = solve_kfp(prob, np.zeros((4, 2, 1)))
    x = prob.space.mesh.vertices[prob.space.interior_dofs, 0]
    assert np.max(np.abs(m.values - x * (1 - x) / 2)) < 1e-12
    assert np.isclose(m.values[1], 0.125)


def test_kfp_zero_source():
    prob = interval_problem(4, g0=0.0)
    m = solve_kfp(prob, np.zeros((4, 2, 1)))
    assert np.all(m.values == 0.0)


def test_kfp_2d_peak_value_against_series():
    space = P1Space(mesh_level(DomainTag.UNIT_SQUARE, 6))  # n = 64
    prob = MfgProblem(
        nu=1.0, space=space,
        hamiltonian=PolyhedralHamiltonian([((1.0, 0.0), 0.0)]),
        coupling=CouplingF(CouplingKind.LOCAL_LINEAR, kappa=1.0),
        source=SourceG(g0=1.0), sigma=0.0)
    m = solve_kfp(prob, np.zeros((space.mesh.n_elements, 3, 2)))
    assert abs(m.values.max() - oracles.poisson_square_max()) < 2e-3


def test_kfp_nonnegative_under_certified_dmp():
    rng = np.random.default_rng(5)
    for level in (3, 4):
        space = P1Space(mesh_level(DomainTag.UNIT_SQUARE, level))
        ham = PolyhedralHamiltonian([((1.0, 0.0), 0.0), ((-1.0, 0.0), 0.0),
                                     ((0.0, 1.0), 0.0), ((0.0, -1.0), 0.0)])
        prob = MfgProblem(nu=1.0, space=space, hamiltonian=ham,
                          coupling=CouplingF(CouplingKind.LOCAL_LINEAR, 1.0),
                          source=SourceG(g0=1.0))
        for _ in range(5):
            theta = rng.uniform(0, 2 * np.pi, (space.mesh.n_elements, 1))
            r = rng.uniform(0, 1, (space.mesh.n_elements, 1))
            drift = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)
            drift = np.broadcast_to(drift, (space.mesh.n_elements, 3, 2)).copy()
            stab = build_stabilization(space, ham.l_h, prob.sigma)
            stiff = assemble_stiffness(space, prob.nu, stab)
            conv = assemble_convection(space, drift)
            from mfgfem.fem import kfp_operator
            report = verify_dmp(kfp_operator(stiff, conv), space)
            assert report.passed
            m = solve_kfp(prob, drift)
            assert m.values.min() >= -1e-12


# -- full MFG solves ---------------------------------------------------------------

def test_solve_mfg_certificate_1d_benchmark():
    cfg = SolverConfig()
    prob = interval_problem(64, lam=1.0 / 16.0)
    sol = solve_mfg(prob, cfg)
    rep = residuals(prob, sol.u, sol.m, sigma=sol.telemetry.sigma_final)
    scale = 10 * (cfg.outer_tol + cfg.inner_tol) * (1 + l2_norm(sol.m))
    assert rep.r1_dual_norm + rep.r2_dual_norm <= scale
    assert rep.r1_dual_norm + rep.r2_dual_norm <= 1e-7
    min_m, bad = nonnegativity_report(sol.m)
    assert min_m >= -1e-12 and len(bad) == 0


def test_solve_mfg_drift_admissible():
    prob = interval_problem(32, lam=0.125)
    sol = solve_mfg(prob)
    norms = np.linalg.norm(sol.drift, axis=2)
    assert np.all(norms <= prob.hamiltonian.l_h + 1e-12)


def test_solve_mfg_deterministic():
    prob = interval_problem(32, lam=0.125)
    a = solve_mfg(prob)
    b = solve_mfg(prob)
    assert np.array_equal(a.u.values, b.u.values)
    assert np.array_equal(a.m.values, b.m.values)
    assert a.telemetry.outer_residuals == b.telemetry.outer_residuals
    assert a.telemetry.inner_iterations == b.telemetry.inner_iterations


def test_solve_mfg_nonconvergence_error():
    prob = interval_problem(32, lam=0.125)
    with pytest.raises(NonConvergence) as err:
        solve_mfg(prob, SolverConfig(outer_max=2))
    assert len(err.value.residual_history) == 2


def test_solve_mfg_warm_start_matches_cold():
    prob = interval_problem(32, lam=0.125)
    cold = solve_mfg(prob)
    warm = solve_mfg(prob, u0=cold.u, m0=cold.m)
    assert warm.telemetry.outer_iterations <= 2
    assert l2_norm(NodalField(prob.space,
                              warm.m.values - cold.m.values)) < 1e-8


def test_solve_mfg_2d_dmp_certified_small_level(axes_hamiltonian):
    space = P1Space(mesh_level(DomainTag.UNIT_SQUARE, 4))
    prob = MfgProblem(nu=1.0, space=space, hamiltonian=axes_hamiltonian,
                      coupling=CouplingF(CouplingKind.LOCAL_LINEAR, 1.0),
                      source=SourceG(g0=1.0), lam=0.25)
    sol = solve_mfg(prob)
    assert sol.telemetry.dmp_certified
    assert sol.telemetry.sigma_escalations == 0
    assert sol.m.values.min() >= -1e-12


# -- linear_solve ------------------------------------------------------------------

def test_linear_solve_identity():
    rhs = np.arange(5.0)
    assert np.allclose(linear_solve(sp.identity(5, format="csr"), rhs), rhs)


def test_linear_solve_spd_constructed():
    space = P1Space(build_structured(DomainTag.UNIT_INTERVAL, 32))
    s = assemble_stiffness(space, nu=1.0)
    rhs = s.matrix @ np.ones(space.n_dofs)
    assert np.max(np.abs(linear_solve(s, rhs) - 1.0)) < 1e-10


def test_linear_solve_matches_dense_oracle():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(50, 50))
    a += np.diag(np.abs(a).sum(axis=1) + 1.0)
    rhs = rng.normal(size=50)
    x = linear_solve(sp.csr_matrix(a), rhs)
    assert np.max(np.abs(x - np.linalg.solve(a, rhs))) < 1e-9


def test_linear_solve_singular_reports():
    a = sp.csr_matrix(np.array([[1.0, 0.0], [1.0, 0.0]]))
    with pytest.raises(SingularOperator):
        linear_solve(a, np.ones(2))
