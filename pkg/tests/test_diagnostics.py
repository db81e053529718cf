import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfgfem import (CouplingF, CouplingKind, DomainTag, MfgProblem,
                    NodalField, P1Space, PolyhedralHamiltonian, SourceG,
                    build_structured, fit_rate, nonnegativity_report,
                    residuals, solve_mfg)
from mfgfem.diagnostics import dual_norm


def make_problem(g0=1.0, lam=0.25):
    space = P1Space(build_structured(DomainTag.UNIT_INTERVAL, 16))
    return MfgProblem(
        nu=1.0, space=space,
        hamiltonian=PolyhedralHamiltonian([(1.0, 0.0), (-1.0, 0.0)]),
        coupling=CouplingF(CouplingKind.LOCAL_LINEAR, kappa=1.0),
        source=SourceG(g0=g0), lam=lam)


# -- residuals ------------------------------------------------------------------

def test_residuals_zero_data_zero_fields():
    prob = make_problem(g0=0.0)
    z = NodalField.zeros(prob.space)
    rep = residuals(prob, z, z)
    assert rep.r1_dual_norm == 0.0 and rep.r2_dual_norm == 0.0
    assert rep.r1_inf == 0.0 and rep.r2_inf == 0.0


def test_residuals_small_at_converged_solution():
    prob = make_problem()
    sol = solve_mfg(prob)
    rep = residuals(prob, sol.u, sol.m, sigma=sol.telemetry.sigma_final)
    assert rep.dual_total <= 1e-8


def test_residuals_require_lambda_for_pdi():
    prob = make_problem(lam=None)
    z = NodalField.zeros(prob.space)
    with pytest.raises(ValueError):
        residuals(prob, z, z)
    residuals(prob, z, z, lam=0.5)


def test_dual_norm_homogeneity():
    # scaling the source by c scales the zero-field KFP residual by |c|
    prob = make_problem(g0=1.0)
    prob3 = make_problem(g0=3.0)
    z = NodalField.zeros(prob.space)
    r1 = residuals(prob, z, z)
    r3 = residuals(prob3, z, z, lam=prob.lam)
    assert np.isclose(r3.r2_dual_norm, 3 * r1.r2_dual_norm, rtol=1e-12)


def test_dual_norm_zero_functional():
    space = P1Space(build_structured(DomainTag.UNIT_INTERVAL, 8))
    assert dual_norm(space, np.zeros(space.n_dofs)) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_dual_norm_dominates_basis_evaluations(seed):
    # |<R, xi_i>| / ||xi_i||_H1 is a lower bound for the sup definition
    space = P1Space(build_structured(DomainTag.UNIT_INTERVAL, 16))
    rng = np.random.default_rng(seed)
    coeffs = rng.normal(size=space.n_dofs)
    norm = dual_norm(space, coeffs)
    h1 = space.h1_operator().matrix
    basis_h1 = np.sqrt(h1.diagonal())
    assert np.all(np.abs(coeffs) / basis_h1 <= norm + 1e-12)


# -- fit_rate -------------------------------------------------------------------

def test_fit_rate_slope_one():
    assert np.isclose(fit_rate([(0.1, 0.1), (0.05, 0.05)]).fitted_slope, 1.0)


def test_fit_rate_slope_two():
    fit = fit_rate([(0.1, 0.01), (0.05, 0.0025)])
    assert np.isclose(fit.fitted_slope, 2.0)


def test_fit_rate_exact_power_data():
    hs = [2.0 ** -k for k in range(2, 6)]
    fit = fit_rate([(h, 3.0 * np.sqrt(h)) for h in hs])
    assert abs(fit.fitted_slope - 0.5) < 1e-12
    assert fit.fit_residual < 1e-12


def test_fit_rate_rejects_bad_input():
    with pytest.raises(ValueError):
        fit_rate([(0.1, 0.1)])
    with pytest.raises(ValueError):
        fit_rate([(0.1, 0.0), (0.05, 0.1)])


# -- nonnegativity ----------------------------------------------------------------

def test_nonnegativity_zero_field():
    space = P1Space(build_structured(DomainTag.UNIT_INTERVAL, 8))
    min_val, bad = nonnegativity_report(NodalField.zeros(space))
    assert min_val == 0.0 and len(bad) == 0


def test_nonnegativity_flags_negative_node():
    space = P1Space(build_structured(DomainTag.UNIT_INTERVAL, 8))
    values = np.zeros(space.n_dofs)
    values[3] = -1.0
    min_val, bad = nonnegativity_report(NodalField(space, values))
    assert min_val == -1.0
    assert list(bad) == [space.interior_dofs[3]]


def test_nonnegativity_of_converged_density():
    sol = solve_mfg(make_problem())
    min_val, bad = nonnegativity_report(sol.m)
    assert min_val >= -1e-12 and len(bad) == 0
