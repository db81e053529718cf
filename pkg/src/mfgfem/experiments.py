"""Experiment harness: config parsing, the CLI, and the rate studies.

Config files are flat ``key = value`` text with dotted sections, '#'
comments, and whitespace-separated vector literals; see the README for the
grammar.  The three studies realize the quantitative claims at desk scale:

  study-lambda   regularization error ||m_k - m_{k,lam}|| against lam at a
                 fixed mesh level (expected order 1/2)
  study-h        coupled schedule lam_k = c * h_k^(2*gamma/3), errors against
                 an overkill fine reference (proven order gamma/3)
  study-joint    the pairwise legs between the PDI solves, the regularized
                 solves, and fine-mesh stand-ins
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import diagnostics, fem, mesh as meshmod
from .coupling import CouplingF, CouplingKind
from .diagnostics import RateFit, fit_rate, residuals
from .fem import NodalField, P1Space, error_between, h1_norm, l2_norm
from .hamiltonian import PolyhedralHamiltonian
from .mesh import DomainTag, build_structured, refine_uniform
from .solver import (MfgProblem, MfgSolution, NonConvergence, SolverConfig,
                     SolverError, solve_mfg)
from .source import SourceG


class ConfigError(Exception):
    def __init__(self, message: str, line: Optional[int] = None,
                 path: str = "<config>"):
        self.line = line
        self.path = path
        where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


_SCALAR_FIELDS = {
    "zero": lambda x: np.zeros(x.shape[0]),
    "one": lambda x: np.ones(x.shape[0]),
    "x": lambda x: x[:, 0],
    "y": lambda x: x[:, 1],
    "bump": lambda x: np.prod(4.0 * x * (1.0 - x), axis=1),
}

_VECTOR_FIELDS = {
    "zero": lambda x: np.zeros_like(x),
    "swirl": lambda x: np.column_stack([x[:, 1] - 0.5, 0.5 - x[:, 0]]),
}

_DOMAINS = {
    "unit_interval": DomainTag.UNIT_INTERVAL,
    "unit_square": DomainTag.UNIT_SQUARE,
    "l_shape": DomainTag.L_SHAPE,
}

_KNOWN_KEYS = {
    "domain", "base_n", "levels.min", "levels.max", "gamma", "nu", "sigma",
    "lambda.mode", "lambda.value", "study.lambda_list",
    "hamiltonian.preset", "hamiltonian.controls",
    "coupling.kind", "coupling.kappa", "coupling.rho_scale", "coupling.F0",
    "source.g0", "source.g1",
    "solver.outer_tol", "solver.outer_max", "solver.inner_tol",
    "solver.inner_max", "solver.theta",
    "reference.finer_levels", "reference.use_pdi",
    "output_dir", "seed", "vtk", "threads",
}


@dataclass
class ExperimentConfig:
    domain: DomainTag
    k_min: int
    k_max: int
    gamma: float
    nu: float = 1.0
    sigma: float = 0.5
    base_n: int = 1
    lambda_mode: str = "coupled"  # fixed | coupled | none
    lambda_value: float = 1.0
    lambda_list: tuple = ()
    hamiltonian_spec: tuple = ()  # ((b, f), ...) resolved controls
    coupling_kind: CouplingKind = CouplingKind.LOCAL_LINEAR
    coupling_kappa: float = 1.0
    coupling_rho: float = 0.0
    coupling_f0 = 0.0
    source_g0 = 1.0
    source_g1 = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    reference_finer_levels: int = 2
    reference_use_pdi: bool = False
    output_dir: str = "out"
    seed: int = 0
    vtk: bool = False
    threads: int = 1

    def make_hamiltonian(self) -> PolyhedralHamiltonian:
        dim = 1 if self.domain == DomainTag.UNIT_INTERVAL else 2
        return PolyhedralHamiltonian(self.hamiltonian_spec, dim=dim)

    def make_coupling(self) -> CouplingF:
        return CouplingF(kind=self.coupling_kind, kappa=self.coupling_kappa,
                         f0=self.coupling_f0, rho_scale=self.coupling_rho)

    def make_source(self) -> SourceG:
        return SourceG(g0=self.source_g0, g1=self.source_g1)

    def lambda_at(self, h: float, level: int) -> Optional[float]:
        if self.lambda_mode == "none":
            return None
        if self.lambda_mode == "fixed":
            lam = self.lambda_value
        else:
            lam = self.lambda_value * h ** (2.0 * self.gamma / 3.0)
        if not (0.0 < lam <= 1.0):
            raise ConfigError(
                f"schedule gives lambda={lam:.6g} at level {level}; "
                "lambda must lie in (0, 1] (reduce the constant c)")
        return lam


class _RawConfig:
    """Key/value pairs with the line numbers where they were set."""

    def __init__(self, entries: dict, path: str):
        self.entries = entries
        self.path = path

    def has(self, key):
        return key in self.entries

    def line(self, key):
        return self.entries[key][1]

    def raw(self, key, default=None):
        if key in self.entries:
            return self.entries[key][0]
        return default

    def _convert(self, key, conv, default, kind):
        if key not in self.entries:
            return default
        raw, line = self.entries[key]
        try:
            return conv(raw)
        except (ValueError, KeyError):
            raise ConfigError(f"expected {kind} for '{key}', got '{raw}'",
                              line, self.path) from None

    def get_int(self, key, default=None):
        return self._convert(key, int, default, "an integer")

    def get_float(self, key, default=None):
        return self._convert(key, float, default, "a number")

    def get_bool(self, key, default=None):
        def conv(raw):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        return self._convert(key, conv, default, "a boolean")

    def get_choice(self, key, choices, default=None):
        def conv(raw):
            if raw not in choices:
                raise ValueError(raw)
            return raw
        got = self._convert(key, conv, default,
                            "one of " + "/".join(sorted(choices)))
        return got

    def get_floats(self, key, default=()):
        def conv(raw):
            return tuple(float(tok) for tok in raw.split())
        return self._convert(key, conv, default, "a list of numbers")

    def get_scalar_field(self, key, default=0.0):
        if key not in self.entries:
            return default
        raw, line = self.entries[key]
        if raw in _SCALAR_FIELDS:
            return _SCALAR_FIELDS[raw]
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(
                f"'{key}' must be a number or one of "
                f"{sorted(_SCALAR_FIELDS)}, got '{raw}'", line, self.path) \
                from None

    def get_vector_field(self, key, default=None):
        if key not in self.entries:
            return default
        raw, line = self.entries[key]
        if raw in _VECTOR_FIELDS:
            return _VECTOR_FIELDS[raw]
        try:
            vec = np.array([float(tok) for tok in raw.split()])
        except ValueError:
            raise ConfigError(
                f"'{key}' must be numbers or one of "
                f"{sorted(_VECTOR_FIELDS)}, got '{raw}'", line, self.path) \
                from None
        return vec


def parse_config_text(text: str, path: str = "<config>") -> ExperimentConfig:
    entries = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", lineno, path)
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ConfigError("empty key or value", lineno, path)
        if key in entries:
            raise ConfigError(f"duplicate key '{key}' (first set on line "
                              f"{entries[key][1]})", lineno, path)
        entries[key] = (value, lineno)
    for key, (_, lineno) in entries.items():
        if key in _KNOWN_KEYS or key.startswith(("hamiltonian.b.",
                                                 "hamiltonian.f.")):
            continue
        raise ConfigError(f"unknown key '{key}'", lineno, path)
    raw = _RawConfig(entries, path)
    return _build_config(raw)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", path=str(path)) \
            from None
    return parse_config_text(text, str(path))


def _build_config(raw: _RawConfig) -> ExperimentConfig:
    path = raw.path
    domain_name = raw.get_choice("domain", set(_DOMAINS))
    if domain_name is None:
        raise ConfigError("missing required key 'domain'", path=path)
    domain = _DOMAINS[domain_name]
    k_min = raw.get_int("levels.min", 0)
    k_max = raw.get_int("levels.max", None)
    if k_max is None:
        raise ConfigError("missing required key 'levels.max'", path=path)
    if k_max < k_min:
        raise ConfigError("levels.max must be >= levels.min",
                          raw.line("levels.max"), path)
    default_gamma = 2.0 / 3.0 if domain == DomainTag.L_SHAPE else 1.0
    gamma = raw.get_float("gamma", default_gamma)
    if not (0.0 < gamma <= 1.0):
        raise ConfigError("gamma must lie in (0, 1]", raw.line("gamma"), path)
    base_n = raw.get_int("base_n", 2 if domain == DomainTag.L_SHAPE else 1)
    controls = _hamiltonian_controls(raw, domain)
    kind = raw.get_choice("coupling.kind",
                          {"local_linear", "local_saturating"},
                          "local_linear")
    solver = SolverConfig(
        outer_tol=raw.get_float("solver.outer_tol", 1e-9),
        outer_max=raw.get_int("solver.outer_max", 200),
        inner_tol=raw.get_float("solver.inner_tol", 1e-11),
        inner_max=raw.get_int("solver.inner_max", 50),
        theta=raw.get_float("solver.theta", 0.5),
    )
    cfg = ExperimentConfig(
        domain=domain, k_min=k_min, k_max=k_max, gamma=gamma,
        nu=raw.get_float("nu", 1.0), sigma=raw.get_float("sigma", 0.5),
        base_n=base_n,
        lambda_mode=raw.get_choice("lambda.mode",
                                   {"fixed", "coupled", "none"}, "coupled"),
        lambda_value=raw.get_float("lambda.value", 1.0),
        lambda_list=raw.get_floats("study.lambda_list", ()),
        hamiltonian_spec=controls,
        coupling_kind=CouplingKind(kind),
        coupling_kappa=raw.get_float("coupling.kappa", 1.0),
        coupling_rho=raw.get_float("coupling.rho_scale", 0.0),
        solver=solver,
        reference_finer_levels=raw.get_int("reference.finer_levels", 2),
        reference_use_pdi=raw.get_bool("reference.use_pdi", False),
        output_dir=raw.raw("output_dir", "out"),
        seed=raw.get_int("seed", 0),
        vtk=raw.get_bool("vtk", False),
        threads=raw.get_int("threads", 1),
    )
    cfg.coupling_f0 = raw.get_scalar_field("coupling.F0", 0.0)
    cfg.source_g0 = raw.get_scalar_field("source.g0", 1.0)
    cfg.source_g1 = raw.get_vector_field("source.g1", None)
    if cfg.nu <= 0:
        raise ConfigError("nu must be positive", raw.line("nu"), path)
    return cfg


def _hamiltonian_controls(raw: _RawConfig, domain: DomainTag):
    dim = 1 if domain == DomainTag.UNIT_INTERVAL else 2
    preset = raw.get_choice("hamiltonian.preset", {"abs", "axes", "custom"},
                            "abs" if dim == 1 else "axes")
    if preset == "abs":
        if dim != 1:
            raise ConfigError("preset 'abs' is one-dimensional",
                              raw.line("hamiltonian.preset"), raw.path)
        return ((1.0, 0.0), (-1.0, 0.0))
    if preset == "axes":
        if dim != 2:
            raise ConfigError("preset 'axes' is two-dimensional",
                              raw.line("hamiltonian.preset"), raw.path)
        return (((1.0, 0.0), 0.0), ((-1.0, 0.0), 0.0),
                ((0.0, 1.0), 0.0), ((0.0, -1.0), 0.0))
    count = raw.get_int("hamiltonian.controls", None)
    if count is None or count < 1:
        raise ConfigError("custom Hamiltonian needs 'hamiltonian.controls'",
                          path=raw.path)
    controls = []
    for i in range(count):
        b = raw.get_vector_field(f"hamiltonian.b.{i}", None)
        if b is None:
            raise ConfigError(f"missing 'hamiltonian.b.{i}'", path=raw.path)
        if not callable(b) and np.asarray(b).size != dim:
            raise ConfigError(
                f"'hamiltonian.b.{i}' has dimension "
                f"{np.asarray(b).size}, expected {dim}",
                raw.line(f"hamiltonian.b.{i}"), raw.path)
        f = raw.get_scalar_field(f"hamiltonian.f.{i}", 0.0)
        controls.append((b, f))
    return tuple(controls)


# -- meshes, problems, rows --------------------------------------------------

def mesh_chain(config: ExperimentConfig, top_level: int):
    """Nested meshes, level 0 up to top_level inclusive."""
    chain = [build_structured(config.domain, config.base_n)]
    for _ in range(top_level):
        chain.append(refine_uniform(chain[-1]))
    return chain


def problem_for(config: ExperimentConfig, space: P1Space,
                lam: Optional[float]) -> MfgProblem:
    return MfgProblem(nu=config.nu, space=space,
                      hamiltonian=config.make_hamiltonian(),
                      coupling=config.make_coupling(),
                      source=config.make_source(), lam=lam,
                      sigma=config.sigma)


def _prolong_warm_start(solution: MfgSolution, space: P1Space):
    p = meshmod.prolong_map(solution.u.space.mesh, space.mesh)
    idx = space.interior_dofs
    u0 = NodalField(space, (p @ solution.u.full())[idx])
    m0 = NodalField(space, (p @ solution.m.full())[idx])
    return u0, m0


@dataclass
class StudyRow:
    level: int
    h: float
    lam: float = math.nan
    err_u_h1: float = math.nan
    err_m_l2: float = math.nan
    r1_dual: float = math.nan
    r2_dual: float = math.nan
    outer_iters: int = 0
    seconds: float = 0.0
    note: str = ""


@dataclass
class StudyResult:
    rows: list
    fits: dict
    legs: list = field(default_factory=list)  # (level, h, lam, leg, value)

    def table_csv(self) -> str:
        lines = ["level,h,lambda,err_u_h1,err_m_l2,r1_dual,r2_dual,"
                 "outer_iters,seconds"]
        for r in self.rows:
            lines.append(
                f"{r.level},{_fmt(r.h)},{_fmt(r.lam)},{_fmt(r.err_u_h1)},"
                f"{_fmt(r.err_m_l2)},{_fmt(r.r1_dual)},{_fmt(r.r2_dual)},"
                f"{r.outer_iters},{_fmt(r.seconds)}")
        return "\n".join(lines) + "\n"

    def rates_csv(self) -> str:
        lines = ["column,slope,fit_residual,n_points"]
        for name in sorted(self.fits):
            fit = self.fits[name]
            lines.append(f"{name},{_fmt(fit.fitted_slope)},"
                         f"{_fmt(fit.fit_residual)},{len(fit.pairs)}")
        return "\n".join(lines) + "\n"

    def legs_csv(self) -> str:
        lines = ["level,h,lambda,leg,value"]
        for level, h, lam, leg, value in self.legs:
            lines.append(f"{level},{_fmt(h)},{_fmt(lam)},{leg},{_fmt(value)}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.csv").write_text(self.table_csv())
        (out / "rates.csv").write_text(self.rates_csv())
        if self.legs:
            (out / "joint.csv").write_text(self.legs_csv())


def _fmt(x) -> str:
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return f"{x:.16e}"


def _fit_or_skip(fits: dict, name: str, pairs) -> None:
    pairs = [(a, b) for a, b in pairs if a > 0 and b > 0 and math.isfinite(b)]
    if len(pairs) >= 2:
        fits[name] = fit_rate(pairs)


def _solve_level(config, space, lam, warm, fallback):
    problem = problem_for(config, space, lam)
    fallback_lambda = None
    if lam is None and fallback:
        h = meshmod.metrics(space.mesh).h_max
        fallback_lambda = min(1.0, h ** (2.0 * config.gamma / 3.0))
    u0 = m0 = None
    if warm is not None:
        u0, m0 = _prolong_warm_start(warm, space)
    solution = solve_mfg(problem, config.solver, u0=u0, m0=m0,
                         fallback_lambda=fallback_lambda)
    return problem, solution


def _row_from_solution(config, level, h, lam, problem, solution) -> StudyRow:
    row = StudyRow(level=level, h=h, lam=lam if lam is not None else math.nan,
                   outer_iters=solution.telemetry.outer_iterations,
                   seconds=solution.telemetry.seconds)
    eff_lam = lam if lam is not None else solution.telemetry.fallback_lambda
    if eff_lam is not None:
        rep = residuals(problem, solution.u, solution.m, lam=eff_lam,
                        sigma=solution.telemetry.sigma_final)
        row.r1_dual = rep.r1_dual_norm
        row.r2_dual = rep.r2_dual_norm
    return row


# -- studies -----------------------------------------------------------------

def study_h(config: ExperimentConfig, fallback: bool = False,
            threads: int = 1) -> StudyResult:
    """Solves with the lambda schedule on levels k_min..k_max against an
    overkill reference, with rate fits in h."""
    ref_level = config.k_max + config.reference_finer_levels
    chain = mesh_chain(config, ref_level)
    spaces = {k: P1Space(chain[k]) for k in
              list(range(config.k_min, config.k_max + 1)) + [ref_level]}
    rows = []
    solutions = {}
    warm = None
    for k in range(config.k_min, config.k_max + 1):
        h = meshmod.metrics(chain[k]).h_max
        lam = config.lambda_at(h, k)
        try:
            problem, solution = _solve_level(config, spaces[k], lam, warm,
                                             fallback)
        except SolverError as exc:
            rows.append(StudyRow(level=k, h=h,
                                 lam=lam if lam is not None else math.nan,
                                 note=f"solver failed: {exc}"))
            continue
        warm = solution
        solutions[k] = solution
        rows.append(_row_from_solution(config, k, h, lam, problem, solution))
    h_ref = meshmod.metrics(chain[ref_level]).h_max
    ref_lam = None if config.reference_use_pdi else config.lambda_at(
        h_ref, ref_level)
    _, reference = _solve_level(config, spaces[ref_level], ref_lam, warm,
                                fallback)
    for row in rows:
        if row.level in solutions:
            sol = solutions[row.level]
            l2_err, h1_err = error_between(sol.u, reference.u)
            row.err_u_h1 = h1_err
            row.err_m_l2 = error_between(sol.m, reference.m)[0]
    fits: dict = {}
    _fit_or_skip(fits, "err_u_h1", [(r.h, r.err_u_h1) for r in rows])
    _fit_or_skip(fits, "err_m_l2", [(r.h, r.err_m_l2) for r in rows])
    _fit_or_skip(fits, "err_total",
                 [(r.h, r.err_u_h1 + r.err_m_l2) for r in rows])
    return StudyResult(rows=rows, fits=fits)


def study_lambda(config: ExperimentConfig, fallback: bool = False,
                 threads: int = 1) -> StudyResult:
    """Distance between the PDI solve and the regularized solves at a fixed
    mesh level, one row per lambda."""
    if not config.lambda_list:
        raise ConfigError("study-lambda needs 'study.lambda_list'",
                          path="<config>")
    chain = mesh_chain(config, config.k_max)
    space = P1Space(chain[config.k_max])
    space.mass_operator()
    space.h1_operator()
    h = meshmod.metrics(chain[config.k_max]).h_max
    note = ""
    try:
        _, reference = _solve_level(config, space, None, None, False)
    except SolverError as exc:
        note = f"PDI reference failed ({exc}); finest-lambda solve substitutes"
        reference = None
    lam_list = tuple(sorted(config.lambda_list, reverse=True))

    def one(lam):
        started = time.perf_counter()
        try:
            problem, solution = _solve_level(config, space, lam, None, False)
            return lam, problem, solution, None
        except SolverError as exc:
            return lam, None, None, f"solver failed after "\
                f"{time.perf_counter() - started:.1f}s: {exc}"

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(one, lam_list))
    else:
        outcomes = [one(lam) for lam in lam_list]
    if reference is None:
        for lam, problem, solution, err in outcomes:
            if solution is not None:
                reference = solution
                break
        if reference is None:
            raise NonConvergence("every solve in the lambda study failed")
    rows = []
    for lam, problem, solution, err in outcomes:
        if solution is None:
            rows.append(StudyRow(level=config.k_max, h=h, lam=lam, note=err))
            continue
        row = _row_from_solution(config, config.k_max, h, lam, problem,
                                 solution)
        row.err_m_l2 = l2_norm(NodalField(
            space, reference.m.values - solution.m.values))
        row.err_u_h1 = h1_norm(NodalField(
            space, reference.u.values - solution.u.values))
        row.note = note
        rows.append(row)
    fits: dict = {}
    _fit_or_skip(fits, "err_m_l2", [(r.lam, r.err_m_l2) for r in rows])
    _fit_or_skip(fits, "err_u_h1", [(r.lam, r.err_u_h1) for r in rows])
    return StudyResult(rows=rows, fits=fits)


def study_joint(config: ExperimentConfig, fallback: bool = False,
                threads: int = 1) -> StudyResult:
    """All computable legs of the error diagram, one row per level per leg.

    Legs per level k (L2 norms of density differences, all exact through
    nested prolongation): 'total' |m_ref - m_k|, 'right' |m_k - m_{k,lam}|,
    'left' |m_ref - mhat_lam| and 'bottom' |mhat_lam - m_{k,lam}| where
    mhat_lam is the reference-mesh regularized solve at the same lambda.
    """
    ref_level = config.k_max + config.reference_finer_levels
    chain = mesh_chain(config, ref_level)
    levels = list(range(config.k_min, config.k_max + 1))
    spaces = {k: P1Space(chain[k]) for k in levels + [ref_level]}
    for sp in spaces.values():
        sp.mass_operator()
        sp.h1_operator()
    ref_space = spaces[ref_level]
    _, m_ref_sol = _solve_level(config, ref_space, None, None, fallback)
    lam_of = {}
    for k in levels:
        h = meshmod.metrics(chain[k]).h_max
        lam_of[k] = config.lambda_at(h, k)
        if lam_of[k] is None:
            raise ConfigError("study-joint needs a fixed or coupled lambda "
                              "schedule", path="<config>")

    def standin(k):
        _, sol = _solve_level(config, ref_space, lam_of[k], None, False)
        return k, sol

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            standins = dict(pool.map(standin, levels))
    else:
        standins = dict(standin(k) for k in levels)
    rows = []
    legs = []
    for k in levels:
        h = meshmod.metrics(chain[k]).h_max
        lam = lam_of[k]
        _, pdi_sol = _solve_level(config, spaces[k], None, None, fallback)
        problem, reg_sol = _solve_level(config, spaces[k], lam, None, False)
        mhat = standins[k]
        total = error_between(pdi_sol.m, m_ref_sol.m)[0]
        right = l2_norm(NodalField(
            spaces[k], pdi_sol.m.values - reg_sol.m.values))
        left = l2_norm(NodalField(
            ref_space, m_ref_sol.m.values - mhat.m.values))
        bottom = error_between(reg_sol.m, mhat.m)[0]
        legs.extend([(k, h, lam, "total", total), (k, h, lam, "left", left),
                     (k, h, lam, "bottom", bottom),
                     (k, h, lam, "right", right)])
        row = _row_from_solution(config, k, h, lam, problem, reg_sol)
        row.err_m_l2 = right
        rows.append(row)
    fits: dict = {}
    _fit_or_skip(fits, "leg_right_vs_lambda",
                 [(lam, v) for (_, _, lam, leg, v) in legs if leg == "right"])
    _fit_or_skip(fits, "leg_total_vs_h",
                 [(h, v) for (_, h, _, leg, v) in legs if leg == "total"])
    return StudyResult(rows=rows, fits=fits, legs=legs)


def run_solve(config: ExperimentConfig, fallback: bool = False,
              threads: int = 1):
    """One solve at level k_max; writes u.csv, m.csv, report.txt (+ .vtk)."""
    chain = mesh_chain(config, config.k_max)
    space = P1Space(chain[config.k_max])
    h = meshmod.metrics(chain[config.k_max]).h_max
    lam = config.lambda_at(h, config.k_max)
    problem, solution = _solve_level(config, space, lam, None, fallback)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    fem.write_field_csv(solution.u, out / "u.csv")
    fem.write_field_csv(solution.m, out / "m.csv")
    if config.vtk:
        meshmod.write_vtk(chain[config.k_max], out / "solution.vtk",
                          point_data={"u": solution.u.full(),
                                      "m": solution.m.full()})
    report = _solve_report(config, problem, solution, lam)
    (out / "report.txt").write_text(report)
    return solution


def _solve_report(config, problem, solution, lam) -> str:
    tele = solution.telemetry
    min_m, bad = diagnostics.nonnegativity_report(solution.m)
    lines = [
        "mfgfem solve report",
        f"mesh: {meshmod.summary_row(problem.space.mesh)}",
        f"lambda: {lam if lam is not None else 'none (PDI path)'}",
        f"outer iterations: {tele.outer_iterations}",
        f"inner iterations per outer step: {tele.inner_iterations}",
        f"final HJB residual (inf norm): {tele.hjb_residual:.6e}",
        f"sigma: {tele.sigma_final} after {tele.sigma_escalations} escalations",
        f"DMP certified: {tele.dmp_certified}",
        f"min nodal density: {min_m:.6e} ({len(bad)} nodes below -1e-12)",
        f"wall time: {tele.seconds:.3f} s",
    ]
    eff_lam = lam if lam is not None else tele.fallback_lambda
    if eff_lam is not None:
        rep = residuals(problem, solution.u, solution.m, lam=eff_lam,
                        sigma=tele.sigma_final)
        lines.append(f"residual dual norms: R1 {rep.r1_dual_norm:.6e}, "
                     f"R2 {rep.r2_dual_norm:.6e}")
    for note in tele.notes:
        lines.append(f"note: {note}")
    return "\n".join(lines) + "\n"


# -- CLI ----------------------------------------------------------------------

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mfgfem",
        description="Finite element studies for stationary MFG systems "
                    "with nondifferentiable Hamiltonians")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("solve", "study-h", "study-lambda", "study-joint"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--fallback", action="store_true",
                       help="fall back to lambda = h^(2*gamma/3) when the "
                            "unregularized path fails")
        p.add_argument("--threads", type=int, default=None)
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        if args.out is not None:
            config.output_dir = args.out
        threads = args.threads if args.threads is not None else config.threads
        if args.command == "solve":
            run_solve(config, fallback=args.fallback, threads=threads)
        else:
            study = {"study-h": study_h, "study-lambda": study_lambda,
                     "study-joint": study_joint}[args.command]
            result = study(config, fallback=args.fallback, threads=threads)
            result.write(config.output_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
