import math

import numpy as np
import pytest

from mfgfem import DomainTag, fit_rate
from mfgfem.experiments import (ConfigError, ExperimentConfig, load_config,
                                main, mesh_chain, parse_config_text,
                                study_h, study_joint, study_lambda)

BENCH_1D = """
# 1D benchmark: H(p) = |p|
domain = unit_interval
levels.min = 2
levels.max = 4
nu = 1.0
sigma = 0.5
hamiltonian.preset = abs
coupling.kind = local_linear
coupling.kappa = 1.0
source.g0 = 1.0
lambda.mode = coupled
lambda.value = 1.0
reference.finer_levels = 2
study.lambda_list = 0.25 0.0625 0.015625
"""


def test_parse_benchmark_config():
    cfg = parse_config_text(BENCH_1D)
    assert cfg.domain == DomainTag.UNIT_INTERVAL
    assert (cfg.k_min, cfg.k_max) == (2, 4)
    assert cfg.gamma == 1.0
    assert cfg.lambda_list == (0.25, 0.0625, 0.015625)
    assert len(cfg.hamiltonian_spec) == 2


def test_parse_reports_line_numbers():
    with pytest.raises(ConfigError) as err:
        parse_config_text("domain = unit_interval\nlevels.max = oops\n",
                          path="bad.cfg")
    assert "bad.cfg:2" in str(err.value)
    with pytest.raises(ConfigError) as err:
        parse_config_text("domain = unit_interval\nnonsense_key = 1\n")
    assert "nonsense_key" in str(err.value)
    with pytest.raises(ConfigError) as err:
        parse_config_text("domain = unit_interval\njust a line\n")
    assert ":2" in str(err.value)


def test_parse_rejects_duplicates_and_bad_values():
    with pytest.raises(ConfigError):
        parse_config_text("domain = unit_interval\ndomain = unit_square\n")
    with pytest.raises(ConfigError):
        parse_config_text("domain = moon\n")
    with pytest.raises(ConfigError):
        parse_config_text("domain = unit_interval\nlevels.max = 2\n"
                          "gamma = 1.5\n")


def test_custom_hamiltonian_controls():
    text = """
domain = unit_square
levels.max = 2
hamiltonian.preset = custom
hamiltonian.controls = 2
hamiltonian.b.0 = 1.0 0.5
hamiltonian.f.0 = 0.25
hamiltonian.b.1 = -1.0 0.0
"""
    cfg = parse_config_text(text)
    ham = cfg.make_hamiltonian()
    assert ham.n_controls == 2
    value, idx = ham.value((0.0, 0.0), (1.0, 0.0))
    assert np.isclose(value, 0.75) and idx == 0


def test_schedule_correctness():
    cfg = parse_config_text(BENCH_1D)
    chain = mesh_chain(cfg, 4)
    from mfgfem import metrics
    for k in range(2, 5):
        h = metrics(chain[k]).h_max
        lam = cfg.lambda_at(h, k)
        assert abs(lam - h ** (2.0 / 3.0)) <= 1e-15


def test_schedule_rejects_lambda_above_one():
    cfg = parse_config_text(BENCH_1D.replace("lambda.value = 1.0",
                                             "lambda.value = 10.0"))
    with pytest.raises(ConfigError):
        cfg.lambda_at(0.5, 1)


def test_schedule_lambda_in_range():
    cfg = parse_config_text(BENCH_1D)
    assert cfg.lambda_at(1.0 / 64, 6) == (1.0 / 64) ** (2.0 / 3.0)


# -- studies -----------------------------------------------------------------

@pytest.fixture(scope="module")
def lambda_study_result():
    cfg = parse_config_text(BENCH_1D)
    cfg.k_max = 5
    return study_lambda(cfg)


def test_study_lambda_rows_and_fit(lambda_study_result):
    res = lambda_study_result
    assert [r.lam for r in res.rows] == [0.25, 0.0625, 0.015625]
    assert all(r.err_m_l2 >= 0 for r in res.rows)
    assert "err_m_l2" in res.fits
    assert res.fits["err_m_l2"].fitted_slope > 0.4


def test_study_lambda_csv_schema(lambda_study_result, tmp_path):
    lambda_study_result.write(tmp_path)
    table = (tmp_path / "table.csv").read_text().splitlines()
    assert table[0] == ("level,h,lambda,err_u_h1,err_m_l2,r1_dual,r2_dual,"
                        "outer_iters,seconds")
    assert len(table) == 4
    rates = (tmp_path / "rates.csv").read_text().splitlines()
    assert rates[0] == "column,slope,fit_residual,n_points"


def test_study_lambda_single_control_identically_zero():
    text = BENCH_1D.replace("hamiltonian.preset = abs", """hamiltonian.preset = custom
hamiltonian.controls = 1
hamiltonian.b.0 = 1.0
hamiltonian.f.0 = 0.0""")
    cfg = parse_config_text(text)
    res = study_lambda(cfg)
    # one control: envelope gradient equals the drift, both paths coincide
    assert all(r.err_m_l2 < 1e-10 for r in res.rows)
    assert "err_m_l2" not in res.fits  # zero errors leave nothing to fit


def test_study_lambda_threads_match_serial(lambda_study_result):
    cfg = parse_config_text(BENCH_1D)
    cfg.k_max = 5
    threaded = study_lambda(cfg, threads=3)
    for a, b in zip(threaded.rows, lambda_study_result.rows):
        assert a.err_m_l2 == b.err_m_l2


def test_study_h_smoke_and_monotone_errors():
    cfg = parse_config_text(BENCH_1D)
    res = study_h(cfg)
    errs = [r.err_u_h1 + r.err_m_l2 for r in res.rows]
    assert len(errs) == 3 and all(np.isfinite(errs))
    assert "err_total" in res.fits
    assert res.fits["err_total"].fitted_slope > 0.3


def test_study_h_single_control_first_order():
    # smooth single-control system behaves like plain P1 for a linear
    # convection-diffusion pair; lambda fixed so every level solves the same
    # regularized equation and only the discretization error remains
    text = BENCH_1D.replace("hamiltonian.preset = abs", """hamiltonian.preset = custom
hamiltonian.controls = 1
hamiltonian.b.0 = 1.0
hamiltonian.f.0 = 0.0""")
    text = text.replace("lambda.mode = coupled", "lambda.mode = fixed")
    text = text.replace("lambda.value = 1.0", "lambda.value = 0.25")
    cfg = parse_config_text(text)
    cfg.k_min, cfg.k_max = 2, 5
    res = study_h(cfg)
    assert abs(res.fits["err_u_h1"].fitted_slope - 1.0) < 0.15


def test_study_h_degenerate_single_level():
    cfg = parse_config_text(BENCH_1D)
    cfg.k_min = cfg.k_max = 3
    res = study_h(cfg)
    assert len(res.rows) == 1
    assert res.fits == {}


def test_study_joint_triangle_inequality():
    # deeper levels so the right leg is past its preasymptotic bend
    cfg = parse_config_text(BENCH_1D)
    cfg.k_min, cfg.k_max = 5, 8
    res = study_joint(cfg)
    legs = {}
    for level, h, lam, leg, value in res.legs:
        legs.setdefault(level, {})[leg] = value
    for level, got in legs.items():
        assert set(got) == {"total", "left", "bottom", "right"}
        assert got["total"] <= got["left"] + got["bottom"] + got["right"] \
            + 1e-9
    assert res.fits["leg_right_vs_lambda"].fitted_slope > 0.45


# -- CLI ---------------------------------------------------------------------

def write_cfg(tmp_path, text):
    path = tmp_path / "config.cfg"
    path.write_text(text)
    return str(path)


def test_cli_solve_writes_artifacts(tmp_path):
    text = BENCH_1D.replace("lambda.mode = coupled", "lambda.mode = fixed")
    text = text.replace("lambda.value = 1.0", "lambda.value = 0.125")
    cfg = write_cfg(tmp_path, text + "vtk = true\n")
    code = main(["solve", "--config", cfg, "--out", str(tmp_path / "out")])
    assert code == 0
    out = tmp_path / "out"
    assert (out / "u.csv").exists() and (out / "m.csv").exists()
    report = (out / "report.txt").read_text()
    assert "residual dual norms" in report
    assert (out / "solution.vtk").exists()
    header = (out / "u.csv").read_text().splitlines()[0]
    assert header == "vertex_id,x,value"


def test_cli_zero_data_single_outer(tmp_path):
    cfg = write_cfg(tmp_path, BENCH_1D.replace("source.g0 = 1.0",
                                               "source.g0 = 0.0"))
    code = main(["solve", "--config", cfg, "--out", str(tmp_path / "out")])
    assert code == 0
    report = (tmp_path / "out" / "report.txt").read_text()
    assert "outer iterations: 1" in report


def test_cli_malformed_config_exit_2(tmp_path):
    cfg = write_cfg(tmp_path, "domain = unit_interval\nlevels.max = oops\n")
    assert main(["solve", "--config", cfg]) == 2
    assert main(["solve", "--config", str(tmp_path / "missing.cfg")]) == 2


def test_cli_solver_failure_exit_1(tmp_path):
    text = BENCH_1D.replace("lambda.mode = coupled", "lambda.mode = fixed")
    text = text.replace("lambda.value = 1.0", "lambda.value = 0.125")
    cfg = write_cfg(tmp_path, text + "solver.outer_max = 1\n")
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "o")]) == 1


def test_cli_study_reproducible_bytes(tmp_path):
    cfg = write_cfg(tmp_path, BENCH_1D + "seed = 3\n")
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["study-lambda", "--config", cfg, "--out", str(out1)]) == 0
    assert main(["study-lambda", "--config", cfg, "--out", str(out2)]) == 0

    def strip_seconds(path):
        # the wall-clock column is the one legitimately volatile field
        lines = path.read_text().splitlines()
        return ["\n".join(line.rsplit(",", 1)[0] for line in lines)]

    assert strip_seconds(out1 / "table.csv") == strip_seconds(out2 / "table.csv")
    assert (out1 / "rates.csv").read_bytes() == (out2 / "rates.csv").read_bytes()


def test_cli_study_joint_writes_legs(tmp_path):
    cfg = write_cfg(tmp_path, BENCH_1D)
    out = tmp_path / "joint"
    assert main(["study-joint", "--config", cfg, "--out", str(out)]) == 0
    lines = (out / "joint.csv").read_text().splitlines()
    assert lines[0] == "level,h,lambda,leg,value"
    assert len(lines) == 1 + 4 * 3  # four legs per level, three levels
