"""End-to-end acceptance checks; each prints one PASS/FAIL line."""

import filecmp
import math

import mpmath as mp
import numpy as np
import pytest

from bridgesteer.cli import closed_form_errors, main
from bridgesteer.gaussian_bridge import GaussianBridgeSolution, solve_constants, verify_ode_systems
from bridgesteer.grid_field import MadelungSeries, RealField, SpaceTimeGrid, laplacian_ratio_from_log
from bridgesteer.nelson_sim import (
    DEFAULT_SEED,
    GaussianDensity,
    SimulationConfig,
    entropy_estimate,
    gaussian_kl,
    marginal_test,
    sample_initial,
    simulate,
)
from bridgesteer.schrodinger_system import DriftField, FortetConfig, solve_bridge
from bridgesteer.steering import assemble_tilde_log, endpoint_checks, verify_schrodinger

W = math.pi
VAR = 1 / (2 * W)


def gaussian_rho(grid, mean):
    vals = np.exp(-W * (grid.x - mean) ** 2)
    return RealField(grid, vals / grid.integrate(vals), density=True)


def reference_pairs(sol, grid):
    return MadelungSeries(sol.series("reference_R", grid), sol.series("reference_S", grid))


def fortet(grid, sol):
    drift = DriftField.from_madelung(reference_pairs(sol, grid), name="reference")
    return solve_bridge(gaussian_rho(grid, 0.0), gaussian_rho(grid, 1.0), drift,
                        FortetConfig(max_iterations=50))


@pytest.fixture(scope="module")
def sol():
    return GaussianBridgeSolution.from_omega(W)


@pytest.fixture(scope="module")
def numeric(sol):
    grid = SpaceTimeGrid()
    return grid, fortet(grid, sol)


@pytest.fixture(scope="module")
def ensemble(sol):
    cfg = SimulationConfig(n_paths=100_000, dt_sim=1e-3, seed=DEFAULT_SEED, x_min=-10, x_max=10)
    bridge = DriftField.from_function(sol.bridge_drift, "bridge")
    ref = DriftField.from_function(sol.reference_drift, "reference")
    x0 = sample_initial(GaussianDensity(0.0, VAR), cfg.n_paths, cfg.seed)
    return cfg, bridge, ref, simulate(bridge, x0, cfg, reference_drift=ref), simulate(ref, x0, cfg)


def test_criterion_1_constants(acceptance):
    k = solve_constants(W)
    res = max(abs(v) for v in k.residuals().values())
    with mp.workdps(50):
        w = mp.pi
        e = mp.e**w
        D = 2 - 2 * e + w + w * e
        exact = {"m1": -(e - 1) / D, "m2": w * (e + 1) / D, "beta0": -2 * w / D,
                 "gamma0": w / 2 * (e - 1) ** 2 / D**2,
                 "d1": -w * (1 + e) * (1 - e + w + w * e) / D**2}
        rel = max(float(abs((mp.mpf(getattr(k, n)) - v) / v)) for n, v in exact.items())
    ok = res < 1e-9 and rel < 1e-12 and k.d0 == 0.0
    assert acceptance(1, "constants reproduction", ok, f"max residual {res:.2e}, max rel err {rel:.2e}")


def test_criterion_2_ode_suite(acceptance):
    worst_ode, worst_t0, worst_t1 = 0.0, 0.0, 0.0
    for w in (0.5, 1.0, W, 5.0):
        rep = verify_ode_systems(GaussianBridgeSolution.from_omega(w))
        worst_ode = max(worst_ode, *rep.max_residuals.values())
        worst_t0 = max(worst_t0, *(abs(v) for n, v in rep.constraints.items() if n.endswith("t0")))
        worst_t1 = max(worst_t1, *(abs(v) for n, v in rep.constraints.items() if n.endswith("t1")))
    ok = worst_ode < 1e-6 and worst_t0 < 1e-12 and worst_t1 < 1e-9
    assert acceptance(2, "ODE and constraint suite", ok,
                      f"ODE {worst_ode:.2e}, t0 constraints {worst_t0:.2e}, t1 constraints {worst_t1:.2e}")


def test_criterion_3_boundary_products(acceptance, sol):
    x = np.linspace(-4, 4, 8001)
    e0 = np.max(np.abs(sol.bridge_density(x, 0.0) - np.exp(-W * x**2)))
    e1 = np.max(np.abs(sol.bridge_density(x, 1.0) - np.exp(-W * (x - 1) ** 2)))
    ok = max(e0, e1) <= 1e-10
    assert acceptance(3, "boundary products", ok, f"t0 {e0:.2e}, t1 {e1:.2e}")


def test_criterion_4_numeric_vs_closed_form(acceptance, sol, numeric):
    grid, br = numeric
    e_phi, e_hat = closed_form_errors(br, sol)
    fine = fortet(grid.refined(), sol)
    f_phi, f_hat = closed_form_errors(fine, sol)
    ratio = max(e_phi, e_hat) / max(f_phi, f_hat)
    ok = (br.iterations <= 50 and br.final_marginal_error <= 1e-8
          and max(e_phi, e_hat) <= 1e-4 and ratio >= 3.0)
    assert acceptance(4, "Fortet solver against closed form", ok,
                      f"{br.iterations} iterations, L1 {br.final_marginal_error:.2e}, "
                      f"phi {e_phi:.2e}, phihat {e_hat:.2e}, refinement ratio {ratio:.2f}")


def test_criterion_5_controlled_evolution(acceptance, sol, numeric):
    grid, br = numeric
    V = sol.tabulate("reference_potential", grid)
    closed = assemble_tilde_log(reference_pairs(sol, grid), sol.tabulate("log_phi", grid),
                                sol.tabulate("log_phi_hat", grid)).with_potentials(V, 0.0)
    solved = assemble_tilde_log(reference_pairs(sol, grid), br.log_phi, br.log_phi_hat).with_potentials(V, 0.0)
    lr0, lr1 = -W * grid.x**2, -W * (grid.x - 1) ** 2
    rep = verify_schrodinger(closed.psi_tilde, closed.V_total)
    ends = endpoint_checks(closed, lr0, lr1)
    end = max(ends.modulus_t0, ends.modulus_t1, ends.phase_slope_t0, ends.phase_slope_t1)
    # the solved potentials carry the grid error bounded in criterion 4, which
    # reaches the phase at the 1e-6 level; their phase flatness is reported only
    rep_n = verify_schrodinger(solved.psi_tilde, solved.V_total)
    ends_n = endpoint_checks(solved, lr0, lr1)
    mod_n = max(ends_n.modulus_t0, ends_n.modulus_t1)
    phase_n = max(ends_n.phase_slope_t0, ends_n.phase_slope_t1)
    ok = rep.passed and end <= 1e-6 and rep_n.passed and mod_n <= 1e-6
    assert acceptance(5, "controlled Schrödinger equation and endpoints", ok,
                      f"closed form: residual/threshold {rep.max_residual / rep.threshold:.3f}, "
                      f"endpoint deviation {end:.2e}; solved: residual/threshold "
                      f"{rep_n.max_residual / rep_n.threshold:.3f}, modulus {mod_n:.2e}, "
                      f"phase flatness {phase_n:.2e}")


def test_criterion_6_potential_invariance(acceptance, sol, numeric):
    grid, br = numeric
    pairs = reference_pairs(sol, grid)
    V = sol.tabulate("reference_potential", grid)
    worst = 0.0
    for lp, lph in ((sol.tabulate("log_phi", grid), sol.tabulate("log_phi_hat", grid)),
                    (br.log_phi, br.log_phi_hat)):
        ev = assemble_tilde_log(pairs, lp, lph).with_potentials(V, 0.0)
        lhs = ev.V_c.values - laplacian_ratio_from_log(ev.R_tilde.values, grid.dx)
        rhs = V - laplacian_ratio_from_log(pairs.R.values, grid.dx)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    assert acceptance(6, "potential invariance with V_i = 0", worst <= 1e-10, f"max deviation {worst:.2e}")


def test_criterion_7_monte_carlo_steering(acceptance, ensemble):
    cfg, bridge, ref, ens, ens_ref = ensemble
    rep = marginal_test(ens, 1.0, GaussianDensity(1.0, VAR))
    rej = marginal_test(ens_ref, 1.0, GaussianDensity(1.0, VAR))
    ok = rep.passed and not rej.passed and ens.clamp_count == 0
    assert acceptance(7, "Monte Carlo steering", ok,
                      f"bridge mean {rep.mean:.5f} (band {rep.mean_band:.5f}), var {rep.var:.5f} "
                      f"vs {VAR:.5f}, KS {rep.ks_stat:.5f} < {rep.ks_threshold:.5f}; "
                      f"reference mean {rej.mean:.4f} rejected")


def test_criterion_8_entropy(acceptance, sol, ensemble):
    cfg, bridge, ref, ens, _ = ensemble
    k = sol.constants
    path_exact = k.beta0**2 * math.expm1(2 * W) / (4 * W)
    lr = entropy_estimate(ens, ref, bridge, method="likelihood")
    act = entropy_estimate(ens, ref, bridge, method="action")
    # trapezoid error bound for the deterministic integrand beta(t)^2 / 2
    quad = cfg.dt_sim**2 / 12 * (2 * W) ** 2 * 0.5 * k.beta0**2 * math.exp(2 * W)
    marginal = gaussian_kl(GaussianDensity(0.0, VAR), GaussianDensity(k.m1, VAR))
    ok = abs(lr.path_term - path_exact) <= 2 * lr.stderr and abs(act.path_term - path_exact) <= quad
    assert acceptance(8, "relative entropy", ok,
                      f"path term exact {path_exact:.6f}, likelihood {lr.path_term:.6f} +- {lr.stderr:.6f}, "
                      f"action {act.path_term:.7f}; marginal term {marginal:.6f}, "
                      f"total {path_exact + marginal:.6f}")


def test_criterion_9_determinism(acceptance, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("mode = gaussian-example\nn_paths = 20000\n")
    codes = [main(["--config", str(cfg), "--out", str(tmp_path / d), "--quiet"]) for d in ("a", "b")]
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    csvs = [n for n in names if n.endswith(".csv")]
    ok = codes == [0, 0] and not mismatch and not errors and len(csvs) > 5 and set(csvs) <= set(match)
    assert acceptance(9, "determinism", ok,
                      f"{len(match)} files byte-identical, {len(mismatch)} differ, exit codes {codes}")
