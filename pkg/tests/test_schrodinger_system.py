import math

import numpy as np
import pytest

from bridgesteer.errors import ConfigError, InvalidField, NoConvergence, NonpositivePhi
from bridgesteer.gaussian_bridge import GaussianBridgeSolution
from bridgesteer.grid_field import MadelungSeries, RealField, SpaceTimeGrid
from bridgesteer.schrodinger_system import (
    DriftField,
    FortetConfig,
    bridge_drift,
    propagate_phi_backward,
    propagate_phihat_forward,
    solve_bridge,
)

SMALL = SpaceTimeGrid(-6.0, 7.0, 257, 0.0, 1.0, 129)


def gauss(grid, mean, var):
    vals = np.exp(-((grid.x - mean) ** 2) / (2 * var))
    return RealField(grid, vals / grid.integrate(vals), density=True)


def reference_drift(grid, omega=math.pi):
    sol = GaussianBridgeSolution.from_omega(omega)
    pairs = MadelungSeries(sol.series("reference_R", grid), sol.series("reference_S", grid))
    return sol, DriftField.from_madelung(pairs, name="reference")


def test_zero_drift_constant_phi():
    g = SMALL
    phi = propagate_phi_backward(RealField(g, np.ones(g.n_x)), DriftField.zero())
    np.testing.assert_allclose(phi.values, 1.0, atol=1e-13)


def test_affine_terminal_heat_solution():
    g = SMALL
    a = 0.7
    phi = propagate_phi_backward(RealField(g, np.exp(a * g.x)), DriftField.zero())
    exact = a * g.x[None, :] + 0.5 * a**2 * (1 - g.t[:, None])
    np.testing.assert_allclose(np.log(phi.values), exact, atol=1e-10)


def test_heat_kernel_variance_and_mass():
    g = SMALL
    rho = gauss(g, 0.5, 0.1)
    out = propagate_phihat_forward(rho, DriftField.zero())
    x = g.x
    for k in (0, 64, 128):
        p = out.values[k]
        mass = g.integrate(p)
        mean = g.integrate(x * p) / mass
        var = g.integrate((x - mean) ** 2 * p) / mass
        assert mass == pytest.approx(1.0, abs=1e-12)
        assert var == pytest.approx(0.1 + g.t[k], rel=1e-3)


def test_ou_forward_mass_conserved():
    g = SMALL
    drift = DriftField.from_function(lambda x, t: -2.0 * (x - 0.5), name="ou")
    out = propagate_phihat_forward(gauss(g, -1.0, 0.3), drift)
    np.testing.assert_allclose(g.integrate(out.values), 1.0, atol=1e-12)
    # mean relaxes as 0.5 + (-1.5) e^{-2t}
    mean1 = g.integrate(g.x * out.values[-1])
    assert mean1 == pytest.approx(0.5 - 1.5 * math.exp(-2.0), abs=2e-4)


def test_closed_form_propagation():
    g = SpaceTimeGrid()
    sol, drift = reference_drift(g)
    phi = propagate_phi_backward(RealField(g, sol.phi(g.x, 1.0)), drift)
    phih = propagate_phihat_forward(RealField(g, sol.phi_hat(g.x, 0.0)), drift)
    inner = np.abs(g.x) <= 4
    exact = sol.tabulate("log_phi", g)
    exact_h = sol.tabulate("log_phi_hat", g)
    assert np.max(np.abs(np.expm1(np.log(phi.values) - exact)[:, inner])) < 1e-5
    assert np.max(np.abs(np.expm1(np.log(phih.values) - exact_h)[:, inner])) < 1e-5


def test_self_bridge_converges_fast():
    # rho1 is the free evolution of rho0, so the reference already bridges them
    g = SpaceTimeGrid(-12.0, 12.0, 257, 0.0, 1.0, 129)
    rho0 = gauss(g, 0.0, 0.2)
    out = propagate_phihat_forward(rho0, DriftField.zero())
    rho1 = RealField(g, out.values[-1] / g.integrate(out.values[-1]), density=True)
    br = solve_bridge(rho0, rho1, DriftField.zero())
    assert br.iterations <= 2
    np.testing.assert_allclose(br.log_phi, br.log_phi[0, 0], atol=1e-8)


def test_gaussian_bridge_matches_closed_form_small_grid():
    g = SMALL
    sol, drift = reference_drift(g)
    w = sol.omega
    br = solve_bridge(gauss(g, 0.0, 1 / (2 * w)), gauss(g, 1.0, 1 / (2 * w)), drift)
    assert br.monotone and not br.floor_active and br.edges_resolved
    assert br.final_marginal_error <= 1e-8
    mass = g.integrate(br.rho.values)
    np.testing.assert_allclose(mass, 1.0, atol=1e-6)
    mean = g.integrate(g.x * br.rho.values)
    np.testing.assert_allclose(mean, sol.bridge_mean(g.t), atol=5e-4)


def test_bimodal_target():
    g = SMALL
    _, drift = reference_drift(g)
    vals = np.exp(-2 * math.pi * (g.x - 0.3) ** 2) + np.exp(-2 * math.pi * (g.x - 1.7) ** 2)
    rho1 = RealField(g, vals / g.integrate(vals), density=True)
    br = solve_bridge(gauss(g, 0.0, 1 / (2 * math.pi)), rho1, drift)
    assert br.monotone
    assert br.history[-1].err_t1 <= 1e-8
    np.testing.assert_allclose(br.rho.values[-1], rho1.values, atol=1e-7)
    assert np.all(np.isfinite(br.log_rho))


def test_iteration_log(tmp_path):
    g = SMALL
    br = solve_bridge(gauss(g, 0, 0.3), gauss(g, 0.5, 0.3), DriftField.zero())
    p = br.write_iterations_csv(tmp_path / "it.csv")
    lines = p.read_text().splitlines()
    assert lines[0] == "iter,err_t0,err_t1,seconds"
    assert len(lines) == br.iterations + 1
    assert lines[1].endswith(",nan")


def test_no_convergence_carries_history():
    g = SMALL
    with pytest.raises(NoConvergence) as info:
        solve_bridge(gauss(g, -2, 0.2), gauss(g, 2, 0.2), DriftField.zero(),
                     FortetConfig(max_iterations=1))
    assert len(info.value.history) == 1


def test_input_validation():
    g = SMALL
    rho = gauss(g, 0, 0.3)
    with pytest.raises(InvalidField):
        solve_bridge(rho, RealField(g, rho.values), DriftField.zero())
    with pytest.raises(InvalidField):
        solve_bridge(rho, gauss(SpaceTimeGrid(-6, 7, 129, 0, 1, 129), 0, 0.3), DriftField.zero())
    with pytest.raises(NonpositivePhi):
        propagate_phi_backward(RealField(g, np.zeros(g.n_x)), DriftField.zero())
    with pytest.raises(ConfigError):
        FortetConfig(substeps=0)


def test_drift_table_interpolation():
    g = SpaceTimeGrid(0, 1, 16, 0, 1, 3)
    table = g.x[None, :] + 10 * g.t[:, None]
    d = DriftField(grid=g, table=table)
    assert d(np.array([0.5]), 0.25)[0] == pytest.approx(0.5 + 2.5)
    assert d(np.array([5.0]), 1.0)[0] == pytest.approx(1.0 + 10.0)
    np.testing.assert_allclose(d.on_grid(g), table)
    both = d.plus(lambda x, t: np.ones_like(x))
    assert both(np.array([0.0]), 0.0)[0] == pytest.approx(1.0)
    with pytest.raises(InvalidField):
        DriftField(grid=g, table=np.ones((2, 16)))
    with pytest.raises(ValueError):
        DriftField()


def test_bridge_drift_adds_grad_log_phi():
    g = SMALL
    sol, drift = reference_drift(g)
    phi = sol.series("phi", g)
    bd = bridge_drift(drift, phi)
    inner = np.abs(g.x) <= 4
    exact = sol.tabulate("bridge_drift", g)
    np.testing.assert_allclose(bd.table[:, inner], exact[:, inner], atol=1e-8)
