"""
Command-line driver.

    bridgesteer --mode gaussian-example --out runs/g
    bridgesteer --mode solve-bridge --config bimodal.cfg --out runs/b

Configuration files are flat ``key = value`` text with ``#`` comments; every
key has a default matching the Gaussian mean-shift example.  Each run writes
CSV artefacts plus ``summary.txt`` listing every gate, and exits 0 iff all
gates pass.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import __version__
from .errors import BridgeSteerError, ConfigError, InvalidDensity, NoConvergence
from .gaussian_bridge import (
    CSV_HEADER,
    ODE_GATE,
    RESIDUAL_GATE,
    GaussianBridgeSolution,
    GaussianConfig,
    verify_ode_systems,
)
from .grid_field import (
    FieldSeries,
    MadelungSeries,
    PhysicalConstants,
    RealField,
    SpaceTimeGrid,
    laplacian_ratio_from_log,
    write_field_csv,
)
from .nelson_sim import (
    GaussianDensity,
    SimulationConfig,
    entropy_estimate,
    gaussian_kl,
    marginal_test,
    sample_initial,
    simulate,
    summary_rows,
    write_summary_csv,
)
from .schrodinger_system import BridgeSolution, DriftField, FortetConfig, bridge_drift, solve_bridge
from .steering import (
    ControlledEvolution,
    assemble_tilde_log,
    endpoint_checks,
    extract_potential,
    verify_schrodinger,
)

log = logging.getLogger("bridgesteer")

MODES = ("gaussian-example", "solve-bridge", "simulate", "verify-all")
REFERENCES = ("gaussian", "free")

EXIT_OK, EXIT_GATE, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

BOUNDARY_GATE = 1e-10
ENDPOINT_GATE = 1e-6
DRIFT_GATE = 1e-8
INVARIANCE_GATE = 1e-10
CLOSED_FORM_GATE = 1e-4
NORMALIZATION_GATE = 1e-6
INNER_REGION = 4.0


@dataclass(frozen=True)
class RunConfig:
    mode: str = "gaussian-example"
    omega: float = math.pi
    x_min: float = -6.0
    x_max: float = 7.0
    n_x: int = 1024
    n_t: int = 513
    max_iterations: int = 200
    marginal_tolerance: float = 1e-8
    substeps: int = 2
    record_timings: bool = False
    n_paths: int = 100_000
    dt_sim: float = 1e-3
    save_every: int = 10
    seed: int = 20231019
    out: str = "bridgesteer-out"
    rho0_file: str = ""
    rho1_file: str = ""
    reference: str = "gaussian"
    export_every: int = 64
    dump_paths: bool = False
    simulate_bridge: bool = True

    def validate(self) -> None:
        """Check every parameter against its module's preconditions."""
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.reference not in REFERENCES:
            raise ConfigError(f"reference must be one of {REFERENCES}, got {self.reference!r}")
        if self.export_every < 1:
            raise ConfigError("export_every must be positive")
        self.grid()
        self.fortet()
        self.simulation()
        GaussianConfig(omega=self.omega)

    def grid(self) -> SpaceTimeGrid:
        return SpaceTimeGrid(self.x_min, self.x_max, self.n_x, 0.0, 1.0, self.n_t)

    def fortet(self) -> FortetConfig:
        return FortetConfig(max_iterations=self.max_iterations,
                            marginal_tolerance=self.marginal_tolerance,
                            substeps=self.substeps, record_timings=self.record_timings)

    def simulation(self, cover: tuple[float, float] | None = None) -> SimulationConfig:
        """Monte Carlo settings; the domain is the grid, widened to contain ``cover``."""
        lo, hi = self.x_min, self.x_max
        if cover is not None:
            lo, hi = min(lo, cover[0]), max(hi, cover[1])
        return SimulationConfig(n_paths=self.n_paths, dt_sim=self.dt_sim, seed=self.seed,
                                save_every=self.save_every, x_min=lo, x_max=hi)

    def export_slices(self) -> list[int]:
        idx = list(range(0, self.n_t, self.export_every))
        if idx[-1] != self.n_t - 1:
            idx.append(self.n_t - 1)
        return idx


def _coerce(name: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw, 0)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def load_config(path=None, **overrides) -> RunConfig:
    """Read a flat key = value file and apply non-None overrides."""
    values: dict = {}
    types = {f.name: (type(f.default) if f.default is not None else str) for f in dataclasses.fields(RunConfig)}
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
        parser.optionxform = str
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            parser.read_string("[run]\n" + text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        for key, raw in parser["run"].items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, raw, types[key])
    values.update({k: v for k, v in overrides.items() if v is not None})
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# gates and output helpers


@dataclass(frozen=True)
class Gate:
    name: str
    value: float
    threshold: float
    passed: bool


@dataclass
class GateBook:
    gates: list[Gate] = field(default_factory=list)

    def upper(self, name: str, value: float, threshold: float) -> Gate:
        g = Gate(name, float(value), float(threshold), bool(value <= threshold))
        self.gates.append(g)
        log.info("%-32s %s  value=%.6g threshold=%.6g", name, "PASS" if g.passed else "FAIL",
                 g.value, g.threshold)
        return g

    def lower(self, name: str, value: float, threshold: float) -> Gate:
        g = Gate(name, float(value), float(threshold), bool(value >= threshold))
        self.gates.append(g)
        log.info("%-32s %s  value=%.6g threshold>=%.6g", name, "PASS" if g.passed else "FAIL",
                 g.value, g.threshold)
        return g

    def flag(self, name: str, ok: bool, value: float = float("nan")) -> Gate:
        g = Gate(name, float(value), float("nan"), bool(ok))
        self.gates.append(g)
        log.info("%-32s %s", name, "PASS" if ok else "FAIL")
        return g

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.gates)

    @property
    def first_failure(self) -> Gate | None:
        return next((g for g in self.gates if not g.passed), None)

    def write_residuals(self, path: Path) -> None:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["gate", "value", "threshold", "pass"])
            for g in self.gates:
                w.writerow([g.name, _fmt(g.value), _fmt(g.threshold), int(g.passed)])

    def write_summary(self, path: Path, extra: dict[str, object]) -> None:
        lines = [f"version = {__version__}"]
        lines += [f"{k} = {_fmt(v) if isinstance(v, float) else v}" for k, v in extra.items()]
        for g in self.gates:
            lines.append(f"gate.{g.name} = {'PASS' if g.passed else 'FAIL'} "
                         f"value={_fmt(g.value)} threshold={_fmt(g.threshold)}")
        lines.append(f"status = {'PASS' if self.passed else 'FAIL'}")
        path.write_text("\n".join(lines) + "\n")


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _write_constants(path: Path, sol: GaussianBridgeSolution) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerow(sol.constants.csv_row())


def _export_fields(out: Path, ev: ControlledEvolution, slices: list[int]) -> None:
    psi = ev.psi_tilde
    Vc = ev.V_c
    for k in slices:
        write_field_csv(out / f"psi_tilde_{k}.csv", psi[k])
        write_field_csv(out / f"vc_{k}.csv", Vc[k])


def _gaussian_log_density(x, mean, omega):
    """Normalized log density of N(mean, 1/(2 omega))."""
    return -omega * (x - mean) ** 2 + 0.5 * math.log(omega / math.pi)


def _density_field(grid: SpaceTimeGrid, log_values: np.ndarray) -> RealField:
    vals = np.exp(log_values)
    return RealField(grid, vals / grid.integrate(vals), density=True)


def read_density_csv(path, grid: SpaceTimeGrid) -> RealField:
    """Resample a two-column ``x,value`` density onto the grid and renormalize.

    Monotone cubic (PCHIP) interpolation is applied to log(value).
    """
    try:
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read density file {path}: {exc}") from exc
    if not rows or [c.strip() for c in rows[0]] != ["x", "value"]:
        raise ConfigError(f"{path}: expected header 'x,value'")
    try:
        data = np.array(rows[1:], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"{path}: non-numeric entry") from exc
    if data.ndim != 2 or data.shape[1] != 2 or data.shape[0] < 4:
        raise ConfigError(f"{path}: need at least 4 rows of two columns")
    x, v = data[:, 0], data[:, 1]
    if np.any(np.diff(x) <= 0):
        raise ConfigError(f"{path}: abscissa must be strictly increasing")
    if not np.all(np.isfinite(v)) or np.any(v <= 0):
        raise InvalidDensity(f"{path}: density must be everywhere positive")
    if x[0] > grid.x_min or x[-1] < grid.x_max:
        raise ConfigError(f"{path}: data must cover [{grid.x_min}, {grid.x_max}]")
    # interpolate the log so that tails spanning many decades stay smooth
    log_vals = PchipInterpolator(x, np.log(v))(grid.x)
    return _density_field(grid, log_vals - log_vals.max())


# ---------------------------------------------------------------------------
# pipelines


def _say(quiet: bool, msg: str) -> None:
    if not quiet:
        print(msg, flush=True)


def _steering_gates(book: GateBook, ev: ControlledEvolution, log_rho0, log_rho1,
                   target_drift: np.ndarray | None, gate_schrodinger: bool = True):
    """Record the steering identities; returns the endpoint report and summary extras.

    The Schrodinger residual threshold is calibrated on smooth closed-form
    fields, so it is gated only when one exists.
    """
    grid = ev.grid
    rep = verify_schrodinger(ev.psi_tilde, ev.V_total, ev.constants)
    info: dict[str, object] = {}
    if gate_schrodinger:
        book.upper("schrodinger_residual", rep.max_residual, rep.threshold)
    else:
        info.update(schrodinger_residual=rep.max_residual,
                    schrodinger_residual_ratio=rep.ratio)
    ends = endpoint_checks(ev, log_rho0, log_rho1)
    book.upper("modulus_t0", ends.modulus_t0, ENDPOINT_GATE)
    book.upper("modulus_t1", ends.modulus_t1, ENDPOINT_GATE)
    if target_drift is not None:
        book.upper("drift_identity", float(np.max(np.abs(ev.drift() - target_drift))), DRIFT_GATE)
    k = ev.constants.hbar**2 / ev.constants.mass
    lhs = ev.V_c.values - k * laplacian_ratio_from_log(0.5 * ev.log_rho_tilde, grid.dx)
    rhs = ev.V - ev.V_i - k * laplacian_ratio_from_log(ev.reference.R.values, grid.dx)
    book.upper("potential_invariance", float(np.max(np.abs(lhs - rhs))), INVARIANCE_GATE)
    return ends, info


def _monte_carlo(book: GateBook, cfg: RunConfig, out: Path, bridge: DriftField,
                 reference: DriftField, rho0, rho1, quiet: bool, closed=None,
                 cover: tuple[float, float] | None = None) -> dict:
    sim = cfg.simulation(cover)
    x0 = sample_initial(rho0, sim.n_paths, sim.seed)
    _say(quiet, f"simulating {sim.n_paths} bridge paths")
    ens = simulate(bridge, x0, sim, reference_drift=reference)
    _say(quiet, f"simulating {sim.n_paths} reference paths")
    ens_ref = simulate(reference, x0, sim)
    write_summary_csv(out / "ensemble.csv", summary_rows(ens, {sim.t0: rho0, sim.t1: rho1}))
    if cfg.dump_paths:
        ens.write_paths_csv(out / "paths.csv")
    r0 = marginal_test(ens, sim.t0, rho0)
    r1 = marginal_test(ens, sim.t1, rho1)
    rr = marginal_test(ens_ref, sim.t1, rho1)
    book.flag("mc_bridge_t0", r0.passed, r0.ks_stat)
    book.flag("mc_bridge_t1", r1.passed, r1.ks_stat)
    book.flag("mc_reference_t1_rejected", not rr.passed, rr.ks_stat)
    extra = {"mc_t1_mean": r1.mean, "mc_t1_var": r1.var, "mc_reference_t1_mean": rr.mean}
    lr = entropy_estimate(ens, reference, bridge, method="likelihood")
    act = entropy_estimate(ens, reference, bridge, method="action")
    book.lower("entropy_nonnegative", lr.path_term + 2 * lr.stderr, 0.0)
    extra.update(entropy_path_likelihood=lr.path_term, entropy_path_stderr=lr.stderr,
                 entropy_path_action=act.path_term)
    if closed is not None:
        path_exact, quad_bound, marginal = closed
        book.upper("entropy_likelihood_2se", abs(lr.path_term - path_exact), 2 * lr.stderr)
        book.upper("entropy_action_quadrature", abs(act.path_term - path_exact), quad_bound)
        extra.update(entropy_path_exact=path_exact, entropy_marginal_term=marginal,
                     entropy_total=act.path_term + marginal)
    return extra


def _reference_cover(sol: GaussianBridgeSolution) -> tuple[float, float]:
    """Range holding the reference mean line plus ten standard deviations."""
    k = sol.constants
    ends = (k.m1, k.m1 + k.m2, 0.0, 1.0)
    pad = 10.0 / math.sqrt(2 * sol.omega)
    return min(ends) - pad, max(ends) + pad


def _entropy_closed_form(sol: GaussianBridgeSolution, dt: float):
    w, b0 = sol.omega, sol.constants.beta0
    exact = b0**2 * math.expm1(2 * w) / (4 * w)
    # trapezoid error bound for the integrand beta(t)^2 / 2
    bound = dt**2 / 12 * (2 * w) ** 2 * 0.5 * b0**2 * math.exp(2 * w)
    var = 1 / (2 * w)
    marginal = gaussian_kl(GaussianDensity(0.0, var), GaussianDensity(sol.constants.m1, var))
    return exact, bound, marginal


def run_gaussian_example(cfg: RunConfig, quiet: bool = False, book: GateBook | None = None,
                         out: Path | None = None) -> GateBook:
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    book = book or GateBook()
    grid = cfg.grid()
    sol = GaussianBridgeSolution.from_omega(cfg.omega)
    w = sol.omega
    _say(quiet, f"gaussian example, omega={w:.17g}")

    _write_constants(out / "constants.csv", sol)
    for name, r in sol.constants.residuals().items():
        book.upper(f"phase_matching_{name}", abs(r), RESIDUAL_GATE)
    ode = verify_ode_systems(sol)
    for name, r in ode.max_residuals.items():
        book.upper(f"ode_{name}", r, ODE_GATE)
    for name, r in ode.constraints.items():
        book.upper(f"constraint_{name}", abs(r), 1e-12 if name.endswith("t0") else 1e-9)

    inner = np.abs(grid.x) <= INNER_REGION
    xi = grid.x[inner]
    b0 = np.max(np.abs(sol.bridge_density(xi, 0.0) - np.exp(-w * xi**2)))
    b1 = np.max(np.abs(sol.bridge_density(xi, 1.0) - np.exp(-w * (xi - 1) ** 2)))
    book.upper("boundary_product_t0", b0, BOUNDARY_GATE)
    book.upper("boundary_product_t1", b1, BOUNDARY_GATE)

    pairs = MadelungSeries(sol.series("reference_R", grid), sol.series("reference_S", grid))
    ev = assemble_tilde_log(pairs, sol.tabulate("log_phi", grid), sol.tabulate("log_phi_hat", grid))
    ev = ev.with_potentials(sol.tabulate("reference_potential", grid), 0.0)
    x = grid.x
    ends, _ = _steering_gates(book, ev, -w * x**2, -w * (x - 1) ** 2, sol.tabulate("bridge_drift", grid))
    book.upper("phase_flat_t0", ends.phase_slope_t0, ENDPOINT_GATE)
    book.upper("phase_flat_t1", ends.phase_slope_t1, ENDPOINT_GATE)
    _export_fields(out, ev, cfg.export_slices())

    extra: dict[str, object] = {"mode": "gaussian-example", "omega": w, "seed": cfg.seed,
                                "phase_offset_t0": ends.phase_offset_t0,
                                "phase_offset_t1": ends.phase_offset_t1}
    if cfg.simulate_bridge:
        var = 1 / (2 * w)
        extra.update(_monte_carlo(
            book, cfg, out, DriftField.from_function(sol.bridge_drift, "bridge"),
            DriftField.from_function(sol.reference_drift, "reference"),
            GaussianDensity(0.0, var), GaussianDensity(1.0, var), quiet,
            closed=_entropy_closed_form(sol, cfg.dt_sim), cover=_reference_cover(sol)))
    book.write_residuals(out / "residuals.csv")
    book.write_summary(out / "summary.txt", extra)
    return book


def _reference_model(cfg: RunConfig, grid: SpaceTimeGrid):
    """Madelung pair and potential of the reference evolution on the grid."""
    if cfg.reference == "gaussian":
        sol = GaussianBridgeSolution.from_omega(cfg.omega)
        pairs = MadelungSeries(sol.series("reference_R", grid), sol.series("reference_S", grid))
    else:
        zero = FieldSeries(grid, np.zeros((grid.n_t, grid.n_x)))
        pairs = MadelungSeries(zero, zero)
    return pairs, extract_potential(pairs).values


def run_solve_bridge(cfg: RunConfig, quiet: bool = False, book: GateBook | None = None,
                     out: Path | None = None) -> tuple[GateBook, BridgeSolution]:
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    book = book or GateBook()
    grid = cfg.grid()
    w = cfg.omega
    x = grid.x
    rho0 = read_density_csv(cfg.rho0_file, grid) if cfg.rho0_file else \
        _density_field(grid, _gaussian_log_density(x, 0.0, w))
    rho1 = read_density_csv(cfg.rho1_file, grid) if cfg.rho1_file else \
        _density_field(grid, _gaussian_log_density(x, 1.0, w))
    pairs, V = _reference_model(cfg, grid)
    drift = DriftField.from_madelung(pairs, name="reference")

    _say(quiet, "solving the Schrödinger system")
    try:
        bridge = solve_bridge(rho0, rho1, drift, cfg.fortet())
    except NoConvergence as exc:
        _write_history(out / "fortet_iterations.csv", exc.history)
        raise
    bridge.write_iterations_csv(out / "fortet_iterations.csv")
    book.upper("fortet_iterations", bridge.iterations, cfg.max_iterations)
    book.upper("marginal_error", bridge.final_marginal_error, cfg.marginal_tolerance)
    book.flag("marginal_error_monotone", bridge.monotone)
    book.flag("division_floor_inactive", not bridge.floor_active)
    book.upper("edge_density_ratio", bridge.edge_ratio, 1e-12)
    mass = grid.integrate(np.exp(bridge.log_rho))
    book.upper("bridge_normalization", float(np.max(np.abs(mass - 1.0))), NORMALIZATION_GATE)
    book.flag("bridge_positive", bool(np.all(np.isfinite(bridge.log_rho))))

    extra: dict[str, object] = {"mode": "solve-bridge", "omega": w, "seed": cfg.seed,
                                "reference": cfg.reference, "iterations": bridge.iterations}
    closed = cfg.reference == "gaussian" and not cfg.rho0_file and not cfg.rho1_file
    if closed:
        err_phi, err_phi_hat = closed_form_errors(bridge, GaussianBridgeSolution.from_omega(w))
        book.upper("phi_vs_closed_form", err_phi, CLOSED_FORM_GATE)
        book.upper("phi_hat_vs_closed_form", err_phi_hat, CLOSED_FORM_GATE)

    ev = assemble_tilde_log(pairs, bridge.log_phi, bridge.log_phi_hat).with_potentials(V, 0.0)
    bdrift = bridge_drift(drift, bridge)
    _, info = _steering_gates(book, ev, np.log(rho0.values), np.log(rho1.values),
                             bdrift.table, gate_schrodinger=closed)
    extra.update(info)
    _export_fields(out, ev, cfg.export_slices())

    if cfg.simulate_bridge:
        extra.update(_monte_carlo(book, cfg, out, bdrift, drift, rho0, rho1, quiet))
    book.write_residuals(out / "residuals.csv")
    book.write_summary(out / "summary.txt", extra)
    return book, bridge


def closed_form_errors(bridge: BridgeSolution, sol: GaussianBridgeSolution,
                       region: float = INNER_REGION) -> tuple[float, float]:
    """Relative sup-norm errors of phi and phihat on |x| <= region.

    phi and phihat are defined only up to phi -> c phi, phihat -> phihat / c;
    c is fitted as the mean log-ratio over the region and all slices.
    """
    grid = bridge.grid
    m = np.abs(grid.x) <= region
    lp = sol.tabulate("log_phi", grid)[:, m]
    lph = sol.tabulate("log_phi_hat", grid)[:, m] + sol.log_normalizer
    c = float(np.mean(lp - bridge.log_phi[:, m]))
    e1 = float(np.max(np.abs(np.expm1(bridge.log_phi[:, m] + c - lp))))
    e2 = float(np.max(np.abs(np.expm1(bridge.log_phi_hat[:, m] - c - lph))))
    return e1, e2


def _write_history(path: Path, history) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "err_t0", "err_t1", "seconds"])
        for i, (e0, e1) in enumerate(history, 1):
            w.writerow([i, _fmt(e0), _fmt(e1), "nan"])


def run_simulate(cfg: RunConfig, quiet: bool = False) -> GateBook:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    book = GateBook()
    sol = GaussianBridgeSolution.from_omega(cfg.omega)
    var = 1 / (2 * sol.omega)
    extra: dict[str, object] = {"mode": "simulate", "omega": sol.omega, "seed": cfg.seed}
    extra.update(_monte_carlo(
        book, cfg, out, DriftField.from_function(sol.bridge_drift, "bridge"),
        DriftField.from_function(sol.reference_drift, "reference"),
        GaussianDensity(0.0, var), GaussianDensity(1.0, var), quiet,
        closed=_entropy_closed_form(sol, cfg.dt_sim)))
    book.write_residuals(out / "residuals.csv")
    book.write_summary(out / "summary.txt", extra)
    return book


def run_verify_all(cfg: RunConfig, quiet: bool = False) -> GateBook:
    out = Path(cfg.out)
    book = run_gaussian_example(cfg, quiet, out=out / "gaussian")
    plain = dataclasses.replace(cfg, rho0_file="", rho1_file="", reference="gaussian",
                                simulate_bridge=False)
    book_b, coarse = run_solve_bridge(plain, quiet, out=out / "bridge")
    book.gates.extend(book_b.gates)
    _say(quiet, "refining the grid")
    fine_grid = cfg.grid().refined()
    fine_cfg = dataclasses.replace(plain, n_x=fine_grid.n_x, n_t=fine_grid.n_t)
    sol = GaussianBridgeSolution.from_omega(cfg.omega)
    x = fine_grid.x
    pairs, _ = _reference_model(fine_cfg, fine_grid)
    fine = solve_bridge(_density_field(fine_grid, _gaussian_log_density(x, 0.0, cfg.omega)),
                        _density_field(fine_grid, _gaussian_log_density(x, 1.0, cfg.omega)),
                        DriftField.from_madelung(pairs), fine_cfg.fortet())
    ec = max(closed_form_errors(coarse, sol))
    ef = max(closed_form_errors(fine, sol))
    book.lower("refinement_error_ratio", ec / ef, 3.0)
    out.mkdir(parents=True, exist_ok=True)
    book.write_residuals(out / "residuals.csv")
    book.write_summary(out / "summary.txt", {"mode": "verify-all", "omega": cfg.omega,
                                              "seed": cfg.seed})
    return book


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bridgesteer",
                                description="Steer a quantum state along a Schrödinger bridge.")
    p.add_argument("--config", type=Path, help="flat key = value configuration file")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=lambda s: int(s, 0), help="64-bit simulation seed")
    p.add_argument("--omega", type=float, help="Gaussian width parameter")
    p.add_argument("--quiet", action="store_true", help="suppress progress output")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, mode=args.mode, out=args.out, seed=args.seed,
                          omega=args.omega)
    except (BridgeSteerError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    runners = {"gaussian-example": run_gaussian_example, "simulate": run_simulate,
               "verify-all": run_verify_all,
               "solve-bridge": lambda c, q: run_solve_bridge(c, q)[0]}
    try:
        book = runners[cfg.mode](cfg, args.quiet)
    except NoConvergence as exc:
        print(f"failed: {exc}; iteration log in {Path(cfg.out) / 'fortet_iterations.csv'}",
              file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidDensity, ConfigError) as exc:
        print(f"input rejected: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BridgeSteerError as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    failed = book.first_failure
    if failed is not None:
        print(f"gate failed: {failed.name} (value {failed.value:.6g}, threshold {failed.threshold:.6g})",
              file=sys.stderr)
        return EXIT_GATE
    _say(args.quiet, f"all {len(book.gates)} gates passed; outputs in {cfg.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
