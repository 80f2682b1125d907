"""
Grid solver for the Schrödinger system

    d phi/dt     + b . grad phi     + (eps/2) lap phi     = 0   (backward)
    d phihat/dt  + div(b phihat)    - (eps/2) lap phihat  = 0   (forward)

with product boundary conditions phi * phihat = rho at both ends, solved by
alternating (Fortet / iterative proportional fitting) sweeps.

Both equations are integrated for the logarithms u = log phi and
uh = log phihat.  The Hopf-Cole substitution turns them into

    u_t  = -b u_x  - (eps/2)(u_xx + u_x^2),
    uh_t = -b_x - b uh_x + (eps/2)(uh_xx + uh_x^2),

which are stepped with Crank-Nicolson and Newton's method on a banded
Jacobian.  Positivity is automatic and the far tails, where phi * phihat is
below 1e-30, keep full relative accuracy.  Grid ends are treated as outflow
boundaries: the second derivative is copied from the neighbouring node.
"""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import get_lapack_funcs

from .errors import ConfigError, InvalidField, NoConvergence, NonpositivePhi, SchemeInstability
from .grid_field import (
    FieldSeries,
    MadelungSeries,
    PhysicalConstants,
    RealField,
    SpaceTimeGrid,
    grad_array,
)

log = logging.getLogger(__name__)

PHI_FLOOR = 1e-300
LOG_PHI_FLOOR = math.log(PHI_FLOOR)
FLOOR_WATCH = 1e-10
EDGE_RATIO = 1e-12


# ---------------------------------------------------------------------------
# drift fields


class DriftField:
    """Forward drift b(x, t) of a reference diffusion.

    Wraps either a vectorized callable ``f(x, t)`` or a table sampled on a
    :class:`SpaceTimeGrid`.  Tables are interpolated linearly in x and t;
    positions outside the grid see the edge value.
    """

    def __init__(self, func: Callable | None = None, *, grid: SpaceTimeGrid | None = None,
                 table: np.ndarray | None = None, name: str = "drift"):
        if (func is None) == (table is None):
            raise ValueError("give exactly one of func or table")
        if table is not None:
            if grid is None:
                raise ValueError("a drift table needs its grid")
            table = np.array(table, dtype=float)
            if table.shape != (grid.n_t, grid.n_x):
                raise InvalidField(f"drift table shape {table.shape} does not match the grid")
            if not np.all(np.isfinite(table)):
                raise InvalidField("drift table has non-finite values")
            table.setflags(write=False)
        self._func = func
        self._table = table
        self.grid = grid
        self.name = name

    @classmethod
    def from_function(cls, func: Callable, name: str = "drift") -> "DriftField":
        return cls(func, name=name)

    @classmethod
    def zero(cls) -> "DriftField":
        return cls(lambda x, t: np.zeros(np.broadcast(x, t).shape), name="zero")

    @classmethod
    def from_madelung(cls, pairs: MadelungSeries,
                      constants: PhysicalConstants = PhysicalConstants(),
                      name: str = "madelung") -> "DriftField":
        """b = (1/m) grad S + (hbar/m) grad R on every slice."""
        grid = pairs.grid
        b = (grad_array(pairs.S.values, grid.dx) / constants.mass
             + constants.diffusion * grad_array(pairs.R.values, grid.dx))
        return cls(grid=grid, table=b, name=name)

    @property
    def is_tabulated(self) -> bool:
        return self._table is not None

    @property
    def table(self) -> np.ndarray | None:
        return self._table

    def __call__(self, x, t: float) -> np.ndarray:
        """Evaluate at positions ``x`` (any shape) and a scalar time ``t``."""
        if self._func is not None:
            val = np.asarray(self._func(x, t), dtype=float)
            return val if val.shape == np.shape(x) else np.broadcast_to(val, np.shape(x)).copy()
        g = self.grid
        s = (float(t) - g.t0) / g.dt
        k = min(max(int(math.floor(s)), 0), g.n_t - 2)
        f = min(max(s - k, 0.0), 1.0)
        row = self._table[k] if f == 0.0 else (1.0 - f) * self._table[k] + f * self._table[k + 1]
        # uniform grid: direct cell lookup instead of a binary search
        s = (np.asarray(x, dtype=float) - g.x_min) / g.dx
        i = np.clip(np.floor(s), 0, g.n_x - 2).astype(np.intp)
        w = np.clip(s - i, 0.0, 1.0)
        return row[i] + w * (row[i + 1] - row[i])

    def on_grid(self, grid: SpaceTimeGrid) -> np.ndarray:
        """Drift on every node of ``grid``, shape (n_t, n_x)."""
        if self._table is not None and grid == self.grid:
            return np.array(self._table)
        return np.stack([np.broadcast_to(self(grid.x, t), (grid.n_x,)) for t in grid.t])

    def at_times(self, x: np.ndarray, times: np.ndarray) -> np.ndarray:
        return np.stack([np.broadcast_to(self(x, t), x.shape) for t in times])

    def plus(self, other: Callable, name: str | None = None) -> "DriftField":
        """Pointwise sum with another drift or a callable ``g(x, t)``."""
        return DriftField(lambda x, t: self(x, t) + other(x, t),
                          name=name or f"{self.name}+{getattr(other, 'name', 'g')}")


# ---------------------------------------------------------------------------
# configuration and results


@dataclass(frozen=True)
class FortetConfig:
    """Settings of the alternating fixed-point iteration and its PDE sweeps."""

    max_iterations: int = 200
    marginal_tolerance: float = 1e-8
    substeps: int = 2
    newton_tolerance: float = 1e-12
    newton_max_iterations: int = 20
    monotone_slack: float = 1e-12
    record_timings: bool = False

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be at least 1")
        if not self.marginal_tolerance > 0:
            raise ConfigError("marginal_tolerance must be positive")
        if self.substeps < 1:
            raise ConfigError("substeps must be at least 1")
        if not self.newton_tolerance > 0 or self.newton_max_iterations < 1:
            raise ConfigError("invalid Newton settings")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    err_t0: float
    err_t1: float
    seconds: float = float("nan")


@dataclass(frozen=True)
class BridgeSolution:
    """phi and phihat on every slice, stored as logarithms."""

    grid: SpaceTimeGrid
    log_phi: np.ndarray
    log_phi_hat: np.ndarray
    iterations: int
    final_marginal_error: float
    history: tuple[IterationRecord, ...] = ()
    monotone: bool = True
    floor_active: bool = False
    edge_ratio: float = 0.0

    def __post_init__(self):
        for name in ("log_phi", "log_phi_hat"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def phi(self) -> FieldSeries:
        return FieldSeries(self.grid, np.exp(self.log_phi))

    @property
    def phi_hat(self) -> FieldSeries:
        return FieldSeries(self.grid, np.exp(self.log_phi_hat))

    @property
    def log_rho(self) -> np.ndarray:
        return self.log_phi + self.log_phi_hat

    @property
    def rho(self) -> FieldSeries:
        return FieldSeries(self.grid, np.exp(self.log_rho))

    @property
    def edges_resolved(self) -> bool:
        return self.edge_ratio < EDGE_RATIO

    def write_iterations_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "err_t0", "err_t1", "seconds"])
            for r in self.history:
                w.writerow([r.iteration, format(r.err_t0, ".17g"), format(r.err_t1, ".17g"),
                            format(r.seconds, ".17g")])
        return path


# ---------------------------------------------------------------------------
# log-domain Crank-Nicolson propagator


class _LogPropagator:
    def __init__(self, grid: SpaceTimeGrid, drift: DriftField, eps: float, cfg: FortetConfig):
        self.grid, self.eps, self.cfg = grid, eps, cfg
        self.h = grid.dx
        self.n = grid.n_x
        self.sub = cfg.substeps
        self.times = np.linspace(grid.t0, grid.t1, (grid.n_t - 1) * self.sub + 1)
        if drift.is_tabulated and drift.grid == grid and self.sub > 1:
            # linear interpolation between stored slices
            tab = drift.table
            frac = np.arange(self.sub) / self.sub
            parts = (1 - frac)[None, :, None] * tab[:-1, None, :] + frac[None, :, None] * tab[1:, None, :]
            b = np.concatenate([parts.reshape(-1, self.n), tab[-1:]])
        else:
            b = drift.at_times(grid.x, self.times)
        if not np.all(np.isfinite(b)):
            raise SchemeInstability("drift is not finite on the grid")
        self.b = b
        self.bx = self.d1(b)
        self.log_w = np.log(grid.weights)
        self._gbsv = get_lapack_funcs("gbsv", dtype=float)

    def d1(self, v: np.ndarray) -> np.ndarray:
        if v.ndim > 1:
            return np.gradient(v, self.h, axis=-1, edge_order=2)
        g = np.empty_like(v)
        h2 = 2.0 * self.h
        g[1:-1] = (v[2:] - v[:-2]) / h2
        g[0] = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / h2
        g[-1] = (3.0 * v[-1] - 4.0 * v[-2] + v[-3]) / h2
        return g

    def d2(self, v: np.ndarray) -> np.ndarray:
        g = np.empty_like(v)
        g[1:-1] = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / self.h**2
        g[0] = g[1]
        g[-1] = g[-2]
        return g

    def rate(self, v, j, sign):
        vx = self.d1(v)
        out = -self.b[j] * vx + sign * 0.5 * self.eps * (self.d2(v) + vx * vx)
        if sign > 0:
            out -= self.bx[j]
        return out, vx

    def _jacobian(self, cd1: np.ndarray, cd2: float, scale: float) -> np.ndarray:
        h, n = self.h, self.n
        A = scale * cd1 / (2.0 * h)
        B = scale * cd2 / h**2
        # LAPACK band storage with two extra rows of fill-in space
        ab = np.zeros((7, n), order="F")
        ab[4, :] = 1.0
        ab[5, : n - 2] = -A[1:-1] + B
        ab[4, 1:-1] += -2.0 * B
        ab[3, 2:] = A[1:-1] + B
        ab[4, 0] += -3.0 * A[0] + B
        ab[3, 1] = 4.0 * A[0] - 2.0 * B
        ab[2, 2] = -A[0] + B
        k = n - 1
        ab[4, k] += 3.0 * A[k] + B
        ab[5, k - 1] = -4.0 * A[k] - 2.0 * B
        ab[6, k - 2] = A[k] + B
        return ab

    def step(self, v, F_old, j_old, j_new, sign):
        """One Crank-Nicolson step from time index j_old to j_new."""
        dt = self.times[j_new] - self.times[j_old]
        rhs = v + 0.5 * dt * F_old
        w = v + dt * F_old
        cfg = self.cfg
        for _ in range(cfg.newton_max_iterations):
            F, wx = self.rate(w, j_new, sign)
            R = w - 0.5 * dt * F - rhs
            if np.max(np.abs(R)) <= cfg.newton_tolerance * (1.0 + np.max(np.abs(w))):
                return w, F
            cd1 = -self.b[j_new] + sign * self.eps * wx
            ab = self._jacobian(cd1, sign * 0.5 * self.eps, -0.5 * dt)
            _, _, dw, info = self._gbsv(2, 2, ab, R, overwrite_ab=1, overwrite_b=1)
            if info != 0:
                break
            w = w - dw
            if not np.all(np.isfinite(w)):
                break
        else:
            F, _ = self.rate(w, j_new, sign)
            R = w - 0.5 * dt * F - rhs
            if np.max(np.abs(R)) <= 1e3 * cfg.newton_tolerance * (1.0 + np.max(np.abs(w))):
                return w, F
        raise SchemeInstability(
            f"Newton iteration failed between t={self.times[j_old]:.6g} and t={self.times[j_new]:.6g}")

    def lse(self, v) -> float:
        a = v + self.log_w
        top = a.max()
        return float(top + math.log(np.exp(a - top).sum()))

    def forward(self, uh0: np.ndarray, conserve: bool = True) -> np.ndarray:
        """log phihat on every stored slice, marching from t0."""
        out = np.empty((self.grid.n_t, self.n))
        out[0] = v = np.array(uh0, dtype=float)
        mass = self.lse(v)
        F, _ = self.rate(v, 0, +1)
        for j in range(len(self.times) - 1):
            v, F = self.step(v, F, j, j + 1, +1)
            if conserve:
                v -= self.lse(v) - mass
            if (j + 1) % self.sub == 0:
                out[(j + 1) // self.sub] = v
        return out

    def backward(self, u1: np.ndarray, pair_with: np.ndarray | None = None) -> np.ndarray:
        """log phi on every stored slice, marching from t1.

        With ``pair_with`` (log phihat on the stored slices) each stored slice
        is shifted so that the integral of phi * phihat keeps its t1 value.
        """
        nt = self.grid.n_t
        out = np.empty((nt, self.n))
        out[-1] = v = np.array(u1, dtype=float)
        pair = self.lse(v + pair_with[-1]) if pair_with is not None else None
        last = len(self.times) - 1
        F, _ = self.rate(v, last, -1)
        for j in range(last, 0, -1):
            v, F = self.step(v, F, j, j - 1, -1)
            if (j - 1) % self.sub == 0:
                k = (j - 1) // self.sub
                if pair is not None:
                    v = v - (self.lse(v + pair_with[k]) - pair)
                out[k] = v
        return out


def _check_positive(values: np.ndarray, what: str) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if np.any(~np.isfinite(values)) or np.any(values <= 0):
        raise NonpositivePhi(f"{what} must be strictly positive and finite")
    return values


def _series_from_log(grid: SpaceTimeGrid, logv: np.ndarray) -> FieldSeries:
    if not np.all(np.isfinite(logv)):
        raise SchemeInstability("propagated field became non-finite")
    return FieldSeries(grid, np.exp(logv))


def propagate_phi_backward(terminal: RealField, drift: DriftField,
                           constants: PhysicalConstants = PhysicalConstants(),
                           config: FortetConfig = FortetConfig()) -> FieldSeries:
    """Solve the backward equation for phi from t1 down to t0."""
    vals = _check_positive(terminal.values, "terminal phi")
    prop = _LogPropagator(terminal.grid, drift, constants.diffusion, config)
    return _series_from_log(terminal.grid, prop.backward(np.log(vals)))


def propagate_phihat_forward(initial: RealField, drift: DriftField,
                             constants: PhysicalConstants = PhysicalConstants(),
                             config: FortetConfig = FortetConfig()) -> FieldSeries:
    """Solve the forward (Fokker-Planck) equation for phihat from t0 to t1.

    The total mass is held at its initial value after every step.
    """
    vals = _check_positive(initial.values, "initial phihat")
    prop = _LogPropagator(initial.grid, drift, constants.diffusion, config)
    return _series_from_log(initial.grid, prop.forward(np.log(vals)))


# ---------------------------------------------------------------------------
# Fortet iteration


def _l1(grid: SpaceTimeGrid, log_a: np.ndarray, log_b: np.ndarray) -> float:
    return float(np.sum(grid.weights * np.abs(np.exp(log_a) - np.exp(log_b))))


def solve_bridge(rho0: RealField, rho1: RealField, drift: DriftField,
                 config: FortetConfig = FortetConfig(),
                 constants: PhysicalConstants = PhysicalConstants()) -> BridgeSolution:
    """Schrödinger bridge between two densities over the diffusion with drift ``drift``.

    Starts from phi(., t1) = 1 and alternates
    phihat(t0) = rho0 / phi(t0), forward sweep, phi(t1) = rho1 / phihat(t1),
    backward sweep, until both boundary products are within
    ``config.marginal_tolerance`` of their targets in L1.
    """
    grid = rho0.grid
    if rho1.grid != grid:
        raise InvalidField("rho0 and rho1 live on different grids")
    for name, r in (("rho0", rho0), ("rho1", rho1)):
        if np.any(r.values <= 0):
            raise InvalidField(f"{name} must be strictly positive")
        if not r.density:
            raise InvalidField(f"{name} must be flagged as a density")
    lr0, lr1 = np.log(rho0.values), np.log(rho1.values)
    prop = _LogPropagator(grid, drift, constants.diffusion, config)

    U = np.zeros((grid.n_t, grid.n_x))
    UH = np.zeros_like(U)
    history: list[IterationRecord] = []
    floor_hit = False
    monotone = True
    prev = math.inf
    watch0, watch1 = rho0.values > FLOOR_WATCH, rho1.values > FLOOR_WATCH
    for it in range(1, config.max_iterations + 1):
        start = time.perf_counter()
        u0 = np.maximum(U[0], LOG_PHI_FLOOR)
        floor_hit |= bool(np.any((U[0] < LOG_PHI_FLOOR) & watch0))
        UH = prop.forward(lr0 - u0)
        uh1 = np.maximum(UH[-1], LOG_PHI_FLOOR)
        floor_hit |= bool(np.any((UH[-1] < LOG_PHI_FLOOR) & watch1))
        U = prop.backward(lr1 - uh1, pair_with=UH)
        if not (np.all(np.isfinite(U)) and np.all(np.isfinite(UH))):
            raise SchemeInstability(f"non-finite potentials in iteration {it}")
        e0 = _l1(grid, U[0] + UH[0], lr0)
        e1 = _l1(grid, U[-1] + UH[-1], lr1)
        secs = time.perf_counter() - start if config.record_timings else float("nan")
        history.append(IterationRecord(it, e0, e1, secs))
        err = max(e0, e1)
        log.debug("fortet iteration %d: err_t0=%.3e err_t1=%.3e", it, e0, e1)
        if err > prev + config.monotone_slack:
            monotone = False
            log.warning("marginal error increased at iteration %d: %.3e -> %.3e", it, prev, err)
        prev = err
        if e0 <= config.marginal_tolerance and e1 <= config.marginal_tolerance:
            break
    else:
        raise NoConvergence(
            f"no convergence after {config.max_iterations} iterations, last error {prev:.3e}",
            history=[(r.err_t0, r.err_t1) for r in history])

    lrho = U + UH
    peak = lrho.max(axis=1)
    edge = float(np.exp(np.maximum(lrho[:, 0], lrho[:, -1]) - peak).max())
    if edge >= EDGE_RATIO:
        warnings.warn(f"bridge density at the grid edge is {edge:.2e} of its peak; "
                      "widen the domain", RuntimeWarning, stacklevel=2)
    if floor_hit:
        log.warning("division floor was active where the target density exceeds %g", FLOOR_WATCH)
    return BridgeSolution(grid, U, UH, it, prev, tuple(history), monotone, floor_hit, edge)


def bridge_drift(drift: DriftField, phi: FieldSeries | BridgeSolution,
                 constants: PhysicalConstants = PhysicalConstants()) -> DriftField:
    """Drift of the bridge: reference drift plus (hbar/m) grad log phi, tabulated."""
    if isinstance(phi, BridgeSolution):
        grid, log_phi = phi.grid, phi.log_phi
    else:
        grid = phi.grid
        vals = np.asarray(phi.values)
        if np.any(vals <= 0):
            raise NonpositivePhi("phi must be strictly positive")
        log_phi = np.log(vals)
    table = drift.on_grid(grid) + constants.diffusion * grad_array(log_phi, grid.dx)
    return DriftField(grid=grid, table=table, name=f"bridge({drift.name})")
