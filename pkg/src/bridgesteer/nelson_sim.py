"""
Monte Carlo for Nelson diffusions dX = b(X, t) dt + sqrt(eps) dW.

Every path owns a Philox substream keyed by the run seed with the path index
in the second counter word, so results do not depend on chunking or thread
scheduling.  Initial positions come from a separately keyed stream.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.integrate import cumulative_trapezoid

from .errors import ConfigError, DomainExit, DriftBlowup, InvalidDensity, SliceNotSaved
from .grid_field import RealField
from .schrodinger_system import DriftField

log = logging.getLogger(__name__)

DEFAULT_SEED = 20231019
KS_COEFFICIENT = 1.63  # asymptotic Kolmogorov critical value at alpha ~ 0.01
VARIANCE_FLOOR = 1e-12
MAX_CLAMP_FRACTION = 1e-4
THREADS_ENV = "BRIDGESTEER_THREADS"


@dataclass(frozen=True)
class SimulationConfig:
    """Euler-Maruyama settings.

    ``brownian_refinement = r`` builds every increment from r standard
    normals, so a run with (dt, r=2) sees exactly the Brownian path of a run
    with (dt/2, r=1) and the two can be compared pathwise.
    """

    n_paths: int = 100_000
    dt_sim: float = 1e-3
    seed: int = DEFAULT_SEED
    epsilon: float = 1.0
    t0: float = 0.0
    t1: float = 1.0
    save_every: int = 10
    x_min: float = -6.0
    x_max: float = 7.0
    chunk_size: int = 4096
    brownian_refinement: int = 1
    threads: int | None = None

    def __post_init__(self):
        if self.n_paths < 1000:
            raise ConfigError("n_paths must be at least 1000")
        if not (self.dt_sim > 0 and self.epsilon > 0):
            raise ConfigError("dt_sim and epsilon must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if not self.t0 < self.t1 or not self.x_min < self.x_max:
            raise ConfigError("empty time horizon or domain")
        steps = (self.t1 - self.t0) / self.dt_sim
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ConfigError("dt_sim must divide the time horizon")
        if self.save_every < 1 or self.chunk_size < 1 or self.brownian_refinement < 1:
            raise ConfigError("save_every, chunk_size and brownian_refinement must be positive")

    @property
    def n_steps(self) -> int:
        return int(round((self.t1 - self.t0) / self.dt_sim))

    @property
    def saved_steps(self) -> np.ndarray:
        idx = np.arange(0, self.n_steps + 1, self.save_every)
        if idx[-1] != self.n_steps:
            idx = np.append(idx, self.n_steps)
        return idx

    @property
    def saved_times(self) -> np.ndarray:
        return self.t0 + self.saved_steps * self.dt_sim

    def worker_count(self) -> int:
        if self.threads is not None:
            return max(1, int(self.threads))
        env = os.environ.get(THREADS_ENV)
        return max(1, int(env)) if env else 1


@dataclass(frozen=True)
class GaussianDensity:
    mean: float
    var: float

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.var)):
            raise InvalidDensity("Gaussian parameters must be finite")
        if self.var < VARIANCE_FLOOR:
            raise InvalidDensity(f"variance {self.var} is below the floor {VARIANCE_FLOOR}")

    @property
    def std(self) -> float:
        return math.sqrt(self.var)

    def pdf(self, x):
        return stats.norm.pdf(x, self.mean, self.std)

    def cdf(self, x):
        return stats.norm.cdf(x, self.mean, self.std)


def gaussian_kl(q: GaussianDensity, p: GaussianDensity) -> float:
    """KL(q || p) between two univariate Gaussians."""
    return 0.5 * (math.log(p.var / q.var) + (q.var + (q.mean - p.mean) ** 2) / p.var - 1.0)


def _stream_key(seed: int, purpose: int) -> np.ndarray:
    return np.random.SeedSequence([seed, purpose]).generate_state(2, np.uint64)


def _grid_density(rho: RealField):
    vals = np.asarray(rho.values, dtype=float)
    if np.any(vals < 0) or not np.all(np.isfinite(vals)):
        raise InvalidDensity("density must be non-negative and finite")
    x = rho.grid.x
    cdf = cumulative_trapezoid(vals, x, initial=0.0)
    mass = cdf[-1]
    if not mass > 0:
        raise InvalidDensity("density has zero mass")
    return x, vals / mass, cdf / mass


def density_moments(target: RealField | GaussianDensity) -> tuple[float, float]:
    if isinstance(target, GaussianDensity):
        return target.mean, target.var
    x, p, _ = _grid_density(target)
    w = target.grid.weights
    mean = float(np.sum(w * x * p))
    return mean, float(np.sum(w * (x - mean) ** 2 * p))


def density_cdf(target: RealField | GaussianDensity):
    if isinstance(target, GaussianDensity):
        return target.cdf
    x, _, cdf = _grid_density(target)
    return lambda s: np.interp(s, x, cdf)


def sample_initial(rho0: RealField | GaussianDensity, n: int, seed: int = DEFAULT_SEED) -> np.ndarray:
    """Draw n i.i.d. starting points.

    Gaussians are sampled exactly; gridded densities by inverting the
    trapezoid CDF.  The first k samples do not depend on n.
    """
    if n < 1:
        raise ValueError("n must be positive")
    gen = np.random.Generator(np.random.Philox(key=_stream_key(seed, 0)))
    if isinstance(rho0, GaussianDensity):
        return rho0.mean + rho0.std * gen.standard_normal(n)
    x, p, cdf = _grid_density(rho0)
    w = rho0.grid.weights
    mean = np.sum(w * x * p)
    if np.sum(w * (x - mean) ** 2 * p) < VARIANCE_FLOOR:
        raise InvalidDensity("density is numerically a point mass")
    # strictly increasing abscissa for inversion: drop flat CDF stretches
    keep = np.concatenate([[True], np.diff(cdf) > 0])
    return np.interp(gen.random(n), cdf[keep], x[keep])


@dataclass(frozen=True)
class PathEnsemble:
    """Positions of every path at the saved times.

    ``action`` and ``likelihood`` are per-path Girsanov functionals against
    ``reference_name`` when a reference drift was supplied to :func:`simulate`.
    """

    times: np.ndarray
    positions: np.ndarray
    seed: int
    drift_name: str
    config: SimulationConfig
    clamp_count: int = 0
    reference_name: str | None = None
    action: np.ndarray | None = None
    likelihood: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return self.positions.shape[1]

    @property
    def initial(self) -> np.ndarray:
        return self.positions[0]

    def slice_at(self, t: float, tol: float = 1e-9) -> np.ndarray:
        hits = np.flatnonzero(np.abs(self.times - t) <= tol * max(1.0, abs(t)))
        if hits.size == 0:
            raise SliceNotSaved(f"t={t} is not a saved slice")
        return self.positions[hits[0]]

    def write_paths_csv(self, path) -> Path:
        """One row per path per saved slice; large."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "t", "x"])
            for i in range(self.n_paths):
                for t, xv in zip(self.times, self.positions[:, i]):
                    w.writerow([i, format(t, ".17g"), format(xv, ".17g")])
        return path


class _PathNoise:
    """Standard normals of path i: Philox with counter (0, i, 0, 0)."""

    def __init__(self, seed: int):
        self.key = _stream_key(seed, 1)
        self.bg = np.random.Philox(key=self.key)
        self.gen = np.random.Generator(self.bg)

    def fill(self, first: int, out: np.ndarray) -> None:
        """Row j of ``out`` receives the stream of path ``first + j``."""
        counter = np.zeros(4, dtype=np.uint64)
        for j in range(out.shape[0]):
            counter[1] = first + j
            self.bg.state = {"bit_generator": "Philox",
                             "state": {"counter": counter, "key": self.key},
                             "buffer": np.zeros(4, dtype=np.uint64), "buffer_pos": 4,
                             "has_uint32": 0, "uinteger": 0}
            self.gen.standard_normal(out=out[j])


def _run_chunk(drift, reference, x0, first, cfg: SimulationConfig, noise: _PathNoise):
    n = x0.size
    r = cfg.brownian_refinement
    z = np.empty((n, cfg.n_steps * r))
    noise.fill(first, z)
    if r > 1:
        z = z.reshape(n, cfg.n_steps, r).sum(axis=2) / math.sqrt(r)
    z = np.ascontiguousarray(z.T)
    dt = cfg.dt_sim
    sq_dt = math.sqrt(dt)
    sq_eps = math.sqrt(cfg.epsilon)
    width = cfg.x_max - cfg.x_min
    saved = cfg.saved_steps
    out = np.empty((saved.size, n))
    out[0] = x = np.array(x0, dtype=float)
    slot = 1
    clamps = 0
    action = lik = None
    if reference is not None:
        action = np.zeros(n)
        lik = np.zeros(n)
    prev_gap2 = None
    for k in range(cfg.n_steps):
        t = cfg.t0 + k * dt
        xc = np.clip(x, cfg.x_min, cfg.x_max)
        clamps += int(np.count_nonzero(xc != x))
        b = drift(xc, t)
        if np.any(~np.isfinite(b)) or np.any(np.abs(b * dt) > width):
            raise DriftBlowup(f"drift step exceeds the domain width at t={t:.6g}")
        dW = sq_dt * z[k]
        if reference is not None:
            gap = b - reference(xc, t)
            gap2 = gap * gap
            lik += gap * dW / sq_eps
            if prev_gap2 is not None:
                action += 0.5 * (prev_gap2 + gap2) * dt
            prev_gap2 = gap2
        x = x + b * dt + sq_eps * dW
        if slot < saved.size and saved[slot] == k + 1:
            out[slot] = x
            slot += 1
    if reference is not None:
        t = cfg.t1
        xc = np.clip(x, cfg.x_min, cfg.x_max)
        gap = drift(xc, t) - reference(xc, t)
        action += 0.5 * (prev_gap2 + gap * gap) * dt
        action /= 2.0 * cfg.epsilon
        lik += action
    return out, clamps, action, lik


def simulate(drift: DriftField, initial: np.ndarray, config: SimulationConfig = SimulationConfig(),
             reference_drift: DriftField | None = None) -> PathEnsemble:
    """Euler-Maruyama paths from ``initial`` under ``drift``.

    The drift is evaluated at positions clamped to [x_min, x_max].  A warning
    is issued if any clamp happens and :class:`DomainExit` is raised when
    more than 0.01% of path-steps clamp.  With ``reference_drift`` the per-path
    Girsanov action and log-likelihood ratio against it are accumulated.
    """
    x0 = np.asarray(initial, dtype=float)
    if x0.ndim != 1 or x0.size != config.n_paths:
        raise ConfigError(f"expected {config.n_paths} initial positions, got shape {x0.shape}")
    n = x0.size
    starts = list(range(0, n, config.chunk_size))
    saved = config.saved_steps
    positions = np.empty((saved.size, n))
    action = np.empty(n) if reference_drift is not None else None
    lik = np.empty(n) if reference_drift is not None else None
    workers = min(config.worker_count(), len(starts))

    def job(lo):
        hi = min(lo + config.chunk_size, n)
        return lo, hi, _run_chunk(drift, reference_drift, x0[lo:hi], lo, config,
                                  _PathNoise(config.seed))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, starts))
    else:
        results = [job(lo) for lo in starts]
    clamps = 0
    for lo, hi, (out, c, a, l) in results:
        positions[:, lo:hi] = out
        clamps += c
        if action is not None:
            action[lo:hi] = a
            lik[lo:hi] = l
    if clamps:
        frac = clamps / (n * config.n_steps)
        if frac > MAX_CLAMP_FRACTION:
            raise DomainExit(f"{frac:.2e} of path-steps left the domain")
        warnings.warn(f"{clamps} path-steps evaluated the drift at a clamped position",
                      RuntimeWarning, stacklevel=2)
    return PathEnsemble(config.saved_times, positions, config.seed, drift.name, config, clamps,
                        reference_drift.name if reference_drift is not None else None,
                        action, lik)


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class MarginalReport:
    t: float
    n: int
    mean: float
    var: float
    target_mean: float
    target_var: float
    ks_stat: float
    ks_threshold: float
    mean_band: float
    var_band: float

    @property
    def mean_ok(self) -> bool:
        return abs(self.mean - self.target_mean) <= self.mean_band

    @property
    def var_ok(self) -> bool:
        return abs(self.var - self.target_var) <= self.var_band * self.target_var

    @property
    def ks_ok(self) -> bool:
        return self.ks_stat < self.ks_threshold

    @property
    def passed(self) -> bool:
        return self.mean_ok and self.var_ok and self.ks_ok


def marginal_test(ensemble: PathEnsemble, t: float, target: RealField | GaussianDensity,
                  mean_sigmas: float = 3.0, var_tolerance: float = 0.05) -> MarginalReport:
    """Compare the empirical law at time t with a target density.

    Passes iff the mean lies within ``mean_sigmas`` target standard errors,
    the variance within ``var_tolerance`` relative, and the Kolmogorov-Smirnov
    statistic below 1.63/sqrt(n).
    """
    xs = ensemble.slice_at(t)
    n = xs.size
    tm, tv = density_moments(target)
    ks = float(stats.kstest(xs, density_cdf(target)).statistic)
    return MarginalReport(t, n, float(np.mean(xs)), float(np.var(xs, ddof=1)), tm, tv, ks,
                          KS_COEFFICIENT / math.sqrt(n), mean_sigmas * math.sqrt(tv / n),
                          var_tolerance)


@dataclass(frozen=True)
class EntropyEstimate:
    """Relative entropy estimate: path term plus initial-marginal term."""

    value: float
    stderr: float
    n_paths: int
    path_term: float
    marginal_term: float
    method: str


def entropy_estimate(ensemble: PathEnsemble, p_drift: DriftField, q_drift: DriftField,
                     config: SimulationConfig | None = None, marginal_entropy: float = 0.0,
                     method: str = "action") -> EntropyEstimate:
    """Monte Carlo H(Q, P) for paths of ``ensemble`` simulated under ``q_drift``.

    ``method="action"`` averages (1/2 eps) int |b_Q - b_P|^2 dt (trapezoid in
    time).  ``method="likelihood"`` averages the full log-likelihood ratio,
    which adds the zero-mean Ito integral (1/sqrt eps) int (b_Q - b_P) dW;
    its spread is informative even when the drift gap is deterministic.
    The paths are regenerated from the ensemble seed unless the ensemble
    already carries functionals against ``p_drift``.
    """
    if method not in ("action", "likelihood"):
        raise ValueError(f"unknown method {method!r}")
    config = config or ensemble.config
    if ensemble.action is None or ensemble.reference_name != p_drift.name \
            or ensemble.drift_name != q_drift.name or config != ensemble.config:
        ensemble = simulate(q_drift, ensemble.initial, config, reference_drift=p_drift)
    per_path = ensemble.action if method == "action" else ensemble.likelihood
    n = per_path.size
    path_term = float(np.mean(per_path))
    se = float(np.std(per_path, ddof=1) / math.sqrt(n))
    return EntropyEstimate(path_term + marginal_entropy, se, n, path_term, marginal_entropy, method)


def summary_rows(ensemble: PathEnsemble, targets: dict[float, RealField | GaussianDensity] | None = None):
    """Rows ``t, mean, var, ks_stat, n`` for every saved slice; ks_stat is nan without a target."""
    targets = targets or {}
    rows = []
    for t, xs in zip(ensemble.times, ensemble.positions):
        target = next((v for k, v in targets.items() if abs(k - t) <= 1e-9), None)
        ks = float(stats.kstest(xs, density_cdf(target)).statistic) if target is not None else float("nan")
        rows.append((float(t), float(np.mean(xs)), float(np.var(xs, ddof=1)), ks, xs.size))
    return rows


def write_summary_csv(path, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "mean", "var", "ks_stat", "n"])
        for t, m, v, ks, n in rows:
            w.writerow([format(t, ".17g"), format(m, ".17g"), format(v, ".17g"), format(ks, ".17g"), n])
    return path
