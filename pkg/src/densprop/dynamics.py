"""State + log-density propagation along trajectories of nonlinear ODE systems.

The state PDF of an autonomous system obeys a first-order transport equation;
along a sample trajectory it reduces to the scalar ODE  d(log rho)/dt = -div f.
Integrating that ODE together with the state yields (x, t, rho) triples that
serve as training and validation data for a density surrogate.

Each trajectory integration is a pure function of (system, x0, grid,
tolerances) and safe to run concurrently; datasets are assembled in
trajectory-index order, so parallelism can never change the output.
SystemModel instances are immutable after construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .textio import fmt_float, parse_kv, read_kv, write_kv

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


class IntegrationError(RuntimeError):
    """Adaptive integration could not continue (stiff blow-up or non-finite state)."""

    def __init__(self, message, t_reached=None, trajectory_index=None):
        super().__init__(message)
        self.t_reached = t_reached
        self.trajectory_index = trajectory_index


class DataValidationError(ValueError):
    """A dataset or query violates a documented precondition."""


# ---------------------------------------------------------------------------
# Initial density: diagonal-covariance Gaussian mixture
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InitialDensity:
    """Mixture of axis-aligned Gaussians: weights (m,), means (m, d), stdevs (m, d)."""

    weights: np.ndarray
    means: np.ndarray
    stdevs: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        sd = np.atleast_2d(np.asarray(self.stdevs, dtype=float))
        if mu.shape != sd.shape or mu.shape[0] != w.shape[0]:
            raise ValueError("mixture components have inconsistent shapes")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {w.sum()!r}, expected 1")
        if np.any(w < 0):
            raise ValueError("mixture weights must be nonnegative")
        if np.any(sd <= 0):
            raise ValueError("all stdev entries must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "stdevs", sd)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def gaussian(cls, mean, stdev) -> "InitialDensity":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        stdev = np.atleast_1d(np.asarray(stdev, dtype=float))
        return cls(np.array([1.0]), mean[None, :], stdev[None, :])

    @classmethod
    def mixture(cls, components) -> "InitialDensity":
        """components: iterable of (weight, mean, stdev)."""
        w = np.array([c[0] for c in components], dtype=float)
        mu = np.array([np.atleast_1d(c[1]) for c in components], dtype=float)
        sd = np.array([np.atleast_1d(c[2]) for c in components], dtype=float)
        return cls(w, mu, sd)

    def log_pdf(self, x) -> np.ndarray:
        """log rho0 at x, shape (..., d) -> (...)."""
        x = np.asarray(x, dtype=float)
        z = (x[..., None, :] - self.means) / self.stdevs
        comp = -0.5 * np.sum(z * z, axis=-1) - np.sum(np.log(self.stdevs), axis=-1) \
            - 0.5 * self.dim * LOG_2PI
        comp = comp + np.log(self.weights)
        # logsumexp over the component axis
        m = np.max(comp, axis=-1)
        return m + np.log(np.sum(np.exp(comp - m[..., None]), axis=-1))

    def pdf(self, x) -> np.ndarray:
        return np.exp(self.log_pdf(x))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        idx = rng.choice(len(self.weights), size=n, p=self.weights)
        normals = rng.standard_normal((n, self.dim))
        return self.means[idx] + self.stdevs[idx] * normals

    def sample_one(self, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(len(self.weights), p=self.weights)
        return self.means[idx] + self.stdevs[idx] * rng.standard_normal(self.dim)


def sample_initial(density: InitialDensity, n: int, seed) -> np.ndarray:
    """n i.i.d. draws from the initial density; deterministic per seed."""
    rng = np.random.default_rng(seed)
    return density.sample(n, rng)


# ---------------------------------------------------------------------------
# System model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SystemModel:
    """Autonomous ODE with analytic divergence and an initial state density.

    vector_field and divergence accept both single states (d,) and batches
    (n, d); batch support keeps collocation-point preparation vectorized.
    """

    name: str
    dim: int
    vector_field: Callable[[np.ndarray], np.ndarray]
    divergence: Callable[[np.ndarray], np.ndarray]
    initial_density: InitialDensity

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.initial_density.dim != self.dim:
            raise ValueError("initial density dimension does not match system dimension")

    def f(self, x):
        return self.vector_field(np.asarray(x, dtype=float))

    def div_f(self, x):
        return self.divergence(np.asarray(x, dtype=float))


def finite_difference_divergence(sys: SystemModel, x, step: float = 1e-6) -> float:
    """Central-difference trace of the Jacobian; the independent check for div_f."""
    x = np.asarray(x, dtype=float)
    total = 0.0
    for i in range(sys.dim):
        e = np.zeros(sys.dim)
        e[i] = step
        total += (sys.f(x + e)[i] - sys.f(x - e)[i]) / (2.0 * step)
    return total


def check_divergence_consistency(sys: SystemModel, n_points: int = 100, seed=0,
                                 rel_tol: float = 1e-5, step: float = 1e-6) -> None:
    """Raise if the analytic divergence disagrees with finite differences."""
    rng = np.random.default_rng(seed)
    pts = sys.initial_density.sample(n_points, rng)
    for x in pts:
        fd = finite_difference_divergence(sys, x, step)
        an = float(sys.div_f(x))
        if abs(fd - an) > rel_tol * max(1.0, abs(an)):
            raise ValueError(
                f"divergence mismatch for {sys.name} at {x}: analytic {an}, fd {fd}")


# ---------------------------------------------------------------------------
# Trajectories and datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray        # (K,), strictly increasing, times[0] = 0
    states: np.ndarray       # (K, d)
    log_densities: np.ndarray  # (K,)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing and start at 0")


@dataclass
class CharacteristicDataset:
    """Flattened (x, t, log rho) records harvested from sample trajectories."""

    states: np.ndarray       # (n, d)
    times: np.ndarray        # (n,)
    log_rho: np.ndarray      # (n,)
    traj_index: np.ndarray   # (n,) int provenance
    snap_index: np.ndarray   # (n,) int provenance

    def __post_init__(self):
        n = len(self.times)
        if not (len(self.states) == len(self.log_rho) == len(self.traj_index)
                == len(self.snap_index) == n):
            raise ValueError("dataset arrays have inconsistent lengths")
        if np.any(np.isnan(self.log_rho)) or np.any(self.log_rho == np.inf):
            raise DataValidationError("log_rho contains NaN or +inf entries")
        if np.any(self.times < 0):
            raise DataValidationError("negative snapshot times")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def rho(self) -> np.ndarray:
        return np.exp(self.log_rho)

    def restrict(self, t_max: float) -> "CharacteristicDataset":
        """Points with t <= t_max (tolerant to roundoff at the boundary)."""
        mask = self.times <= t_max * (1.0 + 1e-12)
        return CharacteristicDataset(self.states[mask], self.times[mask],
                                     self.log_rho[mask], self.traj_index[mask],
                                     self.snap_index[mask])

    def extend(self, other: "CharacteristicDataset") -> "CharacteristicDataset":
        return CharacteristicDataset(
            np.concatenate([self.states, other.states]),
            np.concatenate([self.times, other.times]),
            np.concatenate([self.log_rho, other.log_rho]),
            np.concatenate([self.traj_index, other.traj_index]),
            np.concatenate([self.snap_index, other.snap_index]),
        )

    @property
    def n_trajectories(self) -> int:
        return len(np.unique(self.traj_index))


def _flatten_trajectories(trajectories) -> CharacteristicDataset:
    states, times, logr, ti, si = [], [], [], [], []
    for j, traj in enumerate(trajectories):
        k = len(traj.times)
        states.append(traj.states)
        times.append(traj.times)
        logr.append(traj.log_densities)
        ti.append(np.full(k, j, dtype=np.int64))
        si.append(np.arange(k, dtype=np.int64))
    return CharacteristicDataset(np.concatenate(states), np.concatenate(times),
                                 np.concatenate(logr), np.concatenate(ti),
                                 np.concatenate(si))


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4) adaptive integrator
# ---------------------------------------------------------------------------

# Butcher tableau (coefficients of the classic DOPRI5 pair)
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# b5 - b4: error-estimate weights
_DP_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0


def _initial_step(rhs, t0, y0, f0, t_end, rtol, atol):
    """Hairer-style cheap guess for the first step size."""
    scale = atol + rtol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0 + h0 * f0
    f1 = rhs(t0 + h0, y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, t_end - t0)


def _dopri_step(rhs, t, y, h):
    """One embedded step; returns (y5, error_estimate, stages)."""
    k = np.empty((7, y.size))
    k[0] = rhs(t, y)
    for i in range(1, 7):
        yi = y + h * (_DP_A[i] @ k[:i])
        k[i] = rhs(t + _DP_C[i] * h, yi)
    y5 = y + h * (_DP_B5 @ k)
    err = h * (_DP_E @ k)
    return y5, err


def integrate_trajectory(sys: SystemModel, x0, snapshots, rtol: float = 1e-8,
                         atol: float = 1e-8, trajectory_index=None) -> Trajectory:
    """Integrate the state ODE together with  d(log rho)/dt = -div f.

    Propagating the log of the density keeps rapidly growing densities inside
    floating-point range. snapshots must be ascending and start at 0; the
    output holds the exact step endpoints (no dense interpolation).
    """
    snapshots = np.asarray(snapshots, dtype=float)
    if snapshots[0] != 0.0 or np.any(np.diff(snapshots) <= 0):
        raise ValueError("snapshots must be ascending and start at 0")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (sys.dim,):
        raise ValueError(f"x0 has shape {x0.shape}, expected ({sys.dim},)")
    log_rho0 = float(sys.initial_density.log_pdf(x0))
    if not np.isfinite(log_rho0):
        raise ValueError("initial density vanishes at x0")

    def rhs(t, y):
        x = y[:-1]
        out = np.empty_like(y)
        out[:-1] = sys.f(x)
        out[-1] = -sys.div_f(x)
        return out

    def fail(msg, t_reached):
        label = "" if trajectory_index is None else f" (trajectory {trajectory_index})"
        raise IntegrationError(f"{msg}{label} at t={t_reached:.6g} for system {sys.name!r}",
                               t_reached=t_reached, trajectory_index=trajectory_index)

    # augmented state: (x, log-density offset relative to t=0)
    y = np.concatenate([x0, [0.0]])
    t = 0.0
    t_end = float(snapshots[-1])
    states = np.empty((len(snapshots), sys.dim))
    offsets = np.empty(len(snapshots))
    states[0] = x0
    offsets[0] = 0.0

    if t_end == 0.0:
        return Trajectory(snapshots, states, offsets + log_rho0)

    f0 = rhs(t, y)
    if not np.all(np.isfinite(f0)):
        fail("non-finite vector field", t)
    h = _initial_step(rhs, t, y, f0, t_end, rtol, atol)
    next_snap = 1

    while t < t_end:
        h_min = 16.0 * np.finfo(float).eps * max(abs(t), 1.0)
        if h < h_min:
            fail("step size underflow", t)
        clipped = False
        if t + h >= snapshots[next_snap]:
            h_try = snapshots[next_snap] - t
            clipped = True
        else:
            h_try = h
        y_new, err = _dopri_step(rhs, t, y, h_try)
        if not np.all(np.isfinite(y_new)):
            # treat like a rejected step: shrink and retry
            h = h_try * _MIN_FACTOR
            if h < h_min:
                fail("non-finite state", t)
            continue
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err_norm = np.sqrt(np.mean((err / scale) ** 2))
        if err_norm <= 1.0:
            y = y_new
            factor = _MAX_FACTOR if err_norm == 0.0 else min(
                _MAX_FACTOR, max(_MIN_FACTOR, _SAFETY * err_norm ** -0.2))
            if clipped:
                t = snapshots[next_snap]
                states[next_snap] = y[:-1]
                offsets[next_snap] = y[-1]
                next_snap += 1
                # a clipped step says little about the natural step size
                h = max(h, h_try) * min(1.0, factor)
                if next_snap >= len(snapshots):
                    break
            else:
                t = t + h_try
                h = h_try * factor
        else:
            factor = max(_MIN_FACTOR, _SAFETY * err_norm ** -0.2)
            h = h_try * factor

    return Trajectory(snapshots, states, offsets + log_rho0)


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

def generate_dataset(sys: SystemModel, n_traj: int, snapshots, seed,
                     rtol: float = 1e-8, atol: float = 1e-8,
                     max_resample: int | None = None) -> CharacteristicDataset:
    """Sample n_traj initial conditions, integrate each, flatten to a dataset.

    Trajectories that fail to integrate (stiff blow-up, kinematic singularity)
    are dropped and replaced by a fresh draw from an advanced seed stream; each
    replacement is logged. Fully deterministic for a given seed.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    snapshots = np.asarray(snapshots, dtype=float)
    rng = np.random.default_rng(seed)
    initials = sys.initial_density.sample(n_traj, rng)
    if max_resample is None:
        max_resample = 10 * n_traj

    trajectories = []
    resamples = 0
    for j in range(n_traj):
        x0 = initials[j]
        while True:
            try:
                trajectories.append(
                    integrate_trajectory(sys, x0, snapshots, rtol, atol, trajectory_index=j))
                break
            except IntegrationError as exc:
                resamples += 1
                if resamples > max_resample:
                    raise IntegrationError(
                        f"gave up after {resamples} resampled trajectories: {exc}",
                        t_reached=exc.t_reached, trajectory_index=j) from exc
                logger.warning("dropping failed trajectory %d (%s); resampling", j, exc)
                x0 = sys.initial_density.sample(1, rng)[0]
    return _flatten_trajectories(trajectories)


# ---------------------------------------------------------------------------
# Persistence: delimited table plus plain-text metadata sidecar
# ---------------------------------------------------------------------------

def dataset_sidecar_path(path) -> str:
    path = str(path)
    stem = path[:-4] if path.endswith(".csv") else path
    return stem + ".meta"


def save_dataset(ds: CharacteristicDataset, path, metadata: dict | None = None) -> None:
    d = ds.dim
    header = "traj,snap,t," + ",".join(f"x{i + 1}" for i in range(d)) + ",log_rho"
    lines = [header]
    for i in range(len(ds)):
        cols = [str(int(ds.traj_index[i])), str(int(ds.snap_index[i])), fmt_float(ds.times[i])]
        cols.extend(fmt_float(v) for v in ds.states[i])
        cols.append(fmt_float(ds.log_rho[i]))
        lines.append(",".join(cols))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    meta = {"format": "densprop-dataset-1", "dim": str(d), "points": str(len(ds))}
    if metadata:
        meta.update({k: str(v) for k, v in metadata.items()})
    write_kv(dataset_sidecar_path(path), meta)


def load_dataset(path) -> tuple[CharacteristicDataset, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        cols = header.split(",")
        if cols[:3] != ["traj", "snap", "t"] or cols[-1] != "log_rho":
            raise DataValidationError(f"{path}: unrecognized dataset header {header!r}")
        d = len(cols) - 4
        rows = np.loadtxt(fh, delimiter=",", ndmin=2)
    if rows.size == 0:
        raise DataValidationError(f"{path}: empty dataset")
    ds = CharacteristicDataset(
        states=rows[:, 3:3 + d],
        times=rows[:, 2],
        log_rho=rows[:, 3 + d],
        traj_index=rows[:, 0].astype(np.int64),
        snap_index=rows[:, 1].astype(np.int64),
    )
    meta_path = dataset_sidecar_path(path)
    try:
        metadata = read_kv(meta_path)
    except FileNotFoundError:
        metadata = {}
    return ds, metadata
