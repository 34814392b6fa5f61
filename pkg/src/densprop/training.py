"""Physics-informed training of the log-density network.

The objective couples a weighted log-space regression on characteristics data
with the mean squared transport-equation residual over collocation points.
Multi-round training grows both sample sets until variance-based norm tests
certify that the batch gradients approximate their infinite-data limits, and
a horizon schedule retrains the same network on successively longer time
windows (transfer learning).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .density_net import (DensityNetwork, NetworkArchitecture, backward_mixed,
                          backward_mixed_per_sample, backward_value,
                          backward_value_per_sample, forward_cache,
                          forward_tangent, initialize_network, join_inputs,
                          scaling_from_ranges)
from .dynamics import (CharacteristicDataset, DataValidationError, SystemModel,
                       generate_dataset)
from .textio import fmt_float, read_kv, write_kv

logger = logging.getLogger(__name__)

_CHUNK = 16384          # fixed evaluation chunk: bounds memory, keeps sums ordered
_VARIANCE_CHUNK = 512   # per-sample gradient matrices are materialized per chunk

WEIGHT_SCHEMES = ("rho", "sqrt_rho", "unit")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.5
    weight_scheme: str = "rho"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.weight_scheme not in WEIGHT_SCHEMES:
            raise ValueError(f"weight_scheme must be one of {WEIGHT_SCHEMES}")


@dataclass(frozen=True)
class AdaptiveConfig:
    eps_rho: float = 6e-4
    eps_pde: float = 3e-4
    s_rho: float = 2.0
    s_pde: float = 2.0
    variance_subset_cap: int = 10_000
    max_rounds: int = 8
    final_horizon_only: bool = False

    def __post_init__(self):
        if min(self.eps_rho, self.eps_pde) <= 0:
            raise ValueError("norm-test tolerances must be positive")
        if min(self.s_rho, self.s_pde) <= 1:
            raise ValueError("growth caps must exceed 1")
        if self.variance_subset_cap < 2 or self.max_rounds < 1:
            raise ValueError("variance_subset_cap must be >= 2 and max_rounds >= 1")


@dataclass(frozen=True)
class HorizonSchedule:
    horizons: tuple
    lambdas: tuple

    def __post_init__(self):
        h = tuple(float(v) for v in self.horizons)
        lam = tuple(float(v) for v in self.lambdas)
        if len(h) == 0 or len(h) != len(lam):
            raise ValueError("horizons and lambdas must be non-empty and equal length")
        if h[0] <= 0 or any(b <= a for a, b in zip(h, h[1:])):
            raise ValueError("horizons must be positive and strictly increasing")
        if any(v < 0 for v in lam):
            raise ValueError("lambdas must be nonnegative")
        object.__setattr__(self, "horizons", h)
        object.__setattr__(self, "lambdas", lam)

    @classmethod
    def single(cls, t_final: float, lam: float) -> "HorizonSchedule":
        return cls((t_final,), (lam,))

    @property
    def t_final(self) -> float:
        return self.horizons[-1]


ORIGIN_FROM_DATA = 0
ORIGIN_UNIFORM = 1


@dataclass
class CollocationSet:
    """Space-time points where the PDE residual is penalized; no density values."""

    states: np.ndarray   # (n, d)
    times: np.ndarray    # (n,)
    origin: np.ndarray   # (n,) int8: 0 = from_data, 1 = uniform_random

    def __len__(self):
        return len(self.times)

    @classmethod
    def from_dataset(cls, data: CharacteristicDataset) -> "CollocationSet":
        n = len(data)
        return cls(data.states.copy(), data.times.copy(),
                   np.full(n, ORIGIN_FROM_DATA, dtype=np.int8))

    def extend(self, other: "CollocationSet") -> "CollocationSet":
        return CollocationSet(np.concatenate([self.states, other.states]),
                              np.concatenate([self.times, other.times]),
                              np.concatenate([self.origin, other.origin]))


def sample_collocation(box, t_max: float, n: int, seed) -> CollocationSet:
    """Uniform i.i.d. points in box x [0, t_max]; box rows are (low, high)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    box = np.atleast_2d(np.asarray(box, dtype=float))
    rng = np.random.default_rng(seed)
    u = rng.random((n, box.shape[0]))
    states = box[:, 0] + u * (box[:, 1] - box[:, 0])
    times = rng.random(n) * t_max
    return CollocationSet(states, times, np.full(n, ORIGIN_UNIFORM, dtype=np.int8))


def inflated_bounding_box(states, inflate: float = 0.1) -> np.ndarray:
    lo = states.min(axis=0)
    hi = states.max(axis=0)
    pad = inflate * (hi - lo)
    return np.stack([lo - pad, hi + pad], axis=1)


# ---------------------------------------------------------------------------
# Network construction from data
# ---------------------------------------------------------------------------

def build_network(hidden, data: CharacteristicDataset, t_max: float,
                  seed) -> DensityNetwork:
    """Input normalization from the data bounding box and [0, t_max]; the output
    bias starts at the mean log-density so exp(psi) opens in range."""
    lows = np.concatenate([data.states.min(axis=0), [0.0]])
    highs = np.concatenate([data.states.max(axis=0), [t_max]])
    shift, scale = scaling_from_ranges(lows, highs)
    arch = NetworkArchitecture(data.dim + 1, tuple(hidden))
    return initialize_network(arch, shift, scale, seed,
                              final_bias=float(np.mean(data.log_rho)))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def data_weights(log_rho: np.ndarray, scheme: str) -> np.ndarray:
    if scheme == "rho":
        return np.exp(log_rho)
    if scheme == "sqrt_rho":
        return np.exp(0.5 * log_rho)
    if scheme == "unit":
        return np.ones_like(log_rho)
    raise ValueError(f"unknown weight scheme {scheme!r}")


def _check_positive_rho(data: CharacteristicDataset) -> None:
    bad = np.nonzero(~np.isfinite(data.log_rho))[0]
    if bad.size:
        i = int(bad[0])
        raise DataValidationError(
            f"data point {i} (trajectory {int(data.traj_index[i])}, snapshot "
            f"{int(data.snap_index[i])}) has nonpositive density; log regression "
            "requires rho > 0")


def loss_data(net: DensityNetwork, data: CharacteristicDataset, scheme: str = "unit"):
    """Weighted mean squared error on log rho; returns (value, parameter gradient)."""
    if len(data) < 1:
        raise ValueError("empty dataset")
    _check_positive_rho(data)
    w = data_weights(data.log_rho, scheme)
    X = join_inputs(data.states, data.times)
    return _loss_data_prepared(net, X, data.log_rho, w)


def _loss_data_prepared(net, X, y, w):
    n = len(y)
    value = 0.0
    grad = np.zeros(net.n_params)
    for start in range(0, n, _CHUNK):
        sl = slice(start, min(start + _CHUNK, n))
        cache = forward_cache(net, X[sl])
        err = cache.psi - y[sl]
        value += float(np.sum(w[sl] * err * err))
        grad += backward_value(net, cache, (2.0 / n) * w[sl] * err)
    return value / n, grad


@dataclass
class PreparedCollocation:
    """Collocation points with the vector field, divergence and the residual
    tangent direction (f(x), 1) precomputed; they are constant during a round."""

    X: np.ndarray         # (n, d+1) raw network inputs
    tangents: np.ndarray  # (n, d+1, 1)
    div_vals: np.ndarray  # (n,)

    def __len__(self):
        return len(self.div_vals)


def prepare_collocation(sys: SystemModel, colloc: CollocationSet) -> PreparedCollocation:
    f_vals = sys.f(colloc.states)
    div_vals = np.asarray(sys.div_f(colloc.states), dtype=float)
    X = join_inputs(colloc.states, colloc.times)
    tangents = np.concatenate([f_vals, np.ones((len(X), 1))], axis=1)[:, :, None]
    return PreparedCollocation(X, tangents, div_vals)


def residual(net: DensityNetwork, sys: SystemModel, x, t):
    """Squared transport-equation residual at (x, t):
    (rho * (dpsi/dt + grad psi . f + div f))^2 with psi = log rho."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    states = np.atleast_2d(x)
    times = np.broadcast_to(np.asarray(t, dtype=float), states.shape[:1])
    prep = prepare_collocation(
        sys, CollocationSet(states, np.array(times, dtype=float),
                            np.zeros(len(states), dtype=np.int8)))
    cache = forward_tangent(net, prep.X, prep.tangents)
    r = np.exp(cache.psi) * (cache.dpsi[:, 0] + prep.div_vals)
    out = r * r
    return float(out[0]) if single else out


def loss_pde(net: DensityNetwork, sys: SystemModel, colloc: CollocationSet):
    """Mean squared residual over the collocation set; returns (value, gradient)."""
    if len(colloc) < 1:
        raise ValueError("empty collocation set")
    return _loss_pde_prepared(net, prepare_collocation(sys, colloc))


def _loss_pde_prepared(net, prep: PreparedCollocation):
    n = len(prep)
    value = 0.0
    grad = np.zeros(net.n_params)
    for start in range(0, n, _CHUNK):
        sl = slice(start, min(start + _CHUNK, n))
        cache = forward_tangent(net, prep.X[sl], prep.tangents[sl])
        rho = np.exp(cache.psi)
        m = cache.dpsi[:, 0] + prep.div_vals[sl]
        r = rho * m
        value += float(np.sum(r * r))
        scale = (2.0 / n) * r * rho
        grad += backward_mixed(net, cache, scale * m, scale)
    return value / n, grad


def residual_param_gradient(net: DensityNetwork, sys: SystemModel, x, t) -> np.ndarray:
    """Exact parameter gradient of the squared residual at a single point."""
    states = np.atleast_2d(np.asarray(x, dtype=float))
    times = np.atleast_1d(np.asarray(t, dtype=float))
    prep = prepare_collocation(
        sys, CollocationSet(states, times, np.zeros(1, dtype=np.int8)))
    cache = forward_tangent(net, prep.X, prep.tangents)
    rho = np.exp(cache.psi)
    m = cache.dpsi[:, 0] + prep.div_vals
    scale = 2.0 * rho * m * rho
    return backward_mixed(net, cache, scale * m, scale)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LbfgsOptions:
    max_iter: int = 500
    history: int = 10
    gtol: float = 1e-9
    ftol: float = 1e-12
    c1: float = 1e-4
    c2: float = 0.9
    max_line_search: int = 25


@dataclass
class OptimizeResult:
    theta: np.ndarray
    value: float
    grad_norm: float
    iterations: int
    n_evals: int
    converged: str             # gtol | ftol | max_iter | line_search
    line_search_failed: bool
    trace: list = field(default_factory=list)


def _quad_interp_min(a, fa, ga, b, fb):
    """Minimizer of the quadratic through (a, fa, ga) and (b, fb)."""
    if not (np.isfinite(fa) and np.isfinite(fb) and np.isfinite(ga)):
        return 0.5 * (a + b)
    denom = fb - fa - ga * (b - a)
    if denom == 0:
        return 0.5 * (a + b)
    t = -ga * (b - a) ** 2 / (2.0 * denom)
    return a + t


def _strong_wolfe(phi, f0, g0, alpha0, c1, c2, max_evals):
    """Line search satisfying the strong Wolfe conditions.

    phi(a) -> (f, slope). Returns (alpha, f, slope, evals, ok); on failure
    alpha is the last sufficient-decrease point found (possibly 0).
    """
    a_prev, f_prev, g_prev = 0.0, f0, g0
    a = alpha0
    evals = 0

    def zoom(lo, f_lo, g_lo, hi, f_hi, evals):
        for _ in range(max(0, max_evals - evals)):
            width = hi - lo
            aj = _quad_interp_min(lo, f_lo, g_lo, hi, f_hi)
            if not np.isfinite(aj) or aj <= min(lo, hi) + 0.1 * abs(width) \
                    or aj >= max(lo, hi) - 0.1 * abs(width):
                aj = lo + 0.5 * width
            fj, gj = phi(aj)
            evals += 1
            if not np.isfinite(fj) or fj > f0 + c1 * aj * g0 or fj >= f_lo:
                hi, f_hi = aj, fj
            else:
                if not np.isfinite(gj):
                    hi, f_hi = aj, fj
                    continue
                if abs(gj) <= -c2 * g0:
                    return aj, fj, gj, evals, True
                if gj * width >= 0:
                    hi, f_hi = lo, f_lo
                lo, f_lo, g_lo = aj, fj, gj
            if abs(hi - lo) < 1e-16 * max(1.0, abs(lo)):
                break
        return lo, f_lo, g_lo, evals, False

    for i in range(max_evals):
        f_a, g_a = phi(a)
        evals += 1
        if not np.isfinite(f_a) or f_a > f0 + c1 * a * g0 or (i > 0 and f_a >= f_prev):
            return zoom(a_prev, f_prev, g_prev, a, f_a, evals)
        if abs(g_a) <= -c2 * g0:
            return a, f_a, g_a, evals, True
        if g_a >= 0:
            return zoom(a, f_a, g_a, a_prev, f_prev, evals)
        a_prev, f_prev, g_prev = a, f_a, g_a
        a = min(2.0 * a, 1e12)
    return a_prev, f_prev, g_prev, evals, False


def lbfgs_minimize(fun, x0, opts: LbfgsOptions = LbfgsOptions()) -> OptimizeResult:
    """Limited-memory BFGS with a strong-Wolfe line search.

    fun(theta) -> (value, gradient). Accepted iterates are monotone
    non-increasing; terminates on gradient norm, relative decrease, or the
    iteration cap. A failed line search returns the best point found with
    line_search_failed set instead of raising.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    evals = 1
    trace = [f]
    s_hist, y_hist, rho_hist = [], [], []
    reason = "max_iter"
    ls_failed = False
    it = 0

    while it < opts.max_iter:
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if gnorm <= opts.gtol:
            reason = "gtol"
            break
        it += 1

        # two-loop recursion for the search direction
        q = g.copy()
        alphas = []
        for s, y, r in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = r * (s @ q)
            q -= a * y
            alphas.append(a)
        if y_hist:
            q *= (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        for (s, y, r), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = r * (y @ q)
            q += s * (a - b)
        d = -q
        derphi0 = float(d @ g)
        if derphi0 >= 0:
            s_hist, y_hist, rho_hist = [], [], []
            d = -g
            derphi0 = float(d @ g)

        grad_cache = {}

        def phi(a, _x=x, _d=d, _cache=grad_cache):
            fv, gv = fun(_x + a * _d)
            _cache[a] = gv
            return fv, float(gv @ _d)

        alpha0 = 1.0 if y_hist else min(1.0, 1.0 / max(1.0, float(np.sum(np.abs(g)))))
        alpha, f_new, _, used, ok = _strong_wolfe(
            phi, f, derphi0, alpha0, opts.c1, opts.c2, opts.max_line_search)
        evals += used
        if not ok and (alpha == 0.0 or not np.isfinite(f_new) or f_new >= f):
            ls_failed = True
            reason = "line_search"
            it -= 1
            break

        g_new = grad_cache.get(alpha)
        if g_new is None:
            _, g_new = fun(x + alpha * d)
            evals += 1
        x_new = x + alpha * d
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > opts.history:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)

        decrease = f - f_new
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        if decrease <= opts.ftol * max(abs(f), 1.0):
            reason = "ftol"
            break

    return OptimizeResult(theta=x, value=f, grad_norm=float(np.max(np.abs(g))),
                          iterations=it, n_evals=evals, converged=reason,
                          line_search_failed=ls_failed, trace=trace)


@dataclass(frozen=True)
class AdamOptions:
    lr: float = 1e-3
    n_iter: int = 3000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_every: int = 1000
    decay_factor: float = 0.5


def adam_minimize(fun, x0, opts: AdamOptions = AdamOptions()) -> OptimizeResult:
    """Adam on a (possibly stochastic) objective fun(theta, iteration) -> (f, g).

    Runs the fixed iteration budget with step-decayed learning rate; with a
    zero learning rate the parameters are returned unchanged.
    """
    x = np.array(x0, dtype=float)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    trace = []
    f = np.nan
    for k in range(opts.n_iter):
        f, g = fun(x, k)
        trace.append(f)
        lr = opts.lr * opts.decay_factor ** (k // opts.decay_every)
        m = opts.beta1 * m + (1 - opts.beta1) * g
        v = opts.beta2 * v + (1 - opts.beta2) * g * g
        mhat = m / (1 - opts.beta1 ** (k + 1))
        vhat = v / (1 - opts.beta2 ** (k + 1))
        x = x - lr * mhat / (np.sqrt(vhat) + opts.eps)
    return OptimizeResult(theta=x, value=float(f), grad_norm=np.nan,
                          iterations=opts.n_iter, n_evals=opts.n_iter,
                          converged="max_iter", line_search_failed=False, trace=trace)


# ---------------------------------------------------------------------------
# Norm test (sample-size sufficiency) and per-sample gradients
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormTestResult:
    ratio: float
    passed: bool
    suggested_next_size: int
    degenerate: bool
    n_total: int
    variance_sum: float
    grad_l1: float


def _norm_test_from_moments(variance_sum, grad_l1, n_total, eps, s_cap):
    if grad_l1 == 0.0 or not np.isfinite(grad_l1):
        return NormTestResult(float("nan"), True, n_total, True, n_total,
                              variance_sum, grad_l1)
    ratio = variance_sum / (n_total * grad_l1)
    passed = bool(ratio <= eps)
    if passed:
        suggested = n_total
    else:
        suggested = math.ceil(variance_sum / (eps * grad_l1))
        if s_cap is not None:
            suggested = min(suggested, math.floor(s_cap * n_total))
        suggested = max(suggested, n_total)
    return NormTestResult(float(ratio), passed, int(suggested), False, n_total,
                          float(variance_sum), float(grad_l1))


def norm_test(per_sample_grads, eps, *, full_grad=None, n_total=None,
              s_cap=None) -> NormTestResult:
    """Variance-to-gradient ratio test on a matrix of per-sample gradients.

    ratio = sum_m Var[g_m] / (N * ||grad||_1); the set is large enough when
    ratio <= eps, otherwise the rearranged bound suggests the next size,
    capped at s_cap * N. A zero mean gradient makes the ratio undefined and
    reports passed with the degenerate flag."""
    G = np.asarray(per_sample_grads, dtype=float)
    if G.ndim != 2 or len(G) < 2:
        raise ValueError("need at least two per-sample gradients")
    if n_total is None:
        n_total = len(G)
    mean = G.mean(axis=0) if full_grad is None else np.asarray(full_grad, dtype=float)
    variance_sum = float(np.sum(np.var(G, axis=0, ddof=1)))
    grad_l1 = float(np.sum(np.abs(mean)))
    return _norm_test_from_moments(variance_sum, grad_l1, int(n_total), eps, s_cap)


def per_sample_data_grads(net, data: CharacteristicDataset, scheme, indices=None):
    """Per-sample gradients of the data loss: rows are grad of w_i (psi - y)^2."""
    if indices is None:
        indices = np.arange(len(data))
    X = join_inputs(data.states[indices], data.times[indices])
    y = data.log_rho[indices]
    w = data_weights(y, scheme)
    out = np.empty((len(indices), net.n_params))
    for start in range(0, len(indices), _VARIANCE_CHUNK):
        sl = slice(start, min(start + _VARIANCE_CHUNK, len(indices)))
        cache = forward_cache(net, X[sl])
        coeff = 2.0 * w[sl] * (cache.psi - y[sl])
        out[sl] = backward_value_per_sample(net, cache) * coeff[:, None]
    return out


def per_sample_pde_grads(net, prep: PreparedCollocation, indices=None):
    """Per-sample gradients of the squared residual at each collocation point."""
    if indices is None:
        indices = np.arange(len(prep))
    out = np.empty((len(indices), net.n_params))
    for start in range(0, len(indices), _VARIANCE_CHUNK):
        sl = slice(start, min(start + _VARIANCE_CHUNK, len(indices)))
        idx = indices[sl]
        cache = forward_tangent(net, prep.X[idx], prep.tangents[idx])
        rho = np.exp(cache.psi)
        mval = cache.dpsi[:, 0] + prep.div_vals[idx]
        scale = 2.0 * rho * mval * rho
        out[sl] = backward_mixed_per_sample(net, cache, scale * mval, scale)
    return out


def _streamed_norm_test(chunk_factory, n_total, eps, s_cap, full_grad_l1=None):
    """Two-pass variance over chunked per-sample gradients; chunk_factory is a
    zero-argument callable yielding a fresh chunk iterator, so the full
    (n_samples x n_params) matrix is never materialized.

    When the chunks cover the whole set, the mean of the per-sample gradients
    IS the full-batch gradient, so the denominator defaults to it; a separate
    full-set gradient is only needed when the variance runs on a subset."""
    total = None
    count = 0
    for G in chunk_factory():
        total = G.sum(axis=0) if total is None else total + G.sum(axis=0)
        count += len(G)
    mean = total / count
    sq = 0.0
    for G in chunk_factory():
        delta = G - mean
        sq += float(np.sum(delta * delta))
    variance_sum = sq / (count - 1)
    if full_grad_l1 is None:
        full_grad_l1 = float(np.sum(np.abs(mean)))
    return _norm_test_from_moments(variance_sum, full_grad_l1, n_total, eps, s_cap)


def _variance_subset(n, cap, seed):
    if n <= cap:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=cap, replace=False))


def evaluate_norm_tests(net, sys, data, prep, loss_cfg: LossConfig,
                        adaptive: AdaptiveConfig, subset_seed):
    """Both norm tests at the current parameters. The variance is estimated on a
    subset when the sets exceed the configured cap; the denominator gradient is
    always the full-set gradient. subset_seed is a flat list of integers."""
    subset_seed = list(subset_seed)
    idx_d = _variance_subset(len(data), adaptive.variance_subset_cap, subset_seed + [0])
    grad_l1_d = None
    if len(idx_d) < len(data):
        _, grad_d = loss_data(net, data, loss_cfg.weight_scheme)
        grad_l1_d = float(np.sum(np.abs(grad_d)))

    def data_chunks():
        for start in range(0, len(idx_d), _VARIANCE_CHUNK):
            yield per_sample_data_grads(net, data, loss_cfg.weight_scheme,
                                        idx_d[start:start + _VARIANCE_CHUNK])

    test_d = _streamed_norm_test(data_chunks, len(data), adaptive.eps_rho,
                                 adaptive.s_rho, full_grad_l1=grad_l1_d)

    idx_c = _variance_subset(len(prep), adaptive.variance_subset_cap, subset_seed + [1])
    grad_l1_c = None
    if len(idx_c) < len(prep):
        _, grad_c = _loss_pde_prepared(net, prep)
        grad_l1_c = float(np.sum(np.abs(grad_c)))

    def pde_chunks():
        for start in range(0, len(idx_c), _VARIANCE_CHUNK):
            yield per_sample_pde_grads(net, prep, idx_c[start:start + _VARIANCE_CHUNK])

    test_c = _streamed_norm_test(pde_chunks, len(prep), adaptive.eps_pde,
                                 adaptive.s_pde, full_grad_l1=grad_l1_c)
    return test_d, test_c


# ---------------------------------------------------------------------------
# Training report
# ---------------------------------------------------------------------------

@dataclass
class RoundRecord:
    horizon: float
    lam: float
    round_index: int
    n_data: int
    n_colloc: int
    iterations: int
    loss_total: float
    loss_data: float
    loss_pde: float
    ratio_data: float
    ratio_pde: float
    passed_data: bool
    passed_pde: bool
    suggested_data: int
    suggested_colloc: int
    wall_time: float


@dataclass
class TrainReport:
    rounds: list = field(default_factory=list)
    snapshot_times: np.ndarray | None = None
    nrmse: np.ndarray | None = None
    total_wall_time: float = 0.0


REPORT_FORMAT = "densprop-report-1"

_ROUND_FIELDS = ("horizon", "lam", "round_index", "n_data", "n_colloc", "iterations",
                 "loss_total", "loss_data", "loss_pde", "ratio_data", "ratio_pde",
                 "passed_data", "passed_pde", "suggested_data", "suggested_colloc",
                 "wall_time")


def save_report(report: TrainReport, path) -> None:
    items = {"format": REPORT_FORMAT, "rounds": str(len(report.rounds)),
             "total_wall_time": fmt_float(report.total_wall_time)}
    for i, rec in enumerate(report.rounds, start=1):
        for name in _ROUND_FIELDS:
            v = getattr(rec, name)
            if isinstance(v, bool):
                s = "true" if v else "false"
            elif isinstance(v, (int, np.integer)):
                s = str(int(v))
            else:
                s = fmt_float(v)
            items[f"round.{i}.{name}"] = s
    if report.nrmse is not None:
        items["nrmse.times"] = ",".join(fmt_float(t) for t in report.snapshot_times)
        items["nrmse.values"] = ",".join(fmt_float(v) for v in report.nrmse)
    write_kv(path, items)


def load_report(path) -> TrainReport:
    items = read_kv(path)
    if items.get("format") != REPORT_FORMAT:
        raise ValueError(f"{path}: unsupported report format")
    report = TrainReport(total_wall_time=float(items.get("total_wall_time", "0")))
    for i in range(1, int(items["rounds"]) + 1):
        kw = {}
        for name in _ROUND_FIELDS:
            raw = items[f"round.{i}.{name}"]
            if name in ("passed_data", "passed_pde"):
                kw[name] = raw == "true"
            elif name in ("round_index", "n_data", "n_colloc", "iterations",
                          "suggested_data", "suggested_colloc"):
                kw[name] = int(raw)
            else:
                kw[name] = float(raw)
        report.rounds.append(RoundRecord(**kw))
    if "nrmse.values" in items:
        report.snapshot_times = np.array(
            [float(v) for v in items["nrmse.times"].split(",")])
        report.nrmse = np.array([float(v) for v in items["nrmse.values"].split(",")])
    return report


# ---------------------------------------------------------------------------
# Multi-round adaptive training over a horizon schedule
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    net: DensityNetwork
    report: TrainReport
    data: CharacteristicDataset
    colloc: CollocationSet


def _objective(net, data_h, prep, scheme, lam):
    X = join_inputs(data_h.states, data_h.times)
    y = data_h.log_rho
    w = data_weights(y, scheme)

    def fun(theta):
        net.set_flat(theta)
        vd, gd = _loss_data_prepared(net, X, y, w)
        vp, gp = _loss_pde_prepared(net, prep)
        return vd + lam * vp, gd + lam * gp

    return fun


def train_adaptive(sys: SystemModel, data: CharacteristicDataset,
                   schedule: HorizonSchedule, adaptive: AdaptiveConfig,
                   net: DensityNetwork, *, loss_cfg: LossConfig = LossConfig(),
                   snapshots=None, seed=0, lbfgs: LbfgsOptions = LbfgsOptions(),
                   rtol: float = 1e-8, atol: float = 1e-8,
                   val_data: CharacteristicDataset | None = None,
                   horizon_hook=None) -> TrainResult:
    """Multi-round characteristics-based learning.

    For each horizon: restrict data to t <= t_k, build the collocation set as
    the union of the data coordinates and an equal count of uniform points
    (resampled per horizon), then alternate L-BFGS solves with norm tests,
    growing both sets per the rearranged test bounds until the tests pass or
    max_rounds is hit. Network parameters carry over between horizons; the
    optimizer memory does not.
    """
    if len(data) < 1:
        raise ValueError("initial dataset is empty")
    _check_positive_rho(data)
    if snapshots is None:
        snapshots = np.unique(data.times)
    snapshots = np.asarray(snapshots, dtype=float)

    report = TrainReport()
    t_start_all = time.perf_counter()
    theta = net.pack()
    single_round_early = adaptive.final_horizon_only

    for k, (t_k, lam) in enumerate(zip(schedule.horizons, schedule.lambdas)):
        snaps_h = int(np.sum(snapshots <= t_k * (1.0 + 1e-12)))
        data_h = data.restrict(t_k)
        colloc = CollocationSet.from_dataset(data_h)
        box = inflated_bounding_box(data_h.states)
        colloc = colloc.extend(
            sample_collocation(box, t_k, len(data_h), [seed, 2, k, 0]))
        adapt_here = not (single_round_early and k < len(schedule.horizons) - 1)

        for r in range(1, adaptive.max_rounds + 1):
            t0 = time.perf_counter()
            prep = prepare_collocation(sys, colloc)
            fun = _objective(net, data_h, prep, loss_cfg.weight_scheme, lam)
            result = lbfgs_minimize(fun, theta, lbfgs)
            theta = result.theta
            net.set_flat(theta)

            vd, _ = loss_data(net, data_h, loss_cfg.weight_scheme)
            vp, _ = _loss_pde_prepared(net, prep)
            test_d, test_c = evaluate_norm_tests(
                net, sys, data_h, prep, loss_cfg, adaptive, [seed, 3, k, r])
            report.rounds.append(RoundRecord(
                horizon=t_k, lam=lam, round_index=r, n_data=len(data_h),
                n_colloc=len(colloc), iterations=result.iterations,
                loss_total=vd + lam * vp, loss_data=vd, loss_pde=vp,
                ratio_data=test_d.ratio, ratio_pde=test_c.ratio,
                passed_data=test_d.passed, passed_pde=test_c.passed,
                suggested_data=test_d.suggested_next_size,
                suggested_colloc=test_c.suggested_next_size,
                wall_time=time.perf_counter() - t0))

            done = (test_d.passed and test_c.passed) or not adapt_here \
                or r == adaptive.max_rounds
            if done:
                if not (test_d.passed and test_c.passed) and adapt_here:
                    logger.warning("norm tests not satisfied after %d rounds at "
                                   "horizon %g", r, t_k)
                break

            # grow the data set by whole trajectories, never past the s_rho cap
            if not test_d.passed:
                deficit = test_d.suggested_next_size - len(data_h)
                n_traj_now = data_h.n_trajectories
                cap_traj = math.floor((adaptive.s_rho - 1.0) * n_traj_now)
                n_new = min(math.ceil(deficit / snaps_h), cap_traj)
                if n_new >= 1:
                    fresh = generate_dataset(sys, n_new, snapshots,
                                             [seed, 4, k, r], rtol=rtol, atol=atol)
                    fresh.traj_index += int(data.traj_index.max()) + 1
                    data = data.extend(fresh)
                    fresh_h = fresh.restrict(t_k)
                    data_h = data_h.extend(fresh_h)
                    colloc = colloc.extend(CollocationSet.from_dataset(fresh_h))
                    box = inflated_bounding_box(data_h.states)
            # top up collocation points with uniform samples
            target_c = test_c.suggested_next_size if not test_c.passed else len(colloc)
            top_up = target_c - len(colloc)
            if top_up > 0:
                colloc = colloc.extend(
                    sample_collocation(box, t_k, top_up, [seed, 5, k, r]))

        if horizon_hook is not None:
            horizon_hook(k, t_k, net)

    report.total_wall_time = time.perf_counter() - t_start_all
    if val_data is not None:
        from .validation import nrmse as _nrmse
        vreport = _nrmse(net, val_data)
        report.snapshot_times = vreport.snapshot_times
        report.nrmse = vreport.nrmse
    return TrainResult(net=net, report=report, data=data, colloc=colloc)


def train_fixed(sys, data, net, *, t_final, loss_cfg=LossConfig(), seed=0,
                lbfgs=LbfgsOptions(), val_data=None) -> TrainResult:
    """Single round on a fixed data set: collocation is the union of the data
    coordinates and an equally-sized uniform sample, fixed during training."""
    huge = AdaptiveConfig(eps_rho=np.inf, eps_pde=np.inf, max_rounds=1)
    return train_adaptive(sys, data, HorizonSchedule.single(t_final, loss_cfg.lam),
                          huge, net, loss_cfg=loss_cfg, seed=seed, lbfgs=lbfgs,
                          val_data=val_data)


def train_adam(sys, data, net, *, t_final, loss_cfg=LossConfig(), seed=0,
               adam: AdamOptions = AdamOptions(), batch: int = 1024,
               val_data=None) -> TrainResult:
    """Single-round baseline: full-batch data term plus the residual on a fresh
    uniform minibatch of collocation points every iteration."""
    _check_positive_rho(data)
    X = join_inputs(data.states, data.times)
    y = data.log_rho
    w = data_weights(y, loss_cfg.weight_scheme)
    box = inflated_bounding_box(data.states)
    lam = loss_cfg.lam
    base_rng_seed = [seed, 6]

    def fun(theta, iteration):
        net.set_flat(theta)
        vd, gd = _loss_data_prepared(net, X, y, w)
        colloc = sample_collocation(box, t_final, batch,
                                    base_rng_seed + [iteration])
        vp, gp = _loss_pde_prepared(net, prepare_collocation(sys, colloc))
        return vd + lam * vp, gd + lam * gp

    t0 = time.perf_counter()
    result = adam_minimize(fun, net.pack(), adam)
    net.set_flat(result.theta)
    wall = time.perf_counter() - t0

    vd, _ = loss_data(net, data, loss_cfg.weight_scheme)
    report = TrainReport(total_wall_time=wall)
    report.rounds.append(RoundRecord(
        horizon=t_final, lam=lam, round_index=1, n_data=len(data),
        n_colloc=batch, iterations=result.iterations, loss_total=result.value,
        loss_data=vd, loss_pde=np.nan, ratio_data=np.nan, ratio_pde=np.nan,
        passed_data=True, passed_pde=True, suggested_data=len(data),
        suggested_colloc=batch, wall_time=wall))
    if val_data is not None:
        from .validation import nrmse as _nrmse
        vreport = _nrmse(net, val_data)
        report.snapshot_times = vreport.snapshot_times
        report.nrmse = vreport.nrmse
    colloc = CollocationSet.from_dataset(data)
    return TrainResult(net=net, report=report, data=data, colloc=colloc)
