"""Fully-connected tanh network predicting the log-density psi(x, t) = log rho.

Exponentiating the output guarantees a positive density. Derivatives are exact:
input partials come from forward-mode tangents, parameter gradients from
reverse accumulation, and gradients of quantities built from input partials
(the transport-equation residual) from reverse accumulation through the
tangent-augmented forward pass. No finite differences anywhere.

Flat parameter order: for each layer in order, the weight matrix row-major,
then the bias vector.

Evaluation and every derivative head are read-only on the network, so batch
evaluation may run concurrently; set_flat is the single writer and must be
exclusive with evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .textio import fmt_float_list, parse_float_list, parse_int_list, read_kv, write_kv

CHECKPOINT_FORMAT = "densprop-checkpoint-1"


@dataclass(frozen=True)
class NetworkArchitecture:
    input_dim: int
    hidden: tuple
    output_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if len(self.hidden) == 0 or any(h < 1 for h in self.hidden):
            raise ValueError("hidden must be a non-empty tuple of positive widths")

    @property
    def layer_dims(self):
        return (self.input_dim, *self.hidden, self.output_dim)


class DensityNetwork:
    """Weights, biases and the affine input normalization (x - shift) / scale."""

    def __init__(self, arch: NetworkArchitecture, weights, biases, shift, scale):
        self.arch = arch
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float) for b in biases]
        self.shift = np.asarray(shift, dtype=float)
        self.scale = np.asarray(scale, dtype=float)
        dims = arch.layer_dims
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ValueError("layer count does not match architecture")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[l + 1], dims[l]) or b.shape != (dims[l + 1],):
                raise ValueError(f"layer {l} has shape {w.shape}/{b.shape}, "
                                 f"expected ({dims[l + 1]}, {dims[l]})/({dims[l + 1]},)")
        if self.shift.shape != (arch.input_dim,) or self.scale.shape != (arch.input_dim,):
            raise ValueError("input scaling shape does not match input_dim")
        if not all(np.all(np.isfinite(a)) for a in (*self.weights, *self.biases,
                                                    self.shift, self.scale)):
            raise ValueError("network parameters must be finite")

    # -- parameter vector ---------------------------------------------------

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def pack(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def set_flat(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        pos = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = theta[pos:pos + w.size].reshape(w.shape)
            pos += w.size
            b[...] = theta[pos:pos + b.size]
            pos += b.size

    def copy(self) -> "DensityNetwork":
        return DensityNetwork(self.arch, [w.copy() for w in self.weights],
                              [b.copy() for b in self.biases],
                              self.shift.copy(), self.scale.copy())

    # -- evaluation ---------------------------------------------------------

    def forward(self, X) -> np.ndarray:
        """Log-density at raw inputs X of shape (n, input_dim) or (input_dim,)."""
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        z = (np.atleast_2d(X) - self.shift) / self.scale
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = z @ w.T + b
            if l != last:
                z = np.tanh(z)
        psi = z[:, 0]
        return psi[0] if single else psi

    def log_rho(self, x, t):
        return self.forward(join_inputs(x, t))

    def rho(self, x, t):
        return np.exp(self.log_rho(x, t))

    def input_partials(self, x, t):
        """(d psi / d t, grad_x psi) at raw coordinates, exact."""
        X = np.asarray(join_inputs(x, t), dtype=float)
        single = X.ndim == 1
        X2 = np.atleast_2d(X)
        n, n0 = X2.shape
        tangents = np.broadcast_to(np.eye(n0), (n, n0, n0))
        cache = forward_tangent(self, X2, tangents)
        grads = cache.dpsi  # (n, n0) partials w.r.t. raw inputs
        dpsi_dt = grads[:, -1]
        grad_x = grads[:, :-1]
        if single:
            return dpsi_dt[0], grad_x[0]
        return dpsi_dt, grad_x


def join_inputs(x, t):
    """Stack state and time into network inputs: (..., d) + (...) -> (..., d+1)."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    if x.ndim == 1:
        if t.ndim == 0:
            return np.concatenate([x, [float(t)]])
        x = np.broadcast_to(x, (len(t), x.size))
    t = np.broadcast_to(t, x.shape[:-1])
    return np.concatenate([x, t[..., None]], axis=-1)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def initialize_network(arch: NetworkArchitecture, shift, scale, seed,
                       final_bias: float = 0.0) -> DensityNetwork:
    """Glorot-uniform weights, zero biases; the output bias can be preset to the
    data mean of log rho so the exponential head starts in range."""
    rng = np.random.default_rng(seed)
    dims = arch.layer_dims
    weights, biases = [], []
    for l in range(len(dims) - 1):
        limit = np.sqrt(6.0 / (dims[l] + dims[l + 1]))
        weights.append(rng.uniform(-limit, limit, size=(dims[l + 1], dims[l])))
        biases.append(np.zeros(dims[l + 1]))
    biases[-1][:] = final_bias
    return DensityNetwork(arch, weights, biases, shift, scale)


def scaling_from_ranges(lows, highs):
    """Affine map taking per-dimension [low, high] to [-1, 1]."""
    lows = np.asarray(lows, dtype=float)
    highs = np.asarray(highs, dtype=float)
    shift = 0.5 * (highs + lows)
    scale = 0.5 * (highs - lows)
    scale = np.where(scale > 0, scale, 1.0)
    return shift, scale


# ---------------------------------------------------------------------------
# Forward caches
# ---------------------------------------------------------------------------

class ForwardCache:
    """Activations of one batched pass: acts[0] is the normalized input."""

    __slots__ = ("acts", "psi")

    def __init__(self, acts, psi):
        self.acts = acts
        self.psi = psi


def forward_cache(net: DensityNetwork, X) -> ForwardCache:
    z = (np.asarray(X, dtype=float) - net.shift) / net.scale
    acts = [z]
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = z @ w.T + b
        if l != last:
            z = np.tanh(z)
            acts.append(z)
    return ForwardCache(acts, z[:, 0])


class TangentCache:
    """Forward pass carrying input-direction tangents of shape (n, width, k).

    dpsi holds the directional derivatives of psi w.r.t. the raw inputs,
    shape (n, k); sdots are the pre-activation tangents needed for the
    second-order backward pass.
    """

    __slots__ = ("acts", "tdots", "sdots", "psi", "dpsi")

    def __init__(self, acts, tdots, sdots, psi, dpsi):
        self.acts = acts
        self.tdots = tdots
        self.sdots = sdots
        self.psi = psi
        self.dpsi = dpsi


def forward_tangent(net: DensityNetwork, X, tangents) -> TangentCache:
    """tangents: raw-input directions, shape (n, input_dim, k)."""
    X = np.asarray(X, dtype=float)
    z = (X - net.shift) / net.scale
    td = np.asarray(tangents, dtype=float) / net.scale[None, :, None]
    acts, tdots, sdots = [z], [td], []
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        s = z @ w.T + b
        sd = np.einsum("njk,ij->nik", td, w, optimize=True)
        if l != last:
            z = np.tanh(s)
            td = (1.0 - z * z)[:, :, None] * sd
            acts.append(z)
            tdots.append(td)
        else:
            z = s
            td = sd
        sdots.append(sd)
    return TangentCache(acts, tdots, sdots, z[:, 0], td[:, 0, :])


# ---------------------------------------------------------------------------
# Reverse passes
# ---------------------------------------------------------------------------

def backward_value(net: DensityNetwork, cache: ForwardCache, coeff) -> np.ndarray:
    """Gradient w.r.t. all parameters of sum_i coeff_i * psi_i."""
    coeff = np.asarray(coeff, dtype=float)
    L = len(net.weights)
    grads_w = [None] * L
    grads_b = [None] * L
    sbar = coeff[:, None]
    for l in range(L - 1, -1, -1):
        grads_w[l] = sbar.T @ cache.acts[l]
        grads_b[l] = sbar.sum(axis=0)
        if l > 0:
            abar = sbar @ net.weights[l]
            z = cache.acts[l]
            sbar = abar * (1.0 - z * z)
    return _flatten(grads_w, grads_b)


def backward_value_per_sample(net: DensityNetwork, cache: ForwardCache) -> np.ndarray:
    """Per-sample gradients of psi_i, shape (n, n_params). Callers chunk n."""
    n = len(cache.psi)
    L = len(net.weights)
    parts_w = [None] * L
    parts_b = [None] * L
    sbar = np.ones((n, 1))
    for l in range(L - 1, -1, -1):
        parts_w[l] = np.einsum("ni,nj->nij", sbar, cache.acts[l]).reshape(n, -1)
        parts_b[l] = sbar
        if l > 0:
            abar = sbar @ net.weights[l]
            z = cache.acts[l]
            sbar = abar * (1.0 - z * z)
    return _concat_per_sample(parts_w, parts_b)


def backward_mixed(net: DensityNetwork, cache: TangentCache, alpha, gamma) -> np.ndarray:
    """Gradient w.r.t. parameters of sum_i alpha_i * psi_i + gamma_i * D_i,
    where D_i is the single-direction derivative carried by the cache."""
    alpha = np.asarray(alpha, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    L = len(net.weights)
    grads_w = [None] * L
    grads_b = [None] * L
    sbar = alpha[:, None]
    stil = gamma[:, None]
    for l in range(L - 1, -1, -1):
        grads_w[l] = sbar.T @ cache.acts[l] + stil.T @ cache.tdots[l][:, :, 0]
        grads_b[l] = sbar.sum(axis=0)
        if l > 0:
            abar = sbar @ net.weights[l]
            atil = stil @ net.weights[l]
            z = cache.acts[l]
            sd = cache.sdots[l - 1][:, :, 0]
            sig1 = 1.0 - z * z
            # d tanh'(s)/ds = -2 tanh(s) tanh'(s)
            sbar = sig1 * (abar - 2.0 * z * sd * atil)
            stil = sig1 * atil
    return _flatten(grads_w, grads_b)


def backward_mixed_per_sample(net: DensityNetwork, cache: TangentCache,
                              alpha, gamma) -> np.ndarray:
    """Per-sample gradients of alpha_i psi_i + gamma_i D_i, shape (n, n_params)."""
    alpha = np.asarray(alpha, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    n = len(alpha)
    L = len(net.weights)
    parts_w = [None] * L
    parts_b = [None] * L
    sbar = alpha[:, None]
    stil = gamma[:, None]
    for l in range(L - 1, -1, -1):
        gw = np.einsum("ni,nj->nij", sbar, cache.acts[l])
        gw += np.einsum("ni,nj->nij", stil, cache.tdots[l][:, :, 0])
        parts_w[l] = gw.reshape(n, -1)
        parts_b[l] = sbar
        if l > 0:
            abar = sbar @ net.weights[l]
            atil = stil @ net.weights[l]
            z = cache.acts[l]
            sd = cache.sdots[l - 1][:, :, 0]
            sig1 = 1.0 - z * z
            sbar = sig1 * (abar - 2.0 * z * sd * atil)
            stil = sig1 * atil
    return _concat_per_sample(parts_w, parts_b)


def _flatten(grads_w, grads_b):
    parts = []
    for gw, gb in zip(grads_w, grads_b):
        parts.append(gw.ravel())
        parts.append(gb)
    return np.concatenate(parts)


def _concat_per_sample(parts_w, parts_b):
    parts = []
    for gw, gb in zip(parts_w, parts_b):
        parts.append(gw)
        parts.append(gb)
    return np.concatenate(parts, axis=1)


def param_gradient_of(net: DensityNetwork, x, t) -> np.ndarray:
    """Exact parameter gradient of log rho at a single point."""
    X = np.atleast_2d(join_inputs(x, t))
    cache = forward_cache(net, X)
    return backward_value(net, cache, np.ones(len(X)))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(net: DensityNetwork, path) -> None:
    items = {
        "format": CHECKPOINT_FORMAT,
        "input_dim": str(net.arch.input_dim),
        "hidden": ",".join(str(h) for h in net.arch.hidden),
        "output_dim": str(net.arch.output_dim),
        "shift": fmt_float_list(net.shift),
        "scale": fmt_float_list(net.scale),
    }
    for l, (w, b) in enumerate(zip(net.weights, net.biases), start=1):
        items[f"w{l}"] = fmt_float_list(w)
        items[f"b{l}"] = fmt_float_list(b)
    write_kv(path, items)


def load_checkpoint(path) -> DensityNetwork:
    items = read_kv(path)
    tag = items.get("format", "<missing>")
    if tag != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {tag!r}")
    arch = NetworkArchitecture(int(items["input_dim"]),
                               tuple(parse_int_list(items["hidden"])),
                               int(items["output_dim"]))
    dims = arch.layer_dims
    weights, biases = [], []
    for l in range(1, len(dims)):
        weights.append(parse_float_list(items[f"w{l}"]).reshape(dims[l], dims[l - 1]))
        biases.append(parse_float_list(items[f"b{l}"]))
    return DensityNetwork(arch, weights, biases,
                          parse_float_list(items["shift"]),
                          parse_float_list(items["scale"]))
