"""Shared test helpers: finite-difference gradient oracle and its comparison
metric."""

import numpy as np


def fd_param_grad(net, theta, scalar_fn):
    """Central finite differences over every parameter, step 1e-6 * (1 + |theta_m|)."""
    g = np.zeros_like(theta)
    for i in range(len(theta)):
        h = 1e-6 * (1.0 + abs(theta[i]))
        tp = theta.copy()
        tp[i] += h
        net.set_flat(tp)
        fp = scalar_fn()
        tm = theta.copy()
        tm[i] -= h
        net.set_flat(tm)
        fm = scalar_fn()
        g[i] = (fp - fm) / (2 * h)
    net.set_flat(theta)
    return g


def grad_rel_err(analytic, fd):
    """Max relative error with the denominator floored at 1e-3 of the gradient
    scale: components that many decades below the largest entry carry only
    central-difference roundoff (~1e-10 absolute), so they are compared
    against the floor instead of their own magnitude."""
    analytic = np.asarray(analytic)
    fd = np.asarray(fd)
    scale = np.max(np.abs(fd))
    if scale == 0.0:
        return float(np.max(np.abs(analytic))) if analytic.size else 0.0
    denom = np.maximum(np.abs(fd), 1e-3 * scale)
    return float(np.max(np.abs(analytic - fd) / denom))
