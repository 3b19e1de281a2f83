"""Shared verification helpers: finite differences and error metrics.

Gradient checks run in float64 with central differences (h=1e-5); the
reported error is the max absolute difference scaled by the larger
gradient magnitude, so zero gradients compare cleanly.
"""

import numpy as np
import pytest

from blockff.tensor import make_rng


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def fd_gradient(f, x, h=1e-5):
    """Central-difference gradient of scalar f at float64 array x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def layer_gradcheck(make_layer, x, seed, h=1e-5, forward_kwargs=None):
    """Analytic vs finite-difference gradients for one layer instance.

    ``make_layer`` builds a fresh layer from an rng (parameters must be
    deterministic in the rng) so the finite-difference closure can
    re-create identical parameters after perturbation; ``forward_kwargs``
    may be a callable returning fresh kwargs per forward so stochastic
    layers redraw the same mask every evaluation.  Returns a dict of
    relative errors: one entry for the input, one per parameter.
    """
    def kwargs():
        if forward_kwargs is None:
            return {}
        return dict(forward_kwargs() if callable(forward_kwargs) else forward_kwargs)

    layer = make_layer(make_rng(seed, 1))
    y, cache = layer.forward(x, **kwargs())
    proj = make_rng(seed, 2).standard_normal(y.shape)
    dx, grads = layer.backward(cache, proj.astype(y.dtype))

    def run(x_val, param_overrides=None):
        fresh = make_layer(make_rng(seed, 1))
        if param_overrides:
            for name, val in param_overrides.items():
                fresh.params()[name][:] = val
        out, _ = fresh.forward(x_val, **kwargs())
        return float((out * proj).sum())

    errors = {"x": rel_err(dx, fd_gradient(lambda v: run(v), x, h=h))}
    params = layer.params()
    for name in params:
        base = params[name].copy()

        def f(p, name=name, base=base):
            return run(x, {name: p})

        errors[name] = rel_err(grads[name], fd_gradient(f, base, h=h))
    return errors


def well_separated(rng, shape, gap=0.1, offset=0.05):
    """Random array whose values are pairwise at least ``gap`` apart and
    at least ``offset`` from zero: safe for finite differences through
    max-pool argmax selection and the relu kink."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2) * gap + offset
    return vals.reshape(shape).astype(np.float64)
