"""Central finite-difference gradient checking (use float64 inputs)."""
from __future__ import annotations

import numpy as np


def numerical_grad(f, x, h=1e-5):
    """d f / d x by central differences; f returns a scalar and x is perturbed in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic, numeric, floor=1e-8, scale_floor=0.0):
    """Max elementwise |a - n| / max(|a| + |n|, floor, scale_floor * max(1, max|a|)).

    ``scale_floor`` keeps structurally-zero entries (e.g. a bias whose shift a
    following train-mode batchnorm removes) from turning finite-difference
    round-off into a large relative error."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if not a.size:
        return 0.0
    floor = max(floor, scale_floor * max(1.0, float(np.abs(a).max())))
    denom = np.maximum(np.abs(a) + np.abs(n), floor)
    return float((np.abs(a - n) / denom).max())


def _flat_items(tree, prefix=""):
    for k, v in tree.items():
        if isinstance(v, dict):
            yield from _flat_items(v, f"{prefix}{k}/")
        else:
            yield prefix + k, v


def check_layer(layer, x, params=None, train=False, rng_seed=None, h=1e-5, scale_floor=1e-6, **fwd_kwargs):
    """Compare a layer's analytic gradients against central differences.

    The loss is sum(forward(x) * w) for a fixed random projection w, so every
    output element contributes.  Returns {'x': err, '<param>': err, ...}.
    Stochastic layers must be made deterministic through ``fwd_kwargs``
    (e.g. a frozen dropout mask).
    """
    from .tensor import Rng

    params = params if params is not None else {}
    out, cache = layer.forward(x, params, train, None, **fwd_kwargs)
    proj = Rng(rng_seed or 0).normal(out.shape, dtype=np.float64)
    gx, grads = layer.backward(proj, cache, params)

    def loss():
        y, _ = layer.forward(x, params, train, None, **fwd_kwargs)
        return float((y * proj).sum())

    errors = {"x": rel_error(gx, numerical_grad(loss, x, h), scale_floor=scale_floor)}
    trainable = dict(_flat_items(grads))
    for name, arr in _flat_items(params):
        if name in trainable:
            errors[name] = rel_error(trainable[name], numerical_grad(loss, arr, h), scale_floor=scale_floor)
    return errors
