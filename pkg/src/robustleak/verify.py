"""Interval bound propagation (IBP) over dense ReLU networks."""

from dataclasses import dataclass

import numpy as np

from . import nn
from .exceptions import InputError


@dataclass
class IntervalBounds:
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        if np.any(self.low > self.high):
            raise InputError("interval with low > high")

    @property
    def width(self):
        return self.high - self.low


def input_interval(x, constraint):
    x = np.asarray(x, dtype=float)
    lo, hi = constraint.bounds(x)
    return lo, hi


def propagate(model, low, high):
    """Push an input box through every layer.

    Returns the post-activation bounds of each layer (logit bounds last)
    together with the cache :func:`propagate_backward` consumes.
    """
    c = (high + low) / 2.0
    r = (high - low) / 2.0
    layers, cache = [], []
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        c_out = c @ w.T + b
        r_out = r @ np.abs(w).T
        lo, hi = c_out - r_out, c_out + r_out
        cache.append((c, r, lo, hi))
        if i != last:
            lo, hi = np.maximum(lo, 0.0), np.maximum(hi, 0.0)
            c, r = (hi + lo) / 2.0, (hi - lo) / 2.0
        layers.append((lo, hi))
    return layers, cache


def propagate_backward(model, cache, dlow, dhigh):
    """Gradients of a scalar w.r.t. parameters given its gradient on logit bounds."""
    dws, dbs = [], []
    last = len(model.weights) - 1
    for i in range(last, -1, -1):
        c, r, lo, hi = cache[i]
        w = model.weights[i]
        if i != last:
            dlow = dlow * (lo > 0)
            dhigh = dhigh * (hi > 0)
        dc = dlow + dhigh
        dr = dhigh - dlow
        dws.append(dc.T @ c + np.sign(w) * (dr.T @ r))
        dbs.append(dc.sum(axis=0))
        dc_in = dc @ w
        dr_in = dr @ np.abs(w)
        dlow = (dc_in - dr_in) / 2.0
        dhigh = (dc_in + dr_in) / 2.0
    return nn.Gradients(dws[::-1], dbs[::-1])


def ibp_bounds(model, x, constraint):
    """Sound elementwise logit bounds over the constraint set around ``x``."""
    X, single = nn._as_batch(x, model.input_dim)
    lo, hi = input_interval(X, constraint)
    layers, _ = propagate(model, lo, hi)
    low, high = layers[-1]
    if single:
        return IntervalBounds(low[0], high[0])
    return IntervalBounds(low, high)


def layer_bounds(model, x, constraint):
    """Bounds after every layer (post-ReLU for hidden layers) for a single input."""
    X, _ = nn._as_batch(x, model.input_dim)
    lo, hi = input_interval(X, constraint)
    layers, _ = propagate(model, lo, hi)
    return [IntervalBounds(l[0], h[0]) for l, h in layers]


def worst_case_logits(low, high, y):
    """True-class lower bound against every other class's upper bound."""
    low = np.atleast_2d(low)
    wc = np.atleast_2d(high).copy()
    rows = np.arange(len(wc))
    wc[rows, y] = low[rows, y]
    return wc


def _batch_bounds(model, x, y, constraint):
    X, single = nn._as_batch(x, model.input_dim)
    y = nn._labels(np.atleast_1d(y), len(X), model.num_classes)
    b = ibp_bounds(model, X, constraint)
    return b.low, b.high, y, single


def verified_worst_case_confidence(model, x, y, constraint):
    """Lower bound on ``F(x_tilde)_y`` over the constraint set."""
    low, high, y, single = _batch_bounds(model, x, y, constraint)
    conf = nn.softmax(worst_case_logits(low, high, y))[np.arange(len(y)), y]
    return float(conf[0]) if single else conf


def is_verified_secure(model, x, y, constraint):
    """True iff the true-class lower bound strictly beats every other upper bound."""
    low, high, y, single = _batch_bounds(model, x, y, constraint)
    rows = np.arange(len(y))
    others = high.copy()
    others[rows, y] = -np.inf
    secure = low[rows, y] > others.max(axis=1)
    return bool(secure[0]) if single else secure


def verified_accuracy(model, X, y, constraint):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise InputError("verified accuracy needs a non-empty 2-d batch")
    return float(np.mean(is_verified_secure(model, X, y, constraint)))
