import itertools

import numpy as np
import pytest

from robustleak import nn
from robustleak.attacks import AttackConfig, PerturbationConstraint, pgd_untargeted
from robustleak.data import accuracy, adv_accuracy
from robustleak.exceptions import InputError
from robustleak.verify import (ibp_bounds, is_verified_secure, layer_bounds, propagate,
                               verified_accuracy, verified_worst_case_confidence)

from conftest import random_model, single_layer


def test_affine_interval_example():
    model = single_layer([[1.0, -1.0], [0.0, 0.0]])
    b = ibp_bounds(model, np.array([0.5, 0.5]), PerturbationConstraint(0.5))
    assert b.low[0] == pytest.approx(-1.0) and b.high[0] == pytest.approx(1.0)


def test_relu_clamps_interval():
    # identity hidden layer sees [-1, 1] and the ReLU maps it to [0, 1]
    model = nn.Model([np.array([[1.0]]), np.eye(2)[:, :1]], [np.array([-0.5]), np.zeros(2)])
    hidden = layer_bounds(model, np.array([0.5]), PerturbationConstraint(1.0, -1.0, 2.0))[0]
    # pre-activation interval is [x - 1, x + 1] - 0.5 = [-1, 1]
    assert hidden.low[0] == 0.0 and hidden.high[0] == pytest.approx(1.0)


def test_monte_carlo_containment():
    model = random_model([2, 8, 3], seed=0)
    rng = np.random.default_rng(0)
    x = rng.uniform(0.1, 0.9, size=2)
    c = PerturbationConstraint(0.05)
    b = ibp_bounds(model, x, c)
    samples = np.clip(x + rng.uniform(-0.05, 0.05, size=(10_000, 2)), 0, 1)
    Z = nn.logits(model, samples)
    assert np.all(Z >= b.low - 1e-12) and np.all(Z <= b.high + 1e-12)


def test_interval_widths_grow_through_layers():
    model = random_model([4, 8, 8, 3], seed=1)
    x = np.random.default_rng(1).uniform(size=4)
    c = PerturbationConstraint(0.05)
    lo, hi = c.bounds(x)
    layers, cache = propagate(model, lo[None], hi[None])
    # width of each pre-activation interval is at least the input radius times |W|
    for (c_in, r_in, pre_lo, pre_hi), w in zip(cache, model.weights):
        np.testing.assert_allclose((pre_hi - pre_lo) / 2, r_in @ np.abs(w).T)


def test_verified_confidence_closed_form():
    model = single_layer([[1.0], [0.0]])
    value = verified_worst_case_confidence(model, np.array([0.5]), 0, PerturbationConstraint(0.1))
    assert value == pytest.approx(0.598688, abs=1e-6)
    assert is_verified_secure(model, np.array([0.5]), 0, PerturbationConstraint(0.1))


def test_zero_epsilon_matches_benign():
    model = random_model([5, 10, 4], seed=2)
    rng = np.random.default_rng(2)
    X = rng.uniform(size=(25, 5))
    y = rng.integers(0, 4, 25)
    c0 = PerturbationConstraint(0.0)
    benign = nn.predict(model, X)[np.arange(25), y]
    np.testing.assert_array_equal(verified_worst_case_confidence(model, X, y, c0), benign)
    np.testing.assert_array_equal(is_verified_secure(model, X, y, c0),
                                  nn.logits(model, X).argmax(1) == y)
    assert verified_accuracy(model, X, y, c0) == accuracy(model, X, y)


@pytest.mark.parametrize("seed", range(5))
def test_confidence_monotone_in_epsilon(seed):
    model = random_model([5, 10, 4], seed)
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(25, 5))
    y = rng.integers(0, 4, 25)
    small = verified_worst_case_confidence(model, X, y, PerturbationConstraint(0.1))
    large = verified_worst_case_confidence(model, X, y, PerturbationConstraint(0.2))
    assert np.all(large <= small)


@pytest.mark.parametrize("seed", range(3))
def test_verified_points_survive_pgd(seed):
    # a mostly-linear model so plenty of points verify
    w = np.random.default_rng(seed).normal(size=(3, 4)) * 4
    model = nn.Model([np.eye(4) * 2, w], [np.zeros(4), np.zeros(3)])
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(200, 4))
    y = nn.logits(model, X).argmax(1)
    c = PerturbationConstraint(0.05)
    secure = is_verified_secure(model, X, y, c)
    assert secure.any()
    X_adv = pgd_untargeted(model, X, y, c, AttackConfig(steps=20, step_size=0.01))
    assert np.all(nn.logits(model, X_adv[secure]).argmax(1) == y[secure])


def test_accuracy_chain():
    model = random_model([4, 12, 3], seed=4)
    rng = np.random.default_rng(4)
    X = rng.uniform(size=(60, 4))
    y = nn.logits(model, X).argmax(1)
    y[:10] = (y[:10] + 1) % 3
    for eps in (0.0, 0.02, 0.1):
        c = PerturbationConstraint(eps)
        ver = verified_accuracy(model, X, y, c)
        adv = adv_accuracy(model, X, y, c, AttackConfig(iterate="best-loss"))
        assert ver <= adv <= accuracy(model, X, y)


def test_verified_accuracy_matches_grid_oracle():
    # in 2-d a fine grid over the feasible square approximates exact robustness;
    # IBP may be loose but must never certify a point the grid breaks
    model = random_model([2, 6, 2], seed=7)
    rng = np.random.default_rng(7)
    X = rng.uniform(0.1, 0.9, size=(8, 2))
    y = nn.logits(model, X).argmax(1)
    c = PerturbationConstraint(0.05)
    grid = np.linspace(-0.05, 0.05, 41)
    oracle = []
    for x, label in zip(X, y):
        pts = np.array([x + d for d in itertools.product(grid, grid)])
        oracle.append(bool(np.all(nn.logits(model, pts).argmax(1) == label)))
    secure = is_verified_secure(model, X, y, c)
    # soundness: verified implies grid-secure
    assert np.all(~secure | np.array(oracle))
    assert verified_accuracy(model, X, y, c) <= np.mean(oracle)


def test_verified_accuracy_rejects_empty():
    with pytest.raises(InputError):
        verified_accuracy(random_model([2, 2], 0), np.zeros((0, 2)), [], PerturbationConstraint(0.1))
