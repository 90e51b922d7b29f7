"""Evasion attacks under an l-infinity budget.

All attacks run on a whole batch at once: ``x`` may be a single feature
vector or an ``(n, d)`` array with matching labels.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .exceptions import InputError

INIT_MODES = ("at-x", "uniform-random")
ITERATE_MODES = ("final", "best-loss")


@dataclass(frozen=True)
class PerturbationConstraint:
    """l-infinity ball of radius ``epsilon`` intersected with the input box."""

    epsilon: float
    box_low: object = 0.0
    box_high: object = 1.0

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise InputError(f"epsilon must be non-negative, got {self.epsilon}")
        if np.any(np.asarray(self.box_low) > np.asarray(self.box_high)):
            raise InputError("box_low must not exceed box_high")

    def bounds(self, x):
        """Per-feature ``(low, high)`` of the feasible set around ``x``."""
        lo = np.maximum(x - self.epsilon, self.box_low)
        hi = np.minimum(x + self.epsilon, self.box_high)
        return lo, hi

    def with_epsilon(self, epsilon):
        return replace(self, epsilon=epsilon)


@dataclass(frozen=True)
class AttackConfig:
    """PGD-style iteration settings.

    ``step_size=None`` resolves to ``epsilon / 8`` at attack time.
    ``gamma`` is only read by :func:`dist_attack`.
    """

    steps: int = 20
    step_size: float = None
    init: str = "at-x"
    iterate: str = "final"
    gamma: float = 0.0

    def __post_init__(self):
        if self.steps < 0:
            raise InputError("steps must be non-negative")
        if self.step_size is not None and not self.step_size > 0:
            raise InputError("step_size must be positive")
        if self.init not in INIT_MODES:
            raise InputError(f"init must be one of {INIT_MODES}")
        if self.iterate not in ITERATE_MODES:
            raise InputError(f"iterate must be one of {ITERATE_MODES}")
        if not self.gamma >= 0:
            raise InputError("gamma must be non-negative")

    def eta(self, epsilon):
        return epsilon / 8.0 if self.step_size is None else self.step_size

    @classmethod
    def for_training(cls, epsilon, **kw):
        return cls(steps=7, step_size=epsilon / 4.0 if epsilon > 0 else None, **kw)


def project_linf(x_tilde, x, constraint):
    """Clamp ``x_tilde`` into the ball around ``x`` and into the box."""
    x_tilde = np.asarray(x_tilde, dtype=float)
    x = np.asarray(x, dtype=float)
    if x_tilde.shape != x.shape:
        raise InputError(f"shape mismatch {x_tilde.shape} vs {x.shape}")
    lo, hi = constraint.bounds(x)
    return np.clip(x_tilde, lo, hi)


def _prepare(model, x, y=None):
    X, single = nn._as_batch(x, model.input_dim)
    if y is None:
        return X, None, single
    y = np.atleast_1d(np.asarray(y))
    if y.shape == (1,) and len(X) > 1:
        y = np.repeat(y, len(X))
    return X, nn._labels(y, len(X), model.num_classes), single


def _init(X, constraint, cfg, rng):
    if cfg.init == "at-x":
        return X.copy()
    if rng is None:
        raise InputError("uniform-random init needs a seeded rng")
    noise = rng.uniform(-constraint.epsilon, constraint.epsilon, size=X.shape)
    return project_linf(X + noise, X, constraint)


def _signed_ascent(model, X, X0, y, spec, direction, constraint, cfg):
    """Shared PGD loop: ``x <- proj(x + direction * eta * sign(grad))``.

    The attack objective is ``direction * loss``; best-loss bookkeeping keeps
    the per-example iterate with the highest objective, initial point included.
    """
    eta = cfg.eta(constraint.epsilon)
    Xt = X0
    track = cfg.iterate == "best-loss"
    if track:
        best = Xt.copy()
        best_val = direction * _per_example_loss(model, Xt, y, spec)
    for _ in range(cfg.steps):
        g = nn.grad_input(model, Xt, y, spec)
        Xt = project_linf(Xt + direction * eta * np.sign(g), X, constraint)
        if track:
            val = direction * _per_example_loss(model, Xt, y, spec)
            better = val > best_val
            best[better] = Xt[better]
            best_val = np.where(better, val, best_val)
    return best if track else Xt


def _per_example_loss(model, X, y, spec):
    Z, _ = nn.forward(model, X)
    return nn.logit_loss(Z, y, spec)[0]


def pgd_untargeted(model, x, y, constraint, cfg=None, rng=None):
    """Maximize cross-entropy at the true label inside the constraint."""
    cfg = cfg or AttackConfig()
    X, y, single = _prepare(model, x, y)
    out = _signed_ascent(model, X, _init(X, constraint, cfg, rng), y,
                         nn.CROSS_ENTROPY, 1.0, constraint, cfg)
    return out[0] if single else out


def pgd_targeted(model, x, y_target, constraint, cfg=None, rng=None):
    """Minimize cross-entropy toward ``y_target`` inside the constraint."""
    cfg = cfg or AttackConfig()
    X, y_target, single = _prepare(model, x, y_target)
    out = _signed_ascent(model, X, _init(X, constraint, cfg, rng), y_target,
                         nn.CROSS_ENTROPY, -1.0, constraint, cfg)
    return out[0] if single else out


def diff_pgd(model, x, constraint, cfg=None, rng=None):
    """Maximize ``KL(F(x_tilde) || F(x))`` with ``F(x)`` held fixed."""
    cfg = cfg or AttackConfig(init="uniform-random")
    X, _, single = _prepare(model, x)
    reference = nn.predict(model, X)
    spec = nn.LossSpec("kl", reference=reference)
    dummy = np.zeros(len(X), dtype=int)
    out = _signed_ascent(model, X, _init(X, constraint, cfg, rng), dummy,
                         spec, 1.0, constraint, cfg)
    return out[0] if single else out


def _linf_subgradient(V, G, gamma):
    """Ascent direction for ``loss - gamma * ||v||_inf`` given loss gradient ``G``.

    Away from ``v = 0`` the norm's subgradient is split equally over the
    coordinates attaining the max.  At ``v = 0`` the minimum-norm element of
    the subdifferential is used, which leaves the point stationary unless
    ``||G||_1 > gamma``.
    """
    absV = np.abs(V)
    vmax = absV.max(axis=1, keepdims=True)
    at_origin = vmax[:, 0] == 0
    ties = (absV >= vmax * (1.0 - 1e-9)) & ~at_origin[:, None]
    S = np.where(ties, np.sign(V), 0.0) / np.maximum(ties.sum(axis=1, keepdims=True), 1)
    D = G - gamma * S
    escape = np.abs(G).sum(axis=1) > gamma
    D[at_origin & ~escape] = 0.0
    return D


def dist_attack(model, x, y, cfg=None, constraint=None):
    """Signed ascent on the Lagrangian ``CE - gamma * ||x_tilde - x||_inf``.

    No ball projection: only the box of ``constraint`` (default ``[0, 1]``)
    is enforced.  ``cfg.step_size`` must be set explicitly.
    """
    cfg = cfg or AttackConfig(step_size=0.01, gamma=1.0)
    if cfg.step_size is None:
        raise InputError("dist_attack needs an explicit step_size")
    constraint = constraint or PerturbationConstraint(0.0)
    X, y, single = _prepare(model, x, y)
    lo, hi = constraint.box_low, constraint.box_high
    Xt = X.copy()
    for _ in range(cfg.steps):
        G = nn.grad_input(model, Xt, y)
        D = _linf_subgradient(Xt - X, G, cfg.gamma)
        Xt = np.clip(Xt + cfg.step_size * np.sign(D), lo, hi)
    return Xt[0] if single else Xt
