"""Natural, adversarial and IBP-verified training of dense ReLU classifiers."""

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import nn
from .attacks import (AttackConfig, PerturbationConstraint, diff_pgd, dist_attack,
                      pgd_untargeted)
from .data import LabeledDataset, accuracy, adv_accuracy
from .exceptions import InputError
from .verify import propagate, propagate_backward, worst_case_logits

logger = logging.getLogger(__name__)

METHODS = ("natural", "pgd-adv", "dist-adv", "diff-adv", "ibp-verified")
# the DA regularizer belongs to training; its math lives with the other losses
da_regularizer = nn.da_regularizer

DEFAULT_ALPHA = {"natural": 1.0, "pgd-adv": 0.0, "dist-adv": 0.0,
                 "diff-adv": 0.5, "ibp-verified": 0.5}


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines a training run.

    ``alpha=None`` picks the method default (0 for the adversarial-example
    methods, 0.5 for diff-adv and ibp-verified).  ``attack=None`` uses 7 PGD
    steps of size epsilon/4.  ``eps_ramp`` is the fraction of optimizer
    steps over which ibp-verified training ramps epsilon up from 0.
    """

    method: str = "natural"
    hidden_sizes: tuple = (64,)
    alpha: float = None
    epochs: int = 200
    batch_size: int = 50
    lr: float = 0.01
    momentum: float = 0.9
    constraint: PerturbationConstraint = field(default_factory=lambda: PerturbationConstraint(0.05))
    attack: AttackConfig = None
    adv_train_ratio: float = 1.0
    da_weight: float = 0.0
    loss_variant: str = "cross-entropy"
    eps_ramp: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise InputError(f"method must be one of {METHODS}")
        if self.alpha is not None and not 0.0 <= self.alpha <= 1.0:
            raise InputError("alpha must lie in [0, 1]")
        if not 0.0 <= self.adv_train_ratio <= 1.0:
            raise InputError("adv_train_ratio must lie in [0, 1]")
        if self.da_weight < 0:
            raise InputError("da_weight must be non-negative")
        if self.loss_variant not in ("cross-entropy", "softplus-margin"):
            raise InputError("loss_variant must be cross-entropy or softplus-margin")
        if self.epochs < 0 or self.batch_size < 1:
            raise InputError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr > 0 or not 0.0 <= self.momentum < 1.0:
            raise InputError("lr must be positive and momentum in [0, 1)")
        if not 0.0 <= self.eps_ramp <= 1.0:
            raise InputError("eps_ramp must lie in [0, 1]")

    @property
    def resolved_alpha(self):
        return DEFAULT_ALPHA[self.method] if self.alpha is None else self.alpha

    @property
    def resolved_attack(self):
        if self.attack is not None:
            return self.attack
        eps = self.constraint.epsilon
        if self.method == "diff-adv":
            return AttackConfig.for_training(eps, init="uniform-random")
        if self.method == "dist-adv":
            return AttackConfig(steps=7, step_size=max(eps, 1e-3) / 4.0, gamma=1.0)
        return AttackConfig.for_training(eps)


@dataclass
class History:
    """Per-epoch metrics of one training run."""

    rows: list = field(default_factory=list)

    FIELDS = ("epoch", "natural_loss", "robust_loss", "train_acc", "adv_train_acc")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.FIELDS)
            for row in self.rows:
                writer.writerow([row[k] for k in self.FIELDS])

    def column(self, name):
        return np.array([row[name] for row in self.rows], dtype=float)


def _as_arrays(data):
    if isinstance(data, LabeledDataset):
        return data.X, data.y, data.num_classes
    X, y = data
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if len(y) == 0:
        raise InputError("cannot train on an empty dataset")
    return X, y, max(int(y.max()) + 1, 2)


def initial_model(input_dim, num_classes, cfg):
    init_seq = np.random.SeedSequence(cfg.seed).spawn(4)[0]
    return nn.init_model([input_dim, *cfg.hidden_sizes, num_classes],
                         np.random.default_rng(init_seq))


class _Trainer:
    """One training run; owns its model, optimizer and RNG streams."""

    def __init__(self, X, y, num_classes, cfg):
        if len(X) == 0:
            raise InputError("cannot train on an empty dataset")
        self.X, self.y, self.cfg = X, y, cfg
        _, shuffle_seq, attack_seq, subset_seq = np.random.SeedSequence(cfg.seed).spawn(4)
        self.shuffle_rng = np.random.default_rng(shuffle_seq)
        self.attack_rng = np.random.default_rng(attack_seq)
        self.model = initial_model(X.shape[1], num_classes, cfg)
        self.opt = nn.MomentumSGD(cfg.lr, cfg.momentum)
        self.alpha = cfg.resolved_alpha
        self.attack = cfg.resolved_attack
        self.adv_mask = None
        if cfg.method == "pgd-adv" and cfg.adv_train_ratio < 1.0:
            n_adv = int(round(cfg.adv_train_ratio * len(X)))
            chosen = np.random.default_rng(subset_seq).choice(len(X), n_adv, replace=False)
            self.adv_mask = np.zeros(len(X), dtype=bool)
            self.adv_mask[chosen] = True
        steps_per_epoch = -(-len(X) // cfg.batch_size)
        self.ramp_steps = cfg.eps_ramp * cfg.epochs * steps_per_epoch
        self.step_count = 0

    def run(self, record_adv=False):
        history = History()
        for epoch in range(self.cfg.epochs):
            order = self.shuffle_rng.permutation(len(self.X))
            nat, rob = [], []
            for start in range(0, len(order), self.cfg.batch_size):
                idx = order[start:start + self.cfg.batch_size]
                n_loss, r_loss = self.step(idx)
                nat.append(n_loss)
                rob.append(r_loss)
                self.step_count += 1
            row = {"epoch": epoch + 1, "natural_loss": float(np.mean(nat)),
                   "robust_loss": float(np.mean(rob)),
                   "train_acc": accuracy(self.model, self.X, self.y),
                   "adv_train_acc": float("nan")}
            if record_adv:
                row["adv_train_acc"] = adv_accuracy(self.model, self.X, self.y,
                                                    self.cfg.constraint)
            history.rows.append(row)
        return self.model, history

    def step(self, idx):
        Xb, yb = self.X[idx], self.y[idx]
        method = self.cfg.method
        if method == "natural":
            loss, grads, _ = nn.loss_and_grads(self.model, Xb, yb)
            robust = 0.0
        elif method == "pgd-adv":
            loss, robust, grads = self._pgd_step(Xb, yb, idx)
        elif method == "dist-adv":
            X_adv = dist_attack(self.model, Xb, yb, self.attack, self.cfg.constraint)
            robust, grads, _ = nn.loss_and_grads(self.model, X_adv, yb)
            loss = self._natural_loss(Xb, yb)
        elif method == "diff-adv":
            loss, robust, grads = self._diff_step(Xb, yb)
        else:
            loss, robust, grads = self._ibp_step(Xb, yb)
        self.opt.step(self.model, grads)
        return loss, robust

    def _natural_loss(self, Xb, yb):
        return float(np.mean(nn.cross_entropy(nn.predict(self.model, Xb), yb)))

    def _pgd_step(self, Xb, yb, idx):
        mask = None if self.adv_mask is None else self.adv_mask[idx]
        if mask is not None and not mask.any():
            loss, grads, _ = nn.loss_and_grads(self.model, Xb, yb)
            return loss, 0.0, grads
        X_adv = pgd_untargeted(self.model, Xb, yb, self.cfg.constraint, self.attack,
                               self.attack_rng)
        if mask is not None:
            X_adv = np.where(mask[:, None], X_adv, Xb)
        if self.cfg.da_weight > 0:
            spec = nn.LossSpec("da-composite", adv_inputs=X_adv, da_weight=self.cfg.da_weight)
            robust, grads, _ = nn.loss_and_grads(self.model, Xb, yb, spec)
        else:
            robust, grads, _ = nn.loss_and_grads(self.model, X_adv, yb)
        return self._natural_loss(Xb, yb), robust, grads

    def _diff_step(self, Xb, yb):
        alpha = self.alpha
        loss, grads, _ = nn.loss_and_grads(self.model, Xb, yb)
        if alpha == 1.0:
            return loss, 0.0, grads
        X_adv = diff_pgd(self.model, Xb, self.cfg.constraint, self.attack, self.attack_rng)
        spec = nn.LossSpec("kl", reference=nn.predict(self.model, Xb))
        robust, kl_grads, _ = nn.loss_and_grads(self.model, X_adv, yb, spec)
        return loss, robust, grads.scale(alpha) + kl_grads.scale(1.0 - alpha)

    def current_epsilon(self):
        eps = self.cfg.constraint.epsilon
        if self.ramp_steps <= 0:
            return eps
        return eps * min(1.0, self.step_count / self.ramp_steps)

    def _ibp_step(self, Xb, yb):
        alpha = self.alpha
        loss, grads, _ = nn.loss_and_grads(self.model, Xb, yb)
        constraint = self.cfg.constraint.with_epsilon(self.current_epsilon())
        lo, hi = constraint.bounds(Xb)
        layers, cache = propagate(self.model, lo, hi)
        low, high = layers[-1]
        wc = worst_case_logits(low, high, yb)
        variant = nn.LossSpec(self.cfg.loss_variant)
        values, dwc = nn.logit_loss(wc, yb, variant)
        dwc = dwc / len(yb)
        rows = np.arange(len(yb))
        dlow = np.zeros_like(dwc)
        dlow[rows, yb] = dwc[rows, yb]
        dhigh = dwc.copy()
        dhigh[rows, yb] = 0.0
        robust_grads = propagate_backward(self.model, cache, dlow, dhigh)
        return loss, float(values.mean()), grads.scale(alpha) + robust_grads.scale(1.0 - alpha)


def fit(data, cfg, record_adv=False):
    """Train per ``cfg.method``; returns ``(model, history)``."""
    X, y, k = _as_arrays(data)
    return _Trainer(X, y, k, cfg).run(record_adv=record_adv)


def _check_method(cfg, *allowed):
    if cfg.method not in allowed:
        raise InputError(f"expected method in {allowed}, got {cfg.method!r}")


def train_natural(data, cfg):
    _check_method(cfg, "natural")
    return fit(data, cfg)[0]


def train_pgd_adv(data, cfg):
    _check_method(cfg, "pgd-adv")
    return fit(data, replace(cfg, alpha=0.0, adv_train_ratio=1.0))[0]


def train_dist_adv(data, cfg):
    _check_method(cfg, "dist-adv")
    if not cfg.resolved_attack.gamma > 0:
        raise InputError("dist-adv training needs gamma > 0")
    return fit(data, replace(cfg, alpha=0.0))[0]


def train_diff_adv(data, cfg):
    _check_method(cfg, "diff-adv")
    return fit(data, cfg)[0]


def train_ibp_verified(data, cfg):
    _check_method(cfg, "ibp-verified")
    if cfg.resolved_alpha >= 1.0:
        raise InputError("ibp-verified training needs alpha < 1")
    return fit(data, cfg)[0]


def train_mixed_ratio(data, cfg):
    _check_method(cfg, "pgd-adv")
    return fit(data, replace(cfg, alpha=0.0))[0]


class RobustMLPClassifier(ClassifierMixin, BaseEstimator):
    """Dense ReLU classifier trained naturally or robustly.

    Parameters
    ----------
    method : str, default="natural"
        One of ``natural``, ``pgd-adv``, ``dist-adv``, ``diff-adv``,
        ``ibp-verified``.
    hidden_sizes : tuple of int, default=(64,)
        Widths of the hidden layers.
    epsilon : float, default=0.05
        l-infinity training budget.
    alpha : float, optional
        Natural-loss weight; ``None`` picks the method default.
    attack_steps, attack_step_size, gamma
        Inner attack settings; ``None`` picks the training defaults.
    box : tuple, default=(0.0, 1.0)
        Input-domain bounds.

    Attributes
    ----------
    model_ : nn.Model
    classes_ : ndarray
    history_ : History
    """

    def __init__(self, method="natural", hidden_sizes=(64,), epsilon=0.05, alpha=None,
                 epochs=200, batch_size=50, learning_rate=0.01, momentum=0.9,
                 attack_steps=None, attack_step_size=None, gamma=None, adv_train_ratio=1.0,
                 da_weight=0.0, loss_variant="cross-entropy", box=(0.0, 1.0), random_state=0):
        self.method = method
        self.hidden_sizes = hidden_sizes
        self.epsilon = epsilon
        self.alpha = alpha
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.attack_steps = attack_steps
        self.attack_step_size = attack_step_size
        self.gamma = gamma
        self.adv_train_ratio = adv_train_ratio
        self.da_weight = da_weight
        self.loss_variant = loss_variant
        self.box = box
        self.random_state = random_state

    def train_config(self):
        constraint = PerturbationConstraint(self.epsilon, *self.box)
        cfg = TrainConfig(method=self.method, hidden_sizes=tuple(self.hidden_sizes),
                          alpha=self.alpha, epochs=self.epochs, batch_size=self.batch_size,
                          lr=self.learning_rate, momentum=self.momentum, constraint=constraint,
                          adv_train_ratio=self.adv_train_ratio, da_weight=self.da_weight,
                          loss_variant=self.loss_variant, seed=self.random_state)
        overrides = {k: v for k, v in (("steps", self.attack_steps),
                                       ("step_size", self.attack_step_size),
                                       ("gamma", self.gamma)) if v is not None}
        if overrides:
            cfg = replace(cfg, attack=replace(cfg.resolved_attack, **overrides))
        return cfg

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = unique_labels(y)
        y_idx = np.searchsorted(self.classes_, y)
        k = max(len(self.classes_), 2)
        self.n_features_in_ = X.shape[1]
        self.model_, self.history_ = _Trainer(X, y_idx, k, self.train_config()).run()
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        return nn.logits(self.model_, X)

    def predict_proba(self, X):
        return nn.softmax(self.decision_function(X))

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]
