"""Membership inference: confidence thresholding and shadow inference classifiers."""

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted, column_or_1d

from . import nn
from .attacks import AttackConfig, PerturbationConstraint, pgd_targeted, pgd_untargeted
from .data import accuracy, adv_accuracy
from .exceptions import InputError
from .train import TrainConfig, _Trainer
from .verify import verified_accuracy, verified_worst_case_confidence

KINDS = ("benign", "adversarial", "verified")


@dataclass(frozen=True)
class ThresholdStrategy:
    """Membership rule ``confidence >= tau`` on one of three confidence sources."""

    kind: str = "benign"
    tau: float = 0.0
    attack: AttackConfig = field(default_factory=AttackConfig)
    constraint: PerturbationConstraint = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"strategy kind must be one of {KINDS}")
        if not 0.0 <= self.tau <= 1.0:
            raise InputError("tau must lie in [0, 1]")
        if self.kind != "benign" and self.constraint is None:
            raise InputError(f"{self.kind} strategy needs a perturbation constraint")


def scaled_model(model, temperature):
    """Copy of ``model`` whose logits are divided by ``temperature``."""
    if not temperature > 0:
        raise InputError("temperature must be positive")
    if temperature == 1.0:
        return model
    out = model.copy()
    out.weights[-1] /= temperature
    out.biases[-1] /= temperature
    return out


def strategy_confidence(model, X, y, strategy, rng=None):
    """``F(x)_y``, ``F(x_adv)_y`` or the verified worst-case confidence."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=int))
    if strategy.kind == "verified":
        return verified_worst_case_confidence(model, X, y, strategy.constraint)
    if strategy.kind == "adversarial":
        X = pgd_untargeted(model, X, y, strategy.constraint, strategy.attack, rng)
    return nn.predict(model, X)[np.arange(len(y)), y]


def infer_membership(model, X, y, strategy, rng=None):
    conf = strategy_confidence(model, X, y, strategy, rng)
    return (conf >= strategy.tau).astype(int)


class ThresholdChoice(NamedTuple):
    tau: float
    gap: float


def _count_at_least(sorted_values, taus):
    return len(sorted_values) - np.searchsorted(sorted_values, taus, side="left")


def select_threshold(member_conf, nonmember_conf):
    """Threshold maximizing the member-minus-non-member CCDF gap.

    Candidates are the observed confidences plus 0; ties go to the smallest.
    Gaps are compared as integer cross-products so ties are exact, and the
    returned gap is the correctly rounded fraction.
    """
    m = np.sort(np.asarray(member_conf, dtype=float).ravel())
    n = np.sort(np.asarray(nonmember_conf, dtype=float).ravel())
    if len(m) == 0 or len(n) == 0:
        raise InputError("threshold selection needs member and non-member confidences")
    candidates = np.unique(np.concatenate([m, n, [0.0]]))
    numer = (_count_at_least(m, candidates) * len(n)
             - _count_at_least(n, candidates) * len(m))
    best = int(np.argmax(numer))
    gap = Fraction(int(numer[best]), len(m) * len(n))
    return ThresholdChoice(float(candidates[best]), float(gap))


def membership_accuracy(member_bits, nonmember_bits):
    """Balanced accuracy of membership decisions: members flagged plus non-members cleared."""
    member_bits = np.asarray(member_bits, dtype=int)
    nonmember_bits = np.asarray(nonmember_bits, dtype=int)
    if len(member_bits) == 0 or len(nonmember_bits) == 0:
        raise InputError("inference accuracy needs members and non-members")
    # summed as exact fractions and rounded once
    flagged = Fraction(int(member_bits.sum()), 2 * len(member_bits))
    cleared = Fraction(int((1 - nonmember_bits).sum()), 2 * len(nonmember_bits))
    return float(flagged + cleared)


def inference_accuracy(model, strategy, train, test, rng=None):
    """Membership inference accuracy of ``strategy`` on ``train`` vs ``test``."""
    if len(train) == 0 or len(test) == 0:
        raise InputError("inference accuracy needs non-empty train and test sets")
    return float(membership_accuracy(infer_membership(model, train.X, train.y, strategy, rng),
                                     infer_membership(model, test.X, test.y, strategy, rng)))


def inference_advantage(a):
    """Gain over random guessing, doubled: ``2 * (a - 0.5)``.

    Written as ``2a - 1`` so Decimal and Fraction inputs stay exact; for
    floats both forms round identically.
    """
    return 2 * a - 1


class ConfidenceThresholdAttack(ClassifierMixin, BaseEstimator):
    """Threshold attack over precomputed confidences.

    ``fit`` takes confidences and a 0/1 membership vector and learns
    ``tau_``; ``score`` returns balanced membership accuracy.
    """

    def fit(self, X, y):
        conf = column_or_1d(np.asarray(X, dtype=float).ravel())
        y = column_or_1d(y).astype(int)
        if conf.shape != y.shape or not set(np.unique(y)) <= {0, 1}:
            raise InputError("need one 0/1 membership label per confidence")
        self.classes_ = np.array([0, 1])
        self.tau_, self.gap_ = select_threshold(conf[y == 1], conf[y == 0])
        return self

    def predict(self, X):
        check_is_fitted(self, "tau_")
        return (np.asarray(X, dtype=float).ravel() >= self.tau_).astype(int)

    def score(self, X, y, sample_weight=None):
        bits = self.predict(X)
        y = column_or_1d(y).astype(int)
        return float(membership_accuracy(bits[y == 1], bits[y == 0]))


def prediction_features(model, X, y, kind, constraint=None, cfg=None, rng=None):
    """Feature block for shadow inference: benign, untargeted or targeted predictions."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if kind == "benign":
        return nn.predict(model, X)
    if kind == "untargeted":
        return nn.predict(model, pgd_untargeted(model, X, y, constraint, cfg, rng))
    if kind == "targeted":
        return targeted_prediction_block(model, X, y, constraint, cfg, rng)
    raise InputError(f"unknown feature kind {kind!r}")


def targeted_prediction_block(model, X, y, constraint, cfg=None, rng=None):
    """Predictions on targeted adversarial examples, one per wrong label, ascending."""
    X, single = nn._as_batch(X, model.input_dim)
    y = nn._labels(np.atleast_1d(y), len(X), model.num_classes)
    k = model.num_classes
    blocks = np.empty((len(X), k - 1, k))
    for slot in range(k - 1):
        # slot-th wrong label, ascending: skip y itself
        target = slot + (slot >= y)
        blocks[:, slot] = nn.predict(model, pgd_targeted(model, X, target, constraint, cfg, rng))
    out = blocks.reshape(len(X), (k - 1) * k)
    return out[0] if single else out


class MembershipClassifier(ClassifierMixin, BaseEstimator):
    """200-20-2 network deciding membership from a prediction-vector block."""

    def __init__(self, hidden_sizes=(200, 20), epochs=200, batch_size=20, learning_rate=0.01,
                 momentum=0.9, random_state=0):
        self.hidden_sizes = hidden_sizes
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.random_state = random_state

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = column_or_1d(y).astype(int)
        if len(X) == 0:
            raise InputError("no samples to fit")
        self.classes_ = np.array([0, 1])
        cfg = TrainConfig(method="natural", hidden_sizes=tuple(self.hidden_sizes),
                          epochs=self.epochs, batch_size=self.batch_size, lr=self.learning_rate,
                          momentum=self.momentum, seed=self.random_state)
        self.model_, _ = _Trainer(X, y, 2, cfg).run()
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return nn.logits(self.model_, np.atleast_2d(X)).argmax(axis=1)

    def score(self, X, y, sample_weight=None):
        bits = self.predict(X)
        y = column_or_1d(y).astype(int)
        return float(membership_accuracy(bits[y == 1], bits[y == 0]))


def model_infer_fit(features, membership, labels, num_classes, **params):
    """One :class:`MembershipClassifier` per class label."""
    features = np.asarray(features, dtype=float)
    membership = np.asarray(membership, dtype=int)
    labels = np.asarray(labels, dtype=int)
    classifiers = {}
    for c in range(num_classes):
        sel = labels == c
        if not sel.any():
            raise InputError(f"class {c} has no samples to fit an inference classifier")
        classifiers[c] = MembershipClassifier(**params).fit(features[sel], membership[sel])
    return classifiers


def model_infer_accuracy(classifiers, member_features, member_labels, nonmember_features,
                         nonmember_labels):
    """Per-class membership accuracy plus the evaluation-size-weighted aggregate."""
    member_labels = np.asarray(member_labels, dtype=int)
    nonmember_labels = np.asarray(nonmember_labels, dtype=int)
    per_class, weights = {}, {}
    for c, clf in classifiers.items():
        m = member_labels == c
        n = nonmember_labels == c
        if not m.any() or not n.any():
            raise InputError(f"class {c} has no evaluation members or non-members")
        per_class[c] = float(membership_accuracy(clf.predict(member_features[m]),
                                                 clf.predict(nonmember_features[n])))
        weights[c] = int(m.sum() + n.sum())
    total = sum(weights.values())
    aggregate = sum(per_class[c] * weights[c] for c in per_class) / total
    return per_class, float(aggregate)


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    secure: np.ndarray = None
    insecure: np.ndarray = None

    def rows(self):
        for i in range(len(self.counts)):
            row = [float(self.edges[i]), float(self.edges[i + 1]), int(self.counts[i])]
            if self.secure is not None:
                row += [int(self.secure[i]), int(self.insecure[i])]
            yield row

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["bucket_low", "bucket_high", "count"]
            if self.secure is not None:
                header += ["secure_count", "insecure_count"]
            writer.writerow(header)
            writer.writerows(self.rows())


def loss_histogram(model, X, y, bins=20, partition=None, cfg=None, rng=None):
    """Cross-entropy losses bucketed over ``[0, max loss]``.

    ``partition`` is a :class:`PerturbationConstraint`; when given, each
    example is labelled secure if PGD at that budget fails to flip it.
    """
    X = np.asarray(X, dtype=float)
    if bins < 1:
        raise InputError("bins must be >= 1")
    if X.ndim != 2 or len(X) == 0:
        raise InputError("histogram needs a non-empty 2-d batch")
    y = np.asarray(y, dtype=int)
    losses = nn.cross_entropy(nn.predict(model, X), y)
    top = float(losses.max()) if losses.max() > 0 else 1.0
    counts, edges = np.histogram(losses, bins=bins, range=(0.0, top))
    if partition is None:
        return Histogram(edges, counts)
    X_adv = pgd_untargeted(model, X, y, partition, cfg or AttackConfig(), rng)
    survived = nn.logits(model, X_adv).argmax(axis=1) == y
    secure, _ = np.histogram(losses[survived], bins=edges)
    insecure, _ = np.histogram(losses[~survived], bins=edges)
    return Histogram(edges, counts, secure, insecure)


def _summary(values):
    values = np.asarray(values, dtype=float)
    return {"mean": float(values.mean()), "std": float(values.std()),
            "median": float(np.median(values)), "min": float(values.min()),
            "max": float(values.max())}


@dataclass
class StrategyResult:
    kind: str
    mode: str
    tau: float
    accuracy: float
    advantage: float
    member_confidence: dict
    nonmember_confidence: dict
    epsilon: float = None

    def to_dict(self):
        return {"kind": self.kind, "mode": self.mode, "epsilon": self.epsilon,
                "tau": self.tau, "accuracy": self.accuracy, "advantage": self.advantage,
                "member_confidence": self.member_confidence,
                "nonmember_confidence": self.nonmember_confidence}


@dataclass
class MembershipReport:
    """Accuracy table plus one result per evaluated (strategy, threshold mode)."""

    model: str
    seed: int
    accuracies: dict
    strategies: list = field(default_factory=list)
    not_applicable: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def get(self, kind, mode="oracle"):
        for r in self.strategies:
            if r.kind == kind and r.mode == mode:
                return r
        raise KeyError((kind, mode))

    def best(self, mode="oracle"):
        return max((r for r in self.strategies if r.mode == mode), key=lambda r: r.accuracy)

    def to_dict(self):
        return {"model": self.model, "seed": self.seed, "accuracies": self.accuracies,
                "strategies": [r.to_dict() for r in self.strategies],
                "not_applicable": list(self.not_applicable), "notes": self.notes}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def evaluate_strategy(model, split, kind, constraint, attack=None, modes=("oracle", "shadow"),
                      rng=None):
    """Fit thresholds (oracle on the evaluation sets, shadow on the shadow split) and score them.

    Members are ``split.train``, non-members ``split.test``; shadow mode fits
    tau on ``split.shadow_train`` vs ``split.shadow_test``.
    """
    strategy = ThresholdStrategy(kind, 0.0, attack or AttackConfig(),
                                 None if kind == "benign" else constraint)
    conf_m = strategy_confidence(model, split.train.X, split.train.y, strategy, rng)
    conf_n = strategy_confidence(model, split.test.X, split.test.y, strategy, rng)
    results = []
    for mode in modes:
        if mode == "oracle":
            tau = select_threshold(conf_m, conf_n).tau
        elif mode == "shadow":
            if len(split.shadow_train) == 0 or len(split.shadow_test) == 0:
                continue
            tau = select_threshold(
                strategy_confidence(model, split.shadow_train.X, split.shadow_train.y, strategy, rng),
                strategy_confidence(model, split.shadow_test.X, split.shadow_test.y, strategy, rng),
            ).tau
        else:
            raise InputError(f"unknown threshold mode {mode!r}")
        acc = float(membership_accuracy((conf_m >= tau).astype(int), (conf_n >= tau).astype(int)))
        results.append(StrategyResult(kind, mode, tau, acc, inference_advantage(acc),
                                      _summary(conf_m), _summary(conf_n),
                                      None if kind == "benign" else constraint.epsilon))
    return results


def accuracy_table(model, split, constraint, attack=None, verified=True):
    attack = attack or AttackConfig()
    table = {
        "train": accuracy(model, split.train.X, split.train.y),
        "test": accuracy(model, split.test.X, split.test.y),
        "adv_train": adv_accuracy(model, split.train.X, split.train.y, constraint, attack),
        "adv_test": adv_accuracy(model, split.test.X, split.test.y, constraint, attack),
    }
    if verified:
        table["ver_train"] = verified_accuracy(model, split.train.X, split.train.y, constraint)
        table["ver_test"] = verified_accuracy(model, split.test.X, split.test.y, constraint)
    return table


def audit(model, split, constraint, strategies=KINDS, attack=None, name="model", seed=0,
          verifiable=True, modes=("oracle", "shadow"), rng=None):
    """Accuracy table and every requested strategy for one model.

    ``verifiable=False`` marks the verified strategy not applicable, the way
    empirically trained models have no verifier of their own.
    """
    report = MembershipReport(name, seed, accuracy_table(model, split, constraint, attack,
                                                         verified=verifiable))
    for kind in strategies:
        if kind == "verified" and not verifiable:
            report.not_applicable.append(kind)
            continue
        report.strategies.extend(evaluate_strategy(model, split, kind, constraint, attack, modes,
                                                   rng))
    return report
