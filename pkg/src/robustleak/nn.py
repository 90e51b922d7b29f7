"""Dense ReLU networks in plain numpy: forward pass, losses and exact backprop.

Weights are stored ``(out_features, in_features)`` so a layer computes
``a @ W.T + b``.  Every function accepts a single feature vector or a 2-d
batch; single vectors come back unbatched.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InputError, NumericError

PROB_FLOOR = 1e-12

LOSS_KINDS = ("cross-entropy", "kl", "softplus-margin", "da-composite")


@dataclass
class Model:
    """Feed-forward classifier: affine layers with ReLU between them.

    Parameters
    ----------
    weights : list of ndarray
        One ``(out, in)`` matrix per layer.
    biases : list of ndarray
        One ``(out,)`` vector per layer.
    """

    weights: list
    biases: list

    def __post_init__(self):
        self.weights = [np.array(w, dtype=float, ndmin=2) for w in self.weights]
        self.biases = [np.array(b, dtype=float, ndmin=1) for b in self.biases]
        if not self.weights or len(self.weights) != len(self.biases):
            raise InputError("model needs one bias vector per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise InputError(f"layer {i}: bias shape {b.shape} does not match weight {w.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise InputError(f"layer {i}: input width {w.shape[1]} != previous output "
                                 f"{self.weights[i - 1].shape[0]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InputError(f"layer {i}: non-finite parameters")
        if self.num_classes < 2:
            raise InputError("a classifier needs at least 2 outputs")

    @property
    def input_dim(self):
        return self.weights[0].shape[1]

    @property
    def num_classes(self):
        return self.weights[-1].shape[0]

    @property
    def layer_sizes(self):
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    def copy(self):
        return Model([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "layers": [{"w": w.tolist(), "b": b.tolist()}
                       for w, b in zip(self.weights, self.biases)],
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            layers = doc["layers"]
            model = cls([layer["w"] for layer in layers], [layer["b"] for layer in layers])
        except (KeyError, TypeError) as exc:
            raise InputError(f"malformed model checkpoint: {exc}") from exc
        if model.input_dim != doc.get("input_dim") or model.num_classes != doc.get("num_classes"):
            raise InputError("checkpoint header does not match layer shapes")
        return model

    def save(self, path):
        # json emits shortest round-trip reprs for floats
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class Gradients:
    """Parameter-shaped container used for gradients and momentum buffers."""

    weights: list
    biases: list

    @classmethod
    def zeros_like(cls, model):
        return cls([np.zeros_like(w) for w in model.weights],
                   [np.zeros_like(b) for b in model.biases])

    def arrays(self):
        return [*self.weights, *self.biases]

    def norm(self):
        return float(np.sqrt(sum(np.sum(a * a) for a in self.arrays())))

    def __add__(self, other):
        return Gradients([a + b for a, b in zip(self.weights, other.weights)],
                         [a + b for a, b in zip(self.biases, other.biases)])

    def scale(self, factor):
        return Gradients([factor * a for a in self.weights], [factor * a for a in self.biases])


@dataclass
class LossSpec:
    """Which loss a gradient call differentiates.

    ``kind`` is one of ``cross-entropy``, ``kl`` (divergence from the
    constant ``reference`` probabilities to the model's prediction),
    ``softplus-margin`` or ``da-composite`` (cross-entropy on ``adv_inputs``
    plus ``da_weight`` times the DA regularizer between benign and
    adversarial logits).
    """

    kind: str = "cross-entropy"
    reference: np.ndarray = None
    adv_inputs: np.ndarray = None
    da_weight: float = 0.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise InputError(f"unknown loss kind {self.kind!r}")
        if self.kind == "kl" and self.reference is None:
            raise InputError("kl loss needs reference probabilities")
        if self.kind == "da-composite" and self.adv_inputs is None:
            raise InputError("da-composite loss needs adversarial inputs")


CROSS_ENTROPY = LossSpec()


def init_model(layer_sizes, rng):
    """Glorot-uniform weights and zero biases for the given layer widths."""
    if len(layer_sizes) < 2:
        raise InputError("need at least input and output sizes")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Model(weights, biases)


def _as_batch(x, dim):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != dim:
        raise InputError(f"expected feature dimension {dim}, got shape {x.shape}")
    return X, single


def forward(model, X):
    """Batched forward pass returning logits and the cache backprop needs."""
    cache = []
    a = X
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        cache.append((a, z))
        a = z if i == last else np.maximum(z, 0.0)
    return a, cache


def backward(model, cache, dlogits):
    """Backpropagate ``dlogits`` (gradient w.r.t. batched logits).

    Returns ``(Gradients, dX)`` where gradients are summed over the batch.
    """
    dws, dbs = [], []
    delta = dlogits
    for i in range(len(model.weights) - 1, -1, -1):
        a, z = cache[i]
        if i != len(model.weights) - 1:
            delta = delta * (z > 0)
        dws.append(delta.T @ a)
        dbs.append(delta.sum(axis=0))
        delta = delta @ model.weights[i]
    return Gradients(dws[::-1], dbs[::-1]), delta


def logits(model, x):
    """Pre-softmax outputs of the final affine layer."""
    X, single = _as_batch(x, model.input_dim)
    out, _ = forward(model, X)
    return out[0] if single else out


def softmax(z):
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def predict(model, x):
    """Softmax prediction vector(s) for ``x``."""
    return softmax(logits(model, x))


def temperature_scale(z, temperature):
    """Softmax of ``z / temperature``."""
    if not temperature > 0:
        raise InputError(f"temperature must be positive, got {temperature}")
    return softmax(np.asarray(z, dtype=float) / temperature)


def _labels(y, n, k):
    y = np.atleast_1d(np.asarray(y))
    if y.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise InputError("labels must be integers")
        y = y.astype(int)
    if np.any((y < 0) | (y >= k)):
        raise InputError(f"labels must lie in [0, {k})")
    return y


def cross_entropy(pred, y):
    """``-log(pred[y])`` with the probability floored at 1e-12."""
    pred = np.asarray(pred, dtype=float)
    P = np.atleast_2d(pred)
    y = _labels(y, P.shape[0], P.shape[1])
    out = -np.log(np.maximum(P[np.arange(len(y)), y], PROB_FLOOR))
    return float(out[0]) if pred.ndim == 1 else out


def kl_divergence(p, q):
    """``sum p * log(p / q)`` with both arguments floored at 1e-12."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise InputError(f"shape mismatch {p.shape} vs {q.shape}")
    pf = np.maximum(p, PROB_FLOOR)
    qf = np.maximum(q, PROB_FLOOR)
    return np.sum(p * (np.log(pf) - np.log(qf)), axis=-1)


def softplus_margin_loss(z, y):
    """``log(exp(max_{j != y} z_j - z_y) + 1)``."""
    z = np.asarray(z, dtype=float)
    Z = np.atleast_2d(z)
    if Z.shape[1] < 2:
        raise InputError("margin loss needs at least two classes")
    y = _labels(y, Z.shape[0], Z.shape[1])
    margin = _runner_up(Z, y)[1] - Z[np.arange(len(y)), y]
    out = np.logaddexp(0.0, margin)
    return float(out[0]) if z.ndim == 1 else out


def _runner_up(Z, y):
    masked = Z.copy()
    masked[np.arange(len(y)), y] = -np.inf
    j = masked.argmax(axis=1)
    return j, masked[np.arange(len(y)), j]


def da_regularizer(benign_logits, adv_logits):
    """Entrywise l1 distance between the means and covariances of two logit batches."""
    return _da_value_and_grads(benign_logits, adv_logits)[0]


def _da_value_and_grads(zb, za):
    zb = np.asarray(zb, dtype=float)
    za = np.asarray(za, dtype=float)
    if zb.ndim != 2 or za.ndim != 2 or zb.shape[1] != za.shape[1]:
        raise InputError("DA regularizer needs two 2-d logit batches of equal width")
    nb, na = len(zb), len(za)
    if nb < 2 or na < 2:
        raise InputError("DA regularizer needs at least 2 rows per batch for covariance")
    cb = zb - zb.mean(axis=0)
    ca = za - za.mean(axis=0)
    cov_b = cb.T @ cb / (nb - 1)
    cov_a = ca.T @ ca / (na - 1)
    dmean = zb.mean(axis=0) - za.mean(axis=0)
    dcov = cov_b - cov_a
    value = float(np.abs(dmean).sum() + np.abs(dcov).sum())
    s_mean = np.sign(dmean)
    s_cov = np.sign(dcov)
    # centering terms vanish because centered rows sum to zero
    grad_b = s_mean / nb + cb @ (s_cov + s_cov.T) / (nb - 1)
    grad_a = -s_mean / na - ca @ (s_cov + s_cov.T) / (na - 1)
    return value, grad_b, grad_a


def logit_loss(Z, y, spec=CROSS_ENTROPY):
    """Per-example loss values and their gradient w.r.t. the logits ``Z``.

    Only the single-batch kinds are handled here; ``da-composite`` needs two
    forward passes and lives in :func:`loss_and_grads`.
    """
    n, k = Z.shape
    y = _labels(y, n, k)
    rows = np.arange(n)
    if spec.kind == "cross-entropy":
        P = softmax(Z)
        values = -np.log(np.maximum(P[rows, y], PROB_FLOOR))
        dZ = P.copy()
        dZ[rows, y] -= 1.0
    elif spec.kind == "kl":
        P = softmax(Z)
        Q = np.atleast_2d(np.asarray(spec.reference, dtype=float))
        if Q.shape != P.shape:
            raise InputError(f"reference shape {Q.shape} does not match predictions {P.shape}")
        log_ratio = np.log(np.maximum(P, PROB_FLOOR)) - np.log(np.maximum(Q, PROB_FLOOR))
        values = np.sum(P * log_ratio, axis=1)
        dZ = P * (log_ratio - values[:, None])
    elif spec.kind == "softplus-margin":
        j, zj = _runner_up(Z, y)
        margin = zj - Z[rows, y]
        values = np.logaddexp(0.0, margin)
        sig = np.exp(-np.logaddexp(0.0, -margin))
        dZ = np.zeros_like(Z)
        dZ[rows, j] += sig
        dZ[rows, y] -= sig
    else:
        raise InputError(f"loss kind {spec.kind!r} is not a per-batch logit loss")
    return values, dZ


def loss_and_grads(model, X, y, spec=CROSS_ENTROPY):
    """Mean loss over the batch plus its exact parameter and input gradients.

    The input gradient is returned per example, un-averaged, so row ``i`` is
    the gradient of example ``i``'s own loss.
    """
    X, _ = _as_batch(X, model.input_dim)
    n = X.shape[0]
    if n == 0:
        raise InputError("empty batch")
    if spec.kind == "da-composite":
        Xa, _ = _as_batch(spec.adv_inputs, model.input_dim)
        if Xa.shape != X.shape:
            raise InputError("adversarial batch must match the benign batch")
        Zb, cache_b = forward(model, X)
        Za, cache_a = forward(model, Xa)
        ce, dZa = logit_loss(Za, y)
        da, gb, ga = _da_value_and_grads(Zb, Za)
        gb = spec.da_weight * gb
        ga = dZa / n + spec.da_weight * ga
        grads_b, dXb = backward(model, cache_b, gb)
        grads_a, _ = backward(model, cache_a, ga)
        return float(ce.mean() + spec.da_weight * da), grads_b + grads_a, dXb * n
    Z, cache = forward(model, X)
    values, dZ = logit_loss(Z, y, spec)
    grads, dX = backward(model, cache, dZ / n)
    return float(values.mean()), grads, dX * n


def grad_params(model, X, y, spec=CROSS_ENTROPY):
    """Exact mean-over-batch gradient of the loss w.r.t. every weight and bias."""
    return loss_and_grads(model, X, y, spec)[1]


def grad_input(model, x, y, spec=CROSS_ENTROPY):
    """Exact gradient of the loss w.r.t. the input features."""
    X, single = _as_batch(x, model.input_dim)
    if spec.kind == "da-composite":
        raise InputError("input gradient is undefined for the batch-level DA loss")
    Z, cache = forward(model, X)
    _, dZ = logit_loss(Z, np.atleast_1d(y), spec)
    _, dX = backward(model, cache, dZ)
    return dX[0] if single else dX


def sgd_update(model, grads, learning_rate, momentum=0.0, velocity=None):
    """Momentum SGD step applied to ``model`` in place.

    ``velocity`` is updated in place as ``v = momentum * v + g`` before the
    step ``theta -= learning_rate * v``; pass the same buffer every call.
    """
    if not 0.0 <= momentum < 1.0:
        raise InputError(f"momentum must be in [0, 1), got {momentum}")
    params = [*model.weights, *model.biases]
    gs = grads.arrays()
    if len(gs) != len(params) or any(g.shape != p.shape for g, p in zip(gs, params)):
        raise InputError("gradient structure does not match the model")
    if velocity is None:
        for p, g in zip(params, gs):
            p -= learning_rate * g
        return model
    for p, g, v in zip(params, gs, velocity.arrays()):
        v *= momentum
        v += g
        p -= learning_rate * v
    return model


@dataclass
class MomentumSGD:
    """Stateful wrapper around :func:`sgd_update`."""

    learning_rate: float = 0.01
    momentum: float = 0.9
    velocity: Gradients = field(default=None, repr=False)

    def step(self, model, grads):
        if self.velocity is None:
            self.velocity = Gradients.zeros_like(model)
        return sgd_update(model, grads, self.learning_rate, self.momentum, self.velocity)
