"""Datasets: seeded synthetic clusters, CSV/IDX ingestion and splitting."""

import csv
import struct
from dataclasses import dataclass

import numpy as np

from . import nn
from .attacks import AttackConfig, PerturbationConstraint, pgd_untargeted
from .exceptions import FormatError, InputError, ParseError, SchemaError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    """Feature matrix, integer labels and the box the features live in.

    ``ids`` identifies each row in the dataset it was drawn from, which is
    how splits prove disjointness.
    """

    X: np.ndarray
    y: np.ndarray
    num_classes: int
    box_low: float = 0.0
    box_high: float = 1.0
    ids: np.ndarray = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=int)
        if self.X.ndim != 2 or self.y.shape != (len(self.X),):
            raise SchemaError(f"features {self.X.shape} and labels {self.y.shape} disagree")
        if self.ids is None:
            self.ids = np.arange(len(self.X))
        self.ids = np.asarray(self.ids)
        if np.any((self.y < 0) | (self.y >= self.num_classes)):
            raise SchemaError(f"labels must lie in [0, {self.num_classes})")
        if np.any(self.X < self.box_low) or np.any(self.X > self.box_high):
            raise SchemaError(f"features outside the box [{self.box_low}, {self.box_high}]")

    def __len__(self):
        return len(self.y)

    @property
    def feature_dim(self):
        return self.X.shape[1]

    def subset(self, index):
        index = np.asarray(index, dtype=int)
        return LabeledDataset(self.X[index], self.y[index], self.num_classes,
                              self.box_low, self.box_high, self.ids[index])

    def concat(self, other):
        return LabeledDataset(np.vstack([self.X, other.X]), np.concatenate([self.y, other.y]),
                              self.num_classes, self.box_low, self.box_high,
                              np.concatenate([self.ids, other.ids]))

    def constraint(self, epsilon):
        return PerturbationConstraint(epsilon, self.box_low, self.box_high)


@dataclass
class Split:
    train: LabeledDataset
    test: LabeledDataset
    shadow_train: LabeledDataset
    shadow_test: LabeledDataset

    @property
    def members(self):
        """Everything the target model is trained on: ``train`` plus ``shadow_train``."""
        return self.train.concat(self.shadow_train)

    def parts(self):
        return {"train": self.train, "test": self.test,
                "shadow_train": self.shadow_train, "shadow_test": self.shadow_test}


def gen_synthetic(classes, per_class, dim, spread, seed):
    """Gaussian clusters with centers in ``[0.2, 0.8]^dim``, clipped to ``[0, 1]``."""
    if classes < 2 or per_class < 1 or dim < 2 or not spread > 0:
        raise InputError("need classes >= 2, per_class >= 1, dim >= 2 and spread > 0")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(classes, dim))
    y = np.repeat(np.arange(classes), per_class)
    X = np.clip(centers[y] + spread * rng.standard_normal((len(y), dim)), 0.0, 1.0)
    return LabeledDataset(X, y, classes)


def mini_faces(seed=0):
    """Canonical desk dataset: 10 classes, 32 features, spread 0.06.

    100 points per class so the default split yields 60 training members,
    20 test non-members and 20 shadow non-members per class.
    """
    return gen_synthetic(10, 100, 32, 0.06, seed)


MINI_FACES_SPLIT = {"train_n": 400, "test_n": 200, "shadow_train_n": 200, "shadow_test_n": 200}


def make_split(data, train_n, test_n, shadow_train_n=0, shadow_test_n=0, seed=0,
               stratified=True):
    """Seeded disjoint sampling into train / test / shadow parts."""
    sizes = [train_n, test_n, shadow_train_n, shadow_test_n]
    if any(s < 0 for s in sizes) or sum(sizes) > len(data):
        raise InputError(f"requested {sum(sizes)} examples from a dataset of {len(data)}")
    rng = np.random.default_rng(seed)
    if not stratified:
        order = rng.permutation(len(data))
        bounds = np.cumsum([0] + sizes)
        parts = [order[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    else:
        parts = [[] for _ in sizes]
        k = data.num_classes
        pools = [rng.permutation(np.flatnonzero(data.y == c)) for c in range(k)]
        taken = [0] * k
        for p, size in enumerate(sizes):
            quota = [size // k + (1 if c < size % k else 0) for c in range(k)]
            for c in range(k):
                chunk = pools[c][taken[c]:taken[c] + quota[c]]
                if len(chunk) < quota[c]:
                    raise InputError(f"class {c} has too few examples for a stratified split")
                parts[p].extend(chunk)
                taken[c] += quota[c]
        parts = [np.sort(np.asarray(p, dtype=int)) for p in parts]
    return Split(*(data.subset(p) for p in parts))


def write_csv(data, path):
    with open(path, "w", newline="") as fh:
        if (data.box_low, data.box_high) != (0.0, 1.0):
            fh.write(f"# box {data.box_low!r} {data.box_high!r}\n")
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i + 1}" for i in range(data.feature_dim)])
        for label, row in zip(data.y, data.X):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


def load_csv(path, num_classes=None):
    """Read ``label,f1,...,fd`` rows; an optional header and ``# box lo hi`` line lead."""
    box = (0.0, 1.0)
    header_width = None
    labels, rows = [], []
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            if text.startswith("#"):
                parts = text[1:].split()
                if parts and parts[0] == "box":
                    if len(parts) != 3 or rows:
                        raise ParseError("box declaration must be '# box lo hi' before data", lineno)
                    try:
                        box = (float(parts[1]), float(parts[2]))
                    except ValueError as exc:
                        raise ParseError(f"bad box bounds: {exc}", lineno) from exc
                continue
            fields = next(csv.reader([text]))
            if not rows and header_width is None and fields[0].strip().lower() == "label":
                header_width = len(fields)
                continue
            if len(fields) < 2 or any(f.strip() == "" for f in fields):
                raise ParseError("row needs a label and at least one feature", lineno)
            if header_width is not None and len(fields) != header_width:
                raise ParseError(f"expected {header_width} fields, got {len(fields)}", lineno)
            try:
                label = int(fields[0])
                values = [float(f) for f in fields[1:]]
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from exc
            if rows and len(values) != len(rows[0]):
                raise SchemaError(f"line {lineno}: expected {len(rows[0])} features, got {len(values)}")
            labels.append(label)
            rows.append(values)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    X = np.array(rows)
    if np.any(X < box[0]) or np.any(X > box[1]):
        raise SchemaError(f"features outside the box [{box[0]}, {box[1]}]")
    y = np.array(labels)
    if num_classes is None:
        num_classes = max(int(y.max()) + 1, 2)
    return LabeledDataset(X, y, num_classes, box[0], box[1])


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise OSError(f"truncated {what}: expected {n} bytes, got {len(buf)}")
    return buf


def load_idx(images_path, labels_path, num_classes=10):
    """Read an IDX image/label file pair; pixels are scaled by 1/255."""
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(f"image file magic {magic:#010x} != {IDX_IMAGES_MAGIC:#010x}")
        pixels = np.frombuffer(_read_exact(fh, count * rows * cols, "image data"), dtype=np.uint8)
    with open(labels_path, "rb") as fh:
        magic, n_labels = struct.unpack(">II", _read_exact(fh, 8, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"label file magic {magic:#010x} != {IDX_LABELS_MAGIC:#010x}")
        if n_labels != count:
            raise SchemaError(f"{count} images but {n_labels} labels")
        labels = np.frombuffer(_read_exact(fh, n_labels, "label data"), dtype=np.uint8)
    X = pixels.reshape(count, rows * cols).astype(float) / 255.0
    num_classes = max(num_classes, int(labels.max(initial=0)) + 1)
    return LabeledDataset(X, labels.astype(int), num_classes)


def accuracy(model, X, y):
    """Fraction of rows whose argmax logit equals the label."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise InputError("accuracy needs a non-empty 2-d batch")
    return float(np.mean(nn.logits(model, X).argmax(axis=1) == np.asarray(y)))


def adv_accuracy(model, X, y, constraint, cfg=None, rng=None):
    """Accuracy on ``pgd_untargeted`` outputs."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise InputError("adversarial accuracy needs a non-empty 2-d batch")
    X_adv = pgd_untargeted(model, X, y, constraint, cfg or AttackConfig(), rng)
    return accuracy(model, X_adv, y)
