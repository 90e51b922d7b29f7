"""Config-driven experiment runs: audits, sweeps, sensitivity and report emission."""

import csv
import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .attacks import AttackConfig, PerturbationConstraint
from .data import (MINI_FACES_SPLIT, adv_accuracy, gen_synthetic, load_csv, load_idx,
                   make_split, mini_faces)
from .exceptions import ConfigError, InputError
from .minfer import KINDS, audit, evaluate_strategy, loss_histogram, scaled_model
from .train import TrainConfig, fit

logger = logging.getLogger(__name__)

SCHEMA = "robustleak/1"
DATASET_KINDS = ("mini-faces", "synthetic", "csv", "idx")
COMMANDS = ("audit", "sweep-eps", "sweep-temp", "sweep-capacity", "sweep-budget", "sweep-ratio",
            "sensitivity", "histogram")


@dataclass
class DatasetSpec:
    kind: str = "mini-faces"
    classes: int = 10
    per_class: int = 100
    dim: int = 32
    spread: float = 0.06
    seed: int = None
    path: str = None
    images: str = None
    labels: str = None
    num_classes: int = None


@dataclass
class SplitSpec:
    train_n: int = MINI_FACES_SPLIT["train_n"]
    test_n: int = MINI_FACES_SPLIT["test_n"]
    shadow_train_n: int = MINI_FACES_SPLIT["shadow_train_n"]
    shadow_test_n: int = MINI_FACES_SPLIT["shadow_test_n"]
    stratified: bool = True


@dataclass
class AttackSpec:
    steps: int = 20
    step_size: float = None
    init: str = "at-x"
    iterate: str = "final"
    gamma: float = 0.0

    def build(self):
        return AttackConfig(self.steps, self.step_size, self.init, self.iterate, self.gamma)


@dataclass
class ModelSpec:
    name: str = "natural"
    method: str = "natural"
    hidden_sizes: list = field(default_factory=lambda: [64])
    alpha: float = None
    epochs: int = 200
    batch_size: int = 50
    lr: float = 0.01
    momentum: float = 0.9
    epsilon: float = 0.05
    attack: AttackSpec = None
    adv_train_ratio: float = 1.0
    da_weight: float = 0.0
    loss_variant: str = "cross-entropy"
    eps_ramp: float = 0.5

    def train_config(self, seed, box=(0.0, 1.0)):
        return TrainConfig(
            method=self.method, hidden_sizes=tuple(self.hidden_sizes), alpha=self.alpha,
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
            constraint=PerturbationConstraint(self.epsilon, *box),
            attack=None if self.attack is None else self.attack.build(),
            adv_train_ratio=self.adv_train_ratio, da_weight=self.da_weight,
            loss_variant=self.loss_variant, eps_ramp=self.eps_ramp, seed=seed)


@dataclass
class Grids:
    attack_epsilon: list = field(default_factory=list)
    temperature: list = field(default_factory=list)
    capacity: list = field(default_factory=list)
    budget: list = field(default_factory=list)
    ratio: list = field(default_factory=list)


@dataclass
class SensitivitySpec:
    groups: list = None
    num_groups: int = 3


@dataclass
class HistogramSpec:
    bins: int = 20
    partition: bool = True


@dataclass
class ExperimentConfig:
    """One JSON document describing data, models, strategies, grids and seeds.

    ``target`` names the model the single-model sweeps use; by default the
    first non-natural model.  ``epsilon`` and ``attack`` set the evaluation
    budget and attack of every audit.
    """

    schema: str = SCHEMA
    id: str = "experiment"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    split: SplitSpec = field(default_factory=SplitSpec)
    models: list = field(default_factory=lambda: [ModelSpec()])
    target: str = None
    epsilon: float = 0.05
    attack: AttackSpec = field(default_factory=AttackSpec)
    strategies: list = field(default_factory=lambda: list(KINDS))
    modes: list = field(default_factory=lambda: ["oracle", "shadow"])
    grids: Grids = field(default_factory=Grids)
    sensitivity: SensitivitySpec = field(default_factory=SensitivitySpec)
    histogram: HistogramSpec = field(default_factory=HistogramSpec)
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "out"

    def __post_init__(self):
        try:
            self.validate()
        except InputError as exc:
            raise ConfigError(str(exc)) from exc

    def validate(self):
        if self.schema != SCHEMA:
            raise ConfigError(f"schema must be {SCHEMA!r}, got {self.schema!r}")
        if self.dataset.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if not self.models:
            raise ConfigError("at least one model is required")
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ConfigError("model names must be unique")
        if self.target is not None and self.target not in names:
            raise ConfigError(f"target {self.target!r} is not a configured model")
        for m in self.models:
            m.train_config(0)
        for s in self.strategies:
            if s not in KINDS:
                raise ConfigError(f"unknown strategy {s!r}")
        for mode in self.modes:
            if mode not in ("oracle", "shadow"):
                raise ConfigError(f"unknown threshold mode {mode!r}")
        self.attack.build()
        PerturbationConstraint(self.epsilon)
        g = self.grids
        if any(not e >= 0 for e in g.attack_epsilon + g.budget):
            raise ConfigError("epsilon grids must be non-negative")
        if g.attack_epsilon != sorted(g.attack_epsilon):
            raise ConfigError("attack_epsilon grid must be sorted")
        if any(not t > 0 for t in g.temperature):
            raise ConfigError("temperatures must be positive")
        if any(not s >= 1 for s in g.capacity):
            raise ConfigError("capacity scales must be >= 1")
        if any(not 0 <= r <= 1 for r in g.ratio):
            raise ConfigError("ratios must lie in [0, 1]")
        if self.histogram.bins < 1:
            raise ConfigError("histogram bins must be >= 1")

    @property
    def target_model(self):
        if self.target is not None:
            return next(m for m in self.models if m.name == self.target)
        return next((m for m in self.models if m.method != "natural"), self.models[0])

    def to_dict(self):
        return dataclasses.asdict(self)


_NESTED = {
    (ExperimentConfig, "dataset"): DatasetSpec, (ExperimentConfig, "split"): SplitSpec,
    (ExperimentConfig, "attack"): AttackSpec, (ExperimentConfig, "grids"): Grids,
    (ExperimentConfig, "sensitivity"): SensitivitySpec,
    (ExperimentConfig, "histogram"): HistogramSpec, (ModelSpec, "attack"): AttackSpec,
}


def _build(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in doc.items():
        sub = _NESTED.get((cls, key))
        if sub is not None and value is not None:
            value = _build(sub, value, f"{where}.{key}")
        elif cls is ExperimentConfig and key == "models":
            if not isinstance(value, list):
                raise ConfigError(f"{where}.models: expected a list")
            value = [_build(ModelSpec, m, f"{where}.models[{i}]") for i, m in enumerate(value)]
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(doc):
    if not isinstance(doc, dict) or "schema" not in doc:
        raise ConfigError(f"config must be an object with \"schema\": {SCHEMA!r}")
    return _build(ExperimentConfig, doc, "config")


def load_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(doc)


# --- per-seed context -------------------------------------------------------


def load_dataset(spec, seed):
    if spec.kind == "mini-faces":
        return mini_faces(seed if spec.seed is None else spec.seed)
    if spec.kind == "synthetic":
        return gen_synthetic(spec.classes, spec.per_class, spec.dim, spec.spread,
                             seed if spec.seed is None else spec.seed)
    if spec.kind == "csv":
        return load_csv(spec.path, spec.num_classes)
    return load_idx(spec.images, spec.labels, spec.num_classes or 10)


class Run:
    """Dataset, split and trained models for one (config, seed); models are cached."""

    def __init__(self, cfg, seed):
        self.cfg = cfg
        self.seed = seed
        self.data = load_dataset(cfg.dataset, seed)
        s = cfg.split
        self.split = make_split(self.data, s.train_n, s.test_n, s.shadow_train_n,
                                s.shadow_test_n, seed=seed, stratified=s.stratified)
        self.box = (self.data.box_low, self.data.box_high)
        self.constraint = self.data.constraint(cfg.epsilon)
        self.attack = cfg.attack.build()
        self._models = {}

    def train_config(self, spec):
        return spec.train_config(self.seed, self.box)

    def model(self, spec):
        key = json.dumps(dataclasses.asdict(replace(spec, name="")), sort_keys=True)
        if key not in self._models:
            logger.info("training %s (seed %d)", spec.name, self.seed)
            self._models[key] = fit(self.split.members, self.train_config(spec))[0]
        return self._models[key]

    def rng(self, cell):
        return np.random.default_rng([self.seed, cell])

    def audit(self, spec, cell=0, constraint=None):
        return audit(self.model(spec), self.split, constraint or self.constraint,
                     self.cfg.strategies, self.attack, spec.name, self.seed,
                     verifiable=spec.method == "ibp-verified", modes=tuple(self.cfg.modes),
                     rng=self.rng(cell))


# --- operations ---------------------------------------------------------------


def run_audit(cfg, seed):
    run = Run(cfg, seed)
    return [run.audit(spec, cell=i) for i, spec in enumerate(cfg.models)]


def _strategy_accuracy(results, mode="oracle"):
    return next(r.accuracy for r in results if r.mode == mode)


def sweep_attack_epsilon(model, split, grid, attack=None, box=(0.0, 1.0), modes=("oracle",)):
    """Adversarial-strategy accuracy per attack budget, thresholds refit each time.

    Rows are ``(epsilon, accuracy per mode)``; ``epsilon = 0`` is the benign strategy.
    """
    if not grid:
        raise InputError("epsilon grid must be non-empty")
    if list(grid) != sorted(grid):
        raise InputError("epsilon grid must be sorted")
    rows = []
    for eps in grid:
        res = evaluate_strategy(model, split, "adversarial", PerturbationConstraint(eps, *box),
                                attack, modes)
        rows.append([eps] + [_strategy_accuracy(res, m) for m in modes])
    return rows


def sweep_temperature(model, split, grid, strategies, constraint, attack=None, modes=("oracle",)):
    """Accuracy per (temperature, strategy) on the temperature-scaled model."""
    if any(not t > 0 for t in grid):
        raise ConfigError("temperatures must be positive")
    rows = []
    for t in grid:
        scaled = scaled_model(model, t)
        row = [t]
        for kind in strategies:
            res = evaluate_strategy(scaled, split, kind, constraint, attack, modes)
            row += [_strategy_accuracy(res, m) for m in modes]
        rows.append(row)
    return rows


def sweep_capacity(run, spec, scales):
    """One model per width scale: adversarial train accuracy and benign-strategy accuracy."""
    if any(not s >= 1 for s in scales):
        raise InputError("capacity scales must be >= 1")
    rows = []
    for scale in scales:
        scaled_spec = replace(spec, name=f"{spec.name}-x{scale}",
                              hidden_sizes=[int(round(h * scale)) for h in spec.hidden_sizes])
        model = run.model(scaled_spec)
        members = run.split.train
        adv = adv_accuracy(model, members.X, members.y, run.constraint, run.attack)
        res = evaluate_strategy(model, run.split, "benign", None, modes=("oracle",))
        rows.append([scale, adv, _strategy_accuracy(res)])
    return rows


def sweep_budget(run, spec, budgets):
    """One model per training budget, each audited at its own budget."""
    if any(not e >= 0 for e in budgets):
        raise InputError("training budgets must be non-negative")
    reports = []
    for eps in budgets:
        eps_spec = replace(spec, name=f"{spec.name}-eps{eps}", epsilon=eps)
        reports.append(run.audit(eps_spec, constraint=run.data.constraint(eps)))
    return reports


def sweep_ratio(run, spec, ratios):
    """One PGD model per adversarial-train ratio, audited at the evaluation budget."""
    reports = []
    for ratio in ratios:
        reports.append(run.audit(replace(spec, name=f"{spec.name}-ratio{ratio}",
                                         method="pgd-adv", adv_train_ratio=ratio)))
    return reports


@dataclass
class SensitivityResult:
    point_id: int
    label: int
    original: float
    retrained: float

    @property
    def sensitivity(self):
        return abs(self.original - self.retrained)


def default_groups(split, num_groups, seed):
    """``num_groups`` disjoint groups, each one training point per class."""
    rng = np.random.default_rng([seed, 7919])
    train = split.train
    picks = []
    for c in range(train.num_classes):
        ids = train.ids[train.y == c]
        if len(ids) < num_groups:
            raise InputError(f"class {c} has fewer than {num_groups} training points")
        picks.append(rng.choice(ids, num_groups, replace=False))
    return [[int(p[g]) for p in picks] for g in range(num_groups)]


def sensitivity_analysis(members, cfg, groups, model=None):
    """Confidence change of each excluded point after retraining without its group.

    ``members`` is the training set, ``cfg`` the training config (same seed
    for every retrain).  Results are sorted by ascending sensitivity.
    """
    flat = [i for g in groups for i in g]
    if len(set(flat)) != len(flat):
        raise InputError("sensitivity groups must be disjoint")
    position = {int(i): p for p, i in enumerate(members.ids)}
    missing = [i for i in flat if int(i) not in position]
    if missing:
        raise InputError(f"ids {missing} are not in the training set")
    if not groups:
        return []
    if model is None:
        model = fit(members, cfg)[0]
    results = []
    for group in groups:
        rows = np.array([position[int(i)] for i in group])
        keep = np.setdiff1d(np.arange(len(members)), rows)
        retrained = fit(members.subset(keep), cfg)[0]
        X, y = members.X[rows], members.y[rows]
        before = nn.predict(model, X)[np.arange(len(y)), y]
        after = nn.predict(retrained, X)[np.arange(len(y)), y]
        results.extend(SensitivityResult(int(i), int(c), float(b), float(a))
                       for i, c, b, a in zip(group, y, before, after))
    return sorted(results, key=lambda r: (r.sensitivity, r.point_id))


def run_sensitivity(run, groups=None):
    groups = groups if groups is not None else run.cfg.sensitivity.groups
    if groups is None:
        groups = default_groups(run.split, run.cfg.sensitivity.num_groups, run.seed)
    return {spec.name: sensitivity_analysis(run.split.members, run.train_config(spec), groups,
                                            run.model(spec))
            for spec in run.cfg.models}


def run_histograms(run):
    hist = run.cfg.histogram
    out = {}
    for spec in run.cfg.models:
        model = run.model(spec)
        partition = run.constraint if hist.partition else None
        for part in ("train", "test"):
            d = getattr(run.split, part)
            out[f"{spec.name}-{part}"] = loss_histogram(model, d.X, d.y, hist.bins, partition,
                                                        run.attack)
    return out


# --- results and emission -----------------------------------------------------


@dataclass
class ExperimentResult:
    """Everything one (experiment, seed) produced; ``emit_report`` writes it out."""

    experiment: str
    seed: int
    command: str = "audit"
    reports: list = field(default_factory=list)
    curves: dict = field(default_factory=dict)
    histograms: dict = field(default_factory=dict)
    sensitivity: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "schema": SCHEMA,
            "experiment": self.experiment,
            "seed": self.seed,
            "command": self.command,
            "notes": self.notes,
            "reports": [r.to_dict() for r in self.reports],
            "curves": {name: {"header": list(h), "rows": rows}
                       for name, (h, rows) in self.curves.items()},
            "sensitivity": {name: [dict(point_id=r.point_id, label=r.label, original=r.original,
                                        retrained=r.retrained, sensitivity=r.sensitivity)
                                   for r in rows]
                            for name, rows in self.sensitivity.items()},
        }


def _prefix(result):
    return f"{result.experiment}-seed{result.seed}"


def emit_report(result, out_dir):
    """Write report JSON plus curve and histogram CSVs; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    prefix = _prefix(result)
    paths = []
    report_path = os.path.join(out_dir, f"{prefix}-{result.command}-report.json")
    with open(report_path, "w") as fh:
        fh.write(json.dumps(result.to_dict(), indent=2) + "\n")
    paths.append(report_path)
    for name, (header, rows) in result.curves.items():
        path = os.path.join(out_dir, f"{prefix}-{name}.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        paths.append(path)
    for name, hist in result.histograms.items():
        path = os.path.join(out_dir, f"{prefix}-hist-{name}.csv")
        hist.write_csv(path)
        paths.append(path)
    return paths


def _notes(run):
    s = run.split
    return {"members": "train + shadow_train", "evaluation_members": len(s.train),
            "evaluation_nonmembers": len(s.test), "shadow_fit": [len(s.shadow_train),
                                                                len(s.shadow_test)],
            "threshold_modes": list(run.cfg.modes), "epsilon": run.cfg.epsilon}


def execute(cfg, command, seed):
    """Run one CLI-level ``command`` for one seed and collect an :class:`ExperimentResult`."""
    if command not in COMMANDS:
        raise InputError(f"unknown command {command!r}")
    run = Run(cfg, seed)
    result = ExperimentResult(cfg.id, seed, command, notes=_notes(run))
    spec = cfg.target_model
    modes = tuple(cfg.modes)
    if command == "audit":
        result.reports = [run.audit(m, cell=i) for i, m in enumerate(cfg.models)]
    elif command == "sweep-eps":
        grid = cfg.grids.attack_epsilon or [0.0, cfg.epsilon]
        rows = sweep_attack_epsilon(run.model(spec), run.split, grid, run.attack, run.box, modes)
        result.curves["sweep-eps"] = (["epsilon"] + [f"accuracy_{m}" for m in modes], rows)
    elif command == "sweep-temp":
        grid = cfg.grids.temperature or [1.0]
        rows = sweep_temperature(run.model(spec), run.split, grid, cfg.strategies,
                                 run.constraint, run.attack, modes)
        header = ["temperature"] + [f"{k}_{m}" for k in cfg.strategies for m in modes]
        result.curves["sweep-temp"] = (header, rows)
    elif command == "sweep-capacity":
        rows = sweep_capacity(run, spec, cfg.grids.capacity or [1])
        result.curves["sweep-capacity"] = (["scale", "adv_train_acc", "benign_accuracy"], rows)
    elif command == "sweep-budget":
        reports = sweep_budget(run, spec, cfg.grids.budget or [cfg.epsilon])
        result.reports = reports
        rows = [[eps, r.accuracies["train"], r.accuracies["adv_train"], r.best().accuracy,
                 r.best().advantage] for eps, r in zip(cfg.grids.budget or [cfg.epsilon], reports)]
        result.curves["sweep-budget"] = (["epsilon", "train_acc", "adv_train_acc",
                                          "best_accuracy", "best_advantage"], rows)
    elif command == "sweep-ratio":
        ratios = cfg.grids.ratio or [0.0, 0.5, 1.0]
        reports = sweep_ratio(run, spec, ratios)
        result.reports = reports
        rows = [[ratio, r.accuracies["adv_train"], r.best().accuracy]
                for ratio, r in zip(ratios, reports)]
        result.curves["sweep-ratio"] = (["ratio", "adv_train_acc", "best_accuracy"], rows)
    elif command == "sensitivity":
        result.sensitivity = run_sensitivity(run)
        result.curves["sensitivity"] = (
            ["model", "point_id", "label", "original", "retrained", "sensitivity"],
            [[name, r.point_id, r.label, r.original, r.retrained, r.sensitivity]
             for name, rows in result.sensitivity.items() for r in rows])
    else:
        result.histograms = run_histograms(run)
    return result

