"""Membership-inference audits of naturally and robustly trained classifiers."""

from .attacks import AttackConfig, PerturbationConstraint
from .data import LabeledDataset, Split, gen_synthetic, make_split, mini_faces
from .experiments import ExperimentConfig, load_config
from .minfer import ConfidenceThresholdAttack, MembershipReport, ThresholdStrategy
from .nn import Model
from .train import RobustMLPClassifier, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "ConfidenceThresholdAttack", "ExperimentConfig", "LabeledDataset", "MembershipReport", "Model",
    "PerturbationConstraint", "RobustMLPClassifier", "Split", "ThresholdStrategy", "TrainConfig",
    "gen_synthetic", "load_config", "make_split", "mini_faces",
]
