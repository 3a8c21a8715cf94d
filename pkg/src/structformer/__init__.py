"""Structured tokenization of behavioural event logs and engagement models."""

from .backbones import PRESETS, BackboneConfig, BehaviorModel
from .datagen import GeneratorConfig, generate_corpus
from .objectives import LabelSpec, fit_label_spec
from .schema import FeatureSchema, Session, parse_event_log, split_by_user
from .trainer import TrainConfig, evaluate, train

__all__ = [
    "PRESETS", "BackboneConfig", "BehaviorModel", "GeneratorConfig", "generate_corpus",
    "LabelSpec", "fit_label_spec", "FeatureSchema", "Session", "parse_event_log",
    "split_by_user", "TrainConfig", "evaluate", "train",
]
