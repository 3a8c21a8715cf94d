"""Engagement targets from session counts, and the evaluation metric suite."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

OBJECTIVES = ("binary", "multiclass4", "regression")
N_OUTPUTS = {"binary": 2, "multiclass4": 4, "regression": 1}
_PROBS = {"binary": (0.5,), "multiclass4": (0.25, 0.5, 0.75), "regression": ()}


def fit_quantiles(counts: Sequence[float], probs: Sequence[float]) -> list[float]:
    """Quantiles by linear interpolation between order statistics at rank 1 + (N-1)p."""
    x = np.sort(np.asarray(counts, dtype=np.float64))
    if x.size == 0:
        raise ValueError("cannot fit quantiles of an empty sample")
    out = []
    for p in probs:
        if not 0.0 < p < 1.0:
            raise ValueError(f"quantile level must lie in (0, 1), got {p}")
        h = (x.size - 1) * p
        lo = math.floor(h)
        hi = min(lo + 1, x.size - 1)
        out.append(float(x[lo] + (h - lo) * (x[hi] - x[lo])))
    return out


@dataclass(frozen=True)
class LabelSpec:
    objective: str
    boundaries: tuple[float, ...] = ()
    fitted_on: dict = field(default_factory=dict)
    log_target: bool = True

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective: expected one of {OBJECTIVES}, got {self.objective!r}")
        object.__setattr__(self, "boundaries", tuple(float(b) for b in self.boundaries))
        if len(self.boundaries) != len(_PROBS[self.objective]):
            raise ValueError(f"{self.objective} needs {len(_PROBS[self.objective])} boundaries")

    @property
    def n_outputs(self) -> int:
        return N_OUTPUTS[self.objective]

    @property
    def is_classification(self) -> bool:
        return self.objective != "regression"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["boundaries"] = list(self.boundaries)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "LabelSpec":
        return cls(raw["objective"], tuple(raw.get("boundaries", ())), dict(raw.get("fitted_on", {})),
                   bool(raw.get("log_target", True)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "LabelSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_label_spec(objective: str, train_counts: Sequence[int], log_target: bool = True) -> LabelSpec:
    """Freeze class boundaries on the training split's session counts."""
    if objective not in OBJECTIVES:
        raise ValueError(f"objective: expected one of {OBJECTIVES}, got {objective!r}")
    bounds = fit_quantiles(train_counts, _PROBS[objective]) if _PROBS[objective] else []
    return LabelSpec(objective, tuple(bounds), {"split": "train", "n": len(train_counts)}, log_target)


def assign_label(count: int, spec: LabelSpec):
    """Class index (count strictly above k boundaries -> k) or regression target."""
    if spec.objective == "regression":
        return math.log1p(count) if spec.log_target else float(count)
    return sum(1 for b in spec.boundaries if count > b)


def assign_labels(counts: Sequence[int], spec: LabelSpec) -> np.ndarray:
    c = np.asarray(counts, dtype=np.float64)
    if spec.objective == "regression":
        return np.log1p(c) if spec.log_target else c
    return (c[:, None] > np.asarray(spec.boundaries)[None, :]).sum(axis=1).astype(np.int64)


@dataclass
class MetricReport:
    accuracy: float
    f1: float
    precision: float
    recall: float
    train_loss: float = float("nan")
    val_loss: float = float("nan")
    seed: int | None = None


def classification_metrics(predictions: Sequence[int], labels: Sequence[int], n_classes: int) -> dict[str, float]:
    """Accuracy plus macro precision/recall/F1 over classes seen in either input."""
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {true.size} labels")
    if pred.size == 0:
        raise ValueError("no samples")
    if max(pred.max(), true.max()) >= n_classes or min(pred.min(), true.min()) < 0:
        raise ValueError(f"class index outside [0, {n_classes})")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (true, pred), 1)
    tp = np.diag(confusion).astype(np.float64)
    predicted = confusion.sum(axis=0)
    actual = confusion.sum(axis=1)
    seen = (predicted + actual) > 0
    precision = np.divide(tp, predicted, out=np.zeros(n_classes), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros(n_classes), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)
    return {
        "accuracy": float(tp.sum() / pred.size),
        "f1": float(f1[seen].mean()),
        "precision": float(precision[seen].mean()),
        "recall": float(recall[seen].mean()),
    }


def regression_metrics(pred: Sequence[float], target_counts: Sequence[int]) -> dict[str, float]:
    """MSE in log1p space and MAE in session counts after back-transform."""
    p = np.asarray(pred, dtype=np.float64)
    c = np.asarray(target_counts, dtype=np.float64)
    if p.shape != c.shape:
        raise ValueError(f"length mismatch: {p.size} vs {c.size}")
    back = np.maximum(np.expm1(p), 0.0)
    return {"mse_log": float(np.mean((p - np.log1p(c)) ** 2)), "mae_count": float(np.mean(np.abs(back - c)))}


def class_balance(labels: Sequence[int], n_classes: int) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes) / len(labels)
