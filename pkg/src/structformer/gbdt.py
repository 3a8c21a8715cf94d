"""Count-based tabular baseline: event-type histograms + gradient-boosted trees.

Trees are grown greedily with exact split search: every boundary between
two distinct feature values present in a node is a candidate.  Splits and
leaves use second-order statistics (gradient sums G, hessian sums H):

    gain = G_L^2 / (H_L + l2) + G_R^2 / (H_R + l2) - G^2 / (H + l2)
    leaf = -G / (H + l2)

Each boosting round is step-halved if it would raise the training loss, so
the per-round loss trace is non-increasing.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .schema import Session

OTHER = "OTHER"


def count_featurize(session: Session, event_type_vocab: Sequence[str]) -> np.ndarray:
    """Histogram of event types in vocabulary order, unknown types in a trailing OTHER column."""
    index = {t: i for i, t in enumerate(event_type_vocab)}
    row = np.zeros(len(event_type_vocab) + 1, dtype=np.int64)
    for e in session.events:
        row[index.get(e.event_type, len(event_type_vocab))] += 1
    return row


def count_matrix(sessions: Sequence[Session], event_type_vocab: Sequence[str]) -> np.ndarray:
    if not sessions:
        return np.zeros((0, len(event_type_vocab) + 1), dtype=np.int64)
    return np.stack([count_featurize(s, event_type_vocab) for s in sessions])


def write_count_csv(matrix: np.ndarray, event_type_vocab: Sequence[str], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(event_type_vocab) + [OTHER])
        w.writerows(matrix.tolist())


@dataclass
class GbdtParams:
    n_rounds: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    min_samples_leaf: int = 20
    l2: float = 1.0
    min_gain: float = 1e-9


@dataclass
class Tree:
    """Flat node arrays; ``feature == -1`` marks a leaf holding ``value``."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)

    def add_leaf(self, value: float) -> int:
        return self._add(-1, math.nan, -1, -1, value)

    def _add(self, f, t, lo, hi, v) -> int:
        self.feature.append(f)
        self.threshold.append(t)
        self.left.append(lo)
        self.right.append(hi)
        self.value.append(v)
        return len(self.feature) - 1

    @classmethod
    def stump(cls, feature: int, threshold: float, left_value: float, right_value: float) -> "Tree":
        t = cls()
        t._add(feature, threshold, 1, 2, 0.0)
        t.add_leaf(left_value)
        t.add_leaf(right_value)
        return t

    @property
    def n_splits(self) -> int:
        return sum(1 for f in self.feature if f >= 0)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Leaf value for every row of ``x`` (x <= threshold goes left)."""
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold)
        left, right = np.asarray(self.left), np.asarray(self.right)
        node = np.zeros(x.shape[0], dtype=np.int64)
        rows = np.arange(x.shape[0])
        active = feature[node] >= 0
        while active.any():
            n = node[active]
            go_left = x[rows[active], feature[n]] <= threshold[n]
            node[active] = np.where(go_left, left[n], right[n])
            active = feature[node] >= 0
        return np.asarray(self.value)[node]

    def scale(self, factor: float) -> None:
        self.value = [v * factor for v in self.value]

    def to_json(self, i: int = 0) -> dict:
        if self.feature[i] < 0:
            return {"leaf": self.value[i]}
        return {"feature": self.feature[i], "threshold": self.threshold[i],
                "left": self.to_json(self.left[i]), "right": self.to_json(self.right[i])}

    @classmethod
    def from_json(cls, node: dict) -> "Tree":
        t = cls()

        def build(nd) -> int:
            if "leaf" in nd:
                return t.add_leaf(float(nd["leaf"]))
            me = t._add(int(nd["feature"]), float(nd["threshold"]), -1, -1, 0.0)
            t.left[me] = build(nd["left"])
            t.right[me] = build(nd["right"])
            return me

        build(node)
        return t


@dataclass
class SplitCandidate:
    feature: int
    threshold: float
    gain: float


class _Binned:
    """Per-feature sorted distinct values and each sample's code into them."""

    def __init__(self, x: np.ndarray):
        self.values = []
        self.codes = np.empty(x.shape, dtype=np.int64)
        for f in range(x.shape[1]):
            vals, inv = np.unique(x[:, f], return_inverse=True)
            self.values.append(vals)
            self.codes[:, f] = inv


def best_split(binned: _Binned, idx: np.ndarray, g: np.ndarray, h: np.ndarray,
               params: GbdtParams) -> SplitCandidate | None:
    """Exact greedy search; ties go to the lowest feature index, then lowest threshold."""
    G, H = g[idx].sum(), h[idx].sum()
    parent = G * G / (H + params.l2)
    best: SplitCandidate | None = None
    for f, vals in enumerate(binned.values):
        if len(vals) < 2:
            continue
        codes = binned.codes[idx, f]
        nv = len(vals)
        cnt = np.bincount(codes, minlength=nv)
        present = np.flatnonzero(cnt)
        if len(present) < 2:
            continue
        gl = np.cumsum(np.bincount(codes, weights=g[idx], minlength=nv)[present])[:-1]
        hl = np.cumsum(np.bincount(codes, weights=h[idx], minlength=nv)[present])[:-1]
        nl = np.cumsum(cnt[present])[:-1]
        gr, hr, nr = G - gl, H - hl, len(idx) - nl
        gain = gl * gl / (hl + params.l2) + gr * gr / (hr + params.l2) - parent
        ok = (nl >= params.min_samples_leaf) & (nr >= params.min_samples_leaf)
        if not ok.any():
            continue
        gain = np.where(ok, gain, -np.inf)
        k = int(np.argmax(gain))
        if gain[k] > params.min_gain and (best is None or gain[k] > best.gain):
            lo, hi = vals[present[k]], vals[present[k + 1]]
            best = SplitCandidate(f, float((lo + hi) / 2.0), float(gain[k]))
    return best


def grow_tree(binned: _Binned, x: np.ndarray, g: np.ndarray, h: np.ndarray, params: GbdtParams) -> Tree:
    tree = Tree()

    def build(idx: np.ndarray, depth: int) -> int:
        split = None
        if depth < params.max_depth and len(idx) >= 2 * params.min_samples_leaf:
            split = best_split(binned, idx, g, h, params)
        if split is None:
            return tree.add_leaf(float(-g[idx].sum() / (h[idx].sum() + params.l2)))
        me = tree._add(split.feature, split.threshold, -1, -1, 0.0)
        mask = x[idx, split.feature] <= split.threshold
        tree.left[me] = build(idx[mask], depth + 1)
        tree.right[me] = build(idx[~mask], depth + 1)
        return me

    build(np.arange(x.shape[0]), 0)
    return tree


# ----------------------------------------------------------------- objectives
def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def objective_loss(objective: str, scores: np.ndarray, y: np.ndarray) -> float:
    """Mean logistic / softmax cross-entropy / squared loss of raw scores."""
    if objective == "binary":
        s = scores[:, 0]
        return float(np.mean(np.logaddexp(0.0, s) - y * s))
    if objective == "multiclass4":
        z = scores - scores.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        return float(np.mean(lse - z[np.arange(len(y)), y]))
    return float(np.mean((scores[:, 0] - y) ** 2))


def _grad_hess(objective: str, scores: np.ndarray, y: np.ndarray, n_classes: int):
    if objective == "binary":
        p = 1.0 / (1.0 + np.exp(-scores[:, 0]))
        return (p - y)[:, None], (p * (1.0 - p))[:, None]
    if objective == "multiclass4":
        p = _softmax(scores)
        onehot = np.eye(n_classes)[y]
        return p - onehot, p * (1.0 - p)
    return (scores[:, 0] - y)[:, None], np.ones((len(y), 1))


@dataclass
class GbdtModel:
    objective: str
    n_classes: int
    n_features: int
    initial: np.ndarray
    shrinkage: float
    trees: list[list[Tree]] = field(default_factory=list)   # rounds x outputs
    round_losses: list[float] = field(default_factory=list)

    @property
    def n_outputs(self) -> int:
        return self.n_classes if self.objective == "multiclass4" else 1

    def decision_scores(self, x: np.ndarray, n_rounds: int | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ValueError(f"expected rows of width {self.n_features}, got shape {x.shape}")
        scores = np.tile(self.initial, (x.shape[0], 1)).astype(np.float64)
        for round_trees in self.trees[:n_rounds]:
            for k, tree in enumerate(round_trees):
                scores[:, k] += self.shrinkage * tree.predict(x)
        return scores

    def predict(self, x: np.ndarray, n_rounds: int | None = None) -> np.ndarray:
        s = self.decision_scores(x, n_rounds)
        if self.objective == "binary":
            return (s[:, 0] > 0).astype(np.int64)
        if self.objective == "multiclass4":
            return s.argmax(axis=1)
        return s[:, 0]

    def loss(self, x: np.ndarray, y: np.ndarray, n_rounds: int | None = None) -> float:
        return objective_loss(self.objective, self.decision_scores(x, n_rounds), np.asarray(y))

    def to_json(self) -> dict:
        return {
            "objective": self.objective, "n_classes": self.n_classes, "n_features": self.n_features,
            "initial": self.initial.tolist(), "shrinkage": self.shrinkage,
            "round_losses": self.round_losses,
            "trees": [[t.to_json() for t in rnd] for rnd in self.trees],
        }

    @classmethod
    def from_json(cls, raw: dict) -> "GbdtModel":
        return cls(raw["objective"], int(raw["n_classes"]), int(raw["n_features"]),
                   np.asarray(raw["initial"], dtype=np.float64), float(raw["shrinkage"]),
                   [[Tree.from_json(t) for t in rnd] for rnd in raw["trees"]],
                   list(raw.get("round_losses", [])))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "GbdtModel":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


_PROB_CLIP = 1e-6


def _initial_scores(objective: str, y: np.ndarray, n_classes: int) -> np.ndarray:
    if objective == "binary":
        p = float(np.clip(y.mean(), _PROB_CLIP, 1 - _PROB_CLIP))
        return np.array([math.log(p / (1 - p))])
    if objective == "multiclass4":
        prior = np.clip(np.bincount(y, minlength=n_classes) / len(y), _PROB_CLIP, None)
        return np.log(prior / prior.sum())
    return np.array([float(y.mean())])


def fit_gbdt(rows: np.ndarray, labels: Sequence, objective: str, hp: GbdtParams | None = None,
             n_classes: int | None = None) -> GbdtModel:
    hp = hp or GbdtParams()
    x = np.asarray(rows, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("fit_gbdt needs a 2-D matrix with at least 2 samples")
    if objective == "regression":
        y = np.asarray(labels, dtype=np.float64)
        k = 1
    else:
        y = np.asarray(labels, dtype=np.int64)
        k = n_classes or (2 if objective == "binary" else 4)
        if y.min() < 0 or y.max() >= k:
            raise ValueError(f"labels must lie in [0, {k})")
    if len(y) != x.shape[0]:
        raise ValueError("rows and labels differ in length")

    model = GbdtModel(objective, k, x.shape[1], _initial_scores(objective, y, k), hp.learning_rate)
    scores = model.decision_scores(x)
    model.round_losses.append(objective_loss(objective, scores, y))
    if np.all(y == y[0]):
        return model

    binned = _Binned(x)
    for _ in range(hp.n_rounds):
        g, h = _grad_hess(objective, scores, y, k)
        trees = [grow_tree(binned, x, g[:, j], h[:, j], hp) for j in range(g.shape[1])]
        delta = np.stack([t.predict(x) for t in trees], axis=1) * hp.learning_rate
        current = model.round_losses[-1]
        factor = 1.0
        for _halving in range(30):
            trial = scores + factor * delta
            new_loss = objective_loss(objective, trial, y)
            if new_loss <= current:
                break
            factor *= 0.5
        else:
            factor, trial, new_loss = 0.0, scores, current
        if factor != 1.0:
            for t in trees:
                t.scale(factor)
        model.trees.append(trees)
        model.round_losses.append(new_loss)
        scores = trial
    return model


def predict_gbdt(model: GbdtModel, row) -> int | float:
    """Prediction for a single count row."""
    out = model.predict(np.asarray(row, dtype=np.float64)[None, :])
    return out[0].item()


# --------------------------------------------------------------------- tuning
DEFAULT_GRID = {"max_depth": (3, 6), "n_rounds": (100, 300), "learning_rate": (0.05, 0.1)}


@dataclass
class TunedGbdt:
    model: GbdtModel
    params: GbdtParams
    n_rounds: int
    val_loss: float
    train_loss: float
    results: list[dict]


def tune_gbdt(x_train, y_train, x_val, y_val, objective: str, grid: dict | None = None,
              min_samples_leaf: int = 20) -> TunedGbdt:
    """Pick (depth, rounds, learning rate) by validation loss.

    The largest round count is fitted once per (depth, rate); smaller round
    counts are read off as prefixes of the same boosting sequence.
    """
    grid = {**DEFAULT_GRID, **(grid or {})}
    rounds = sorted(grid["n_rounds"])
    best: TunedGbdt | None = None
    results = []
    for depth in grid["max_depth"]:
        for lr in grid["learning_rate"]:
            hp = GbdtParams(rounds[-1], depth, lr, min_samples_leaf)
            model = fit_gbdt(x_train, y_train, objective, hp)
            for r in rounds:
                vl = model.loss(x_val, y_val, r)
                results.append({"max_depth": depth, "learning_rate": lr, "n_rounds": r, "val_loss": vl})
                if best is None or vl < best.val_loss:
                    best = TunedGbdt(model, hp, r, vl, model.round_losses[min(r, len(model.trees))], results)
    best.results = results
    return best
