"""Training protocol: AdamW, reduce-on-plateau, multi-seed runs, logs, checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .backbones import PRESETS, BackboneConfig, BehaviorModel
from .objectives import (
    LabelSpec,
    MetricReport,
    assign_labels,
    classification_metrics,
    fit_label_spec,
    regression_metrics,
)
from .schema import ConfigError, DatasetSplit, FeatureSchema, Session
from .tokenizer import EncodedEvents, NumericStats, collate, encode_session_arrays, normalize_numericals

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "train_loss", "val_loss", "accuracy", "f1", "precision", "recall", "lr")


class TrainingCollapse(RuntimeError):
    """Loss or gradients became non-finite; ``snapshot`` holds step, lr and grad norms."""

    def __init__(self, snapshot: dict):
        super().__init__(f"non-finite training state at step {snapshot['step']} (lr={snapshot['lr']:g})")
        self.snapshot = snapshot


class SchemaMismatch(ValueError):
    """Checkpoint was trained on a different feature schema."""


# ---------------------------------------------------------------- configuration
@dataclass(frozen=True)
class TrainConfig:
    backbone: BackboneConfig
    objective: str = "binary"
    batch_size: int = 128
    lr_init: float = 1e-4
    lr_factor: float = 0.1
    lr_min: float = 1e-6
    plateau_patience: int = 3
    plateau_min_delta: float = 1e-5
    weight_decay: float = 0.0
    max_steps: int = 2000
    eval_interval: int = 100
    seeds: tuple[int, ...] = (0, 1, 2)
    max_len: int = 256
    split_fraction: float = 0.9
    split_seed: int = 0
    eval_batch_size: int = 512
    length_bucketing: bool = True
    log_target: bool = True
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        checks = [
            ("objective", self.objective in ("binary", "multiclass4", "regression"),
             "must be binary, multiclass4 or regression"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("lr_init", self.lr_init > 0, "must be > 0"),
            ("lr_min", 0 < self.lr_min <= self.lr_init, "must satisfy 0 < lr_min <= lr_init"),
            ("lr_factor", 0 < self.lr_factor < 1, "must lie in (0, 1)"),
            ("plateau_patience", self.plateau_patience >= 1, "must be >= 1"),
            ("max_steps", self.max_steps >= 1, "must be >= 1"),
            ("eval_interval", self.eval_interval >= 1, "must be >= 1"),
            ("seeds", len(self.seeds) >= 1, "needs at least one seed"),
            ("max_len", self.max_len >= 2, "must be >= 2 (CLS plus one event)"),
            ("split_fraction", 0 < self.split_fraction < 1, "must lie in (0, 1)"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{name}: {msg}")

    @property
    def display_name(self) -> str:
        return self.name or self.backbone.name or self.backbone.kind

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, raw: Mapping) -> "TrainConfig":
        if not isinstance(raw, Mapping):
            raise ConfigError("config: expected a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown option")
        if "backbone" not in raw:
            raise ConfigError("backbone: required (preset name or object)")
        data = dict(raw)
        bb = data["backbone"]
        try:
            if isinstance(bb, str):
                if bb not in PRESETS:
                    raise ConfigError(f"backbone: unknown preset {bb!r}; choose from {sorted(PRESETS)}")
                data["backbone"] = PRESETS[bb]
            elif isinstance(bb, Mapping):
                data["backbone"] = BackboneConfig.from_dict(bb)
            else:
                raise ConfigError("backbone: expected a preset name or an object")
        except (TypeError, ValueError, KeyError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"backbone: {exc}") from None
        for f in fields(cls):
            if f.name in data and f.name != "backbone":
                value = data[f.name]
                if f.type in ("int",) and (isinstance(value, bool) or not isinstance(value, int)):
                    raise ConfigError(f"{f.name}: expected an integer, got {value!r}")
                if f.type in ("float",) and (isinstance(value, bool) or not isinstance(value, (int, float))):
                    raise ConfigError(f"{f.name}: expected a number, got {value!r}")
        return cls(**data)


# ------------------------------------------------------------------- scheduler
def _tidy(x: float) -> float:
    # drop binary noise from repeated decimal scaling so that 1e-4 * 0.1 == 1e-5
    return float(f"{x:.12g}")


@dataclass
class PlateauScheduler:
    lr: float
    factor: float = 0.1
    patience: int = 3
    min_lr: float = 1e-6
    min_delta: float = 1e-5
    best: float = math.inf
    bad_evals: int = 0

    def step(self, val_loss: float) -> float:
        """Register one evaluation; reduce lr after ``patience`` non-improving ones."""
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.bad_evals = 0
        else:
            self.bad_evals += 1
            if self.bad_evals >= self.patience:
                self.lr = max(_tidy(self.lr * self.factor), self.min_lr)
                self.bad_evals = 0
        return self.lr


def plateau_step(state: PlateauScheduler, new_val_loss: float) -> float:
    return state.step(new_val_loss)


# ---------------------------------------------------------------- data staging
@dataclass
class Prepared:
    encoded: list[EncodedEvents]
    targets: np.ndarray
    counts: np.ndarray

    def __len__(self) -> int:
        return len(self.encoded)


def prepare(sessions: Sequence[Session], schema: FeatureSchema, stats: Mapping[str, NumericStats],
            spec: LabelSpec, max_len: int) -> Prepared:
    counts = np.array([s.user_session_count for s in sessions], dtype=np.int64)
    enc = [encode_session_arrays(s, schema, stats, max_len) for s in sessions]
    return Prepared(enc, assign_labels(counts, spec), counts)


def _batches(order: np.ndarray, lengths: np.ndarray, batch_size: int, bucket: bool,
             rng: np.random.Generator | None) -> list[np.ndarray]:
    if not bucket:
        return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    # sort within windows of 16 batches by length, then shuffle batch order
    window = batch_size * 16
    batches = []
    for start in range(0, len(order), window):
        chunk = order[start:start + window]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches.extend(chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def _loss(outputs: T.Tensor, targets: np.ndarray, spec: LabelSpec) -> T.Tensor:
    if spec.is_classification:
        return T.cross_entropy(outputs, targets)
    return T.mse(T.reshape(outputs, (outputs.shape[0],)), targets)


def predict_outputs(model: BehaviorModel, data: Prepared, batch_size: int = 512) -> np.ndarray:
    """Raw model outputs for every sample, in input order; never records a graph."""
    lengths = np.array([len(e) for e in data.encoded])
    order = np.argsort(lengths, kind="stable")
    out = np.zeros((len(data), model.n_outputs), dtype=np.float64)
    k_cat, k_num = model.schema.k_cat, model.schema.k_num
    with T.no_grad():
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            batch = collate([data.encoded[j] for j in idx], k_cat, k_num)
            out[idx] = model(batch).data
    return out


def score(outputs: np.ndarray, data: Prepared, spec: LabelSpec) -> dict[str, float]:
    """Loss and metrics of precomputed outputs against ``data``'s targets."""
    if spec.is_classification:
        z = outputs
        m = z.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
        loss = float(np.mean(lse - z[np.arange(len(z)), data.targets]))
        metrics = classification_metrics(z.argmax(axis=1), data.targets, spec.n_outputs)
        metrics["loss"] = loss
        return metrics
    pred = outputs[:, 0]
    loss = float(np.mean((pred - data.targets) ** 2))
    log_pred = pred if spec.log_target else np.log1p(np.maximum(pred, 0.0))
    metrics = regression_metrics(log_pred, data.counts)
    metrics.update(loss=loss, accuracy=math.nan, f1=math.nan, precision=math.nan, recall=math.nan)
    return metrics


# ----------------------------------------------------------------- checkpoints
@dataclass
class Checkpoint:
    state: dict[str, np.ndarray]
    config: TrainConfig
    label_spec: LabelSpec
    schema: FeatureSchema
    stats: dict[str, NumericStats]
    seed: int
    step: int

    def build_model(self) -> BehaviorModel:
        model = BehaviorModel(self.schema, self.config.backbone, self.label_spec.n_outputs,
                              self.config.max_len, self.seed)
        model.load_state_dict(self.state)
        return model

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.state):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.state[name]).tobytes())
        return h.hexdigest()


def save_checkpoint(ckpt: Checkpoint, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    T.save_tensors(ckpt.state, out / "model.bin")
    meta = {
        "config": ckpt.config.to_dict(),
        "label_spec": ckpt.label_spec.to_dict(),
        "schema": ckpt.schema.to_dict(),
        "schema_hash": ckpt.schema.hash(),
        "numeric_stats": {k: [v.mean, v.std] for k, v in ckpt.stats.items()},
        "seed": ckpt.seed,
        "step": ckpt.step,
    }
    (out / "checkpoint.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    ckpt.label_spec.save(out / "label_spec.json")
    return out


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    meta = json.loads((path / "checkpoint.json").read_text(encoding="utf-8"))
    schema = FeatureSchema.from_dict(meta["schema"])
    if schema.hash() != meta["schema_hash"]:
        raise SchemaMismatch(f"{path}: stored schema does not match its recorded hash")
    return Checkpoint(
        state=T.load_tensors(path / "model.bin"),
        config=TrainConfig.from_dict(meta["config"]),
        label_spec=LabelSpec.from_dict(meta["label_spec"]),
        schema=schema,
        stats={k: NumericStats(float(m), float(s)) for k, (m, s) in meta["numeric_stats"].items()},
        seed=int(meta["seed"]),
        step=int(meta["step"]),
    )


# --------------------------------------------------------------------- records
@dataclass
class EvalRecord:
    step: int
    train_loss: float
    val_loss: float
    accuracy: float
    f1: float
    precision: float
    recall: float
    lr: float

    def row(self) -> list:
        return [getattr(self, c) for c in LOG_COLUMNS]


@dataclass
class RunResult:
    seed: int
    records: list[EvalRecord]
    final: MetricReport
    checkpoint: Checkpoint | None
    collapsed: bool = False
    diagnostic: dict | None = None
    extra: dict = field(default_factory=dict)


SUMMARY_METRICS = ("accuracy", "f1", "precision", "recall", "train_loss", "val_loss")


@dataclass
class RunMetrics:
    runs: list[RunResult]

    def summary(self) -> dict[str, tuple[float, float]]:
        """mean and sample std across seeds per metric (std 0 for a single seed)."""
        out = {}
        for name in SUMMARY_METRICS:
            vals = np.array([getattr(r.final, name) for r in self.runs], dtype=np.float64)
            std = float(vals.std(ddof=1)) if len(vals) >= 2 else 0.0
            out[name] = (float(vals.mean()), std)
        return out

    @property
    def single_seed(self) -> bool:
        return len(self.runs) < 2


def write_metrics_csv(records: Sequence[EvalRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in records:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r.row()])


def read_metrics_csv(path: str | Path) -> list[EvalRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [EvalRecord(int(r["step"]), *(float(r[c]) for c in LOG_COLUMNS[1:])) for r in rows]


# -------------------------------------------------------------------- training
def _grads_finite(params: Mapping[str, T.Tensor]) -> bool:
    return all(p.grad is not None and np.all(np.isfinite(p.grad)) for p in params.values())


def train_run(config: TrainConfig, data: DatasetSplit, schema: FeatureSchema, seed: int,
              label_spec: LabelSpec | None = None) -> RunResult:
    """One seeded training run; raises TrainingCollapse on a non-finite step."""
    if not data.train or not data.validation:
        raise ValueError("train and validation splits must be non-empty")
    spec = label_spec or fit_label_spec(config.objective, [s.user_session_count for s in data.train],
                                        config.log_target)
    stats = normalize_numericals(data.train, schema)
    train = prepare(data.train, schema, stats, spec, config.max_len)
    val = prepare(data.validation, schema, stats, spec, config.max_len)
    lengths = np.array([len(e) for e in train.encoded])

    model = BehaviorModel(schema, config.backbone, spec.n_outputs, config.max_len, seed)
    params = model.parameters()
    opt = T.AdamW(params, lr=config.lr_init, weight_decay=config.weight_decay)
    sched = PlateauScheduler(config.lr_init, config.lr_factor, config.plateau_patience,
                             config.lr_min, config.plateau_min_delta)
    drop_rng = np.random.default_rng([seed, 99]) if config.backbone.dropout > 0 else None

    records: list[EvalRecord] = []
    best: tuple[float, dict, EvalRecord] | None = None
    running, n_running = 0.0, 0
    step, epoch = 0, 0
    while step < config.max_steps:
        ep_rng = np.random.default_rng([seed, epoch, 7])
        order = ep_rng.permutation(len(train))
        for idx in _batches(order, lengths, config.batch_size, config.length_bucketing, ep_rng):
            batch = collate([train.encoded[j] for j in idx], schema.k_cat, schema.k_num)
            opt.zero_grad()
            loss = _loss(model(batch, drop_rng), train.targets[idx], spec)
            value = loss.item()
            if math.isfinite(value):
                loss.backward()
            if not math.isfinite(value) or not _grads_finite(params):
                raise TrainingCollapse({
                    "step": step + 1, "lr": opt.lr, "loss": value, "seed": seed,
                    "grad_norms": T.global_grad_norms(params) if math.isfinite(value) else {},
                })
            opt.lr = sched.lr
            opt.step()
            step += 1
            running += value
            n_running += 1
            if step % config.eval_interval == 0 or step == config.max_steps:
                m = score(predict_outputs(model, val, config.eval_batch_size), val, spec)
                rec = EvalRecord(step, running / n_running, m["loss"], m["accuracy"], m["f1"],
                                 m["precision"], m["recall"], sched.lr)
                records.append(rec)
                running, n_running = 0.0, 0
                if not math.isfinite(m["loss"]):
                    raise TrainingCollapse({"step": step, "lr": sched.lr, "loss": m["loss"], "seed": seed,
                                            "grad_norms": T.global_grad_norms(params)})
                if best is None or m["loss"] < best[0]:
                    best = (m["loss"], model.state_dict(), rec)
                sched.step(m["loss"])
                logger.info("seed %d step %d train %.4f val %.4f acc %.4f lr %g", seed, step,
                            rec.train_loss, rec.val_loss, rec.accuracy, rec.lr)
            if step >= config.max_steps:
                break
        epoch += 1

    _, state, rec = best
    ckpt = Checkpoint(state, config, spec, schema, stats, seed, rec.step)
    final = MetricReport(rec.accuracy, rec.f1, rec.precision, rec.recall, rec.train_loss, rec.val_loss, seed)
    return RunResult(seed, records, final, ckpt)


def collapsed_result(config: TrainConfig, data: DatasetSplit, seed: int, exc: TrainingCollapse) -> RunResult:
    """Chance-level stand-in for an aborted run: constant majority-class prediction."""
    spec = fit_label_spec(config.objective, [s.user_session_count for s in data.train], config.log_target)
    y_train = assign_labels([s.user_session_count for s in data.train], spec)
    y_val = assign_labels([s.user_session_count for s in data.validation], spec)
    if spec.is_classification:
        majority = int(np.bincount(y_train, minlength=spec.n_outputs).argmax())
        m = classification_metrics(np.full(len(y_val), majority), y_val, spec.n_outputs)
        chance = math.log(spec.n_outputs)
        final = MetricReport(m["accuracy"], m["f1"], m["precision"], m["recall"], chance, chance, seed)
    else:
        nan = math.nan
        final = MetricReport(nan, nan, nan, nan, nan, nan, seed)
    return RunResult(seed, [], final, None, collapsed=True, diagnostic=exc.snapshot)


def train(config: TrainConfig, data: DatasetSplit, schema: FeatureSchema,
          label_spec: LabelSpec | None = None, tolerate_collapse: bool = False) -> tuple[Checkpoint | None, RunMetrics]:
    """Run every seed in ``config.seeds``; return the best-val-loss checkpoint and all logs."""
    runs = []
    for seed in config.seeds:
        try:
            runs.append(train_run(config, data, schema, seed, label_spec))
        except TrainingCollapse as exc:
            if not tolerate_collapse:
                raise
            logger.warning("run collapsed: %s", exc)
            runs.append(collapsed_result(config, data, seed, exc))
    alive = [r for r in runs if r.checkpoint is not None]
    best = min(alive, key=lambda r: r.final.val_loss).checkpoint if alive else None
    return best, RunMetrics(runs)


def evaluate(checkpoint: Checkpoint, sessions: Sequence[Session], spec: LabelSpec | None = None,
             schema: FeatureSchema | None = None, batch_size: int = 512) -> tuple[MetricReport, dict]:
    """Metrics of a checkpoint on ``sessions``; parameters are left untouched."""
    if schema is not None and schema.hash() != checkpoint.schema.hash():
        raise SchemaMismatch(
            f"checkpoint schema {checkpoint.schema.hash()} differs from data schema {schema.hash()}; "
            "the feature layout (and so the embedding tables) would not line up")
    spec = spec or checkpoint.label_spec
    model = checkpoint.build_model()
    data = prepare(sessions, checkpoint.schema, checkpoint.stats, spec, checkpoint.config.max_len)
    m = score(predict_outputs(model, data, batch_size), data, spec)
    report = MetricReport(m["accuracy"], m["f1"], m["precision"], m["recall"], math.nan, m["loss"],
                          checkpoint.seed)
    return report, m


def with_overrides(config: TrainConfig, **changes) -> TrainConfig:
    return replace(config, **changes)
