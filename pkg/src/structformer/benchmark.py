"""Multi-config, multi-seed comparison table (mean ± std per metric)."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from . import gbdt
from .objectives import LabelSpec, MetricReport, assign_labels, classification_metrics, fit_label_spec
from .schema import ConfigError, DatasetSplit, FeatureSchema
from .trainer import (
    SUMMARY_METRICS,
    RunMetrics,
    RunResult,
    TrainConfig,
    TrainingCollapse,
    collapsed_result,
    train_run,
    write_metrics_csv,
)

logger = logging.getLogger(__name__)

TABLE_HEADERS = ("Accuracy", "F1", "Precision", "Recall", "Train loss", "Val loss")


@dataclass(frozen=True)
class GbdtEntry:
    name: str = "GBDT"
    grid: Mapping = field(default_factory=dict)
    min_samples_leaf: int = 20


@dataclass
class BenchmarkRow:
    name: str
    summary: dict[str, tuple[float, float]]
    n_runs: int
    collapsed: int
    runs: list[RunResult]
    note: str = ""


def parse_matrix(raw: Mapping) -> tuple[list[TrainConfig | GbdtEntry], str]:
    """Benchmark matrix JSON: shared ``defaults``/``objective``/``seeds`` plus a ``runs`` list."""
    if not isinstance(raw, Mapping) or "runs" not in raw:
        raise ConfigError("runs: benchmark config needs a 'runs' list")
    objective = raw.get("objective", "binary")
    defaults = dict(raw.get("defaults", {}))
    if "seeds" in raw:
        defaults["seeds"] = raw["seeds"]
    defaults["objective"] = objective
    entries: list[TrainConfig | GbdtEntry] = []
    for i, run in enumerate(raw["runs"]):
        run = dict(run)
        if run.pop("kind", None) == "gbdt":
            unknown = sorted(set(run) - {"name", "grid", "min_samples_leaf"})
            if unknown:
                raise ConfigError(f"runs[{i}].{unknown[0]}: unknown GBDT option")
            entries.append(GbdtEntry(**run))
            continue
        try:
            entries.append(TrainConfig.from_dict({**defaults, **run}))
        except ConfigError as exc:
            raise ConfigError(f"runs[{i}].{exc}") from None
    return entries, objective


def _run_one(args):
    config, data, schema, seed, spec = args
    try:
        return train_run(config, data, schema, seed, spec)
    except TrainingCollapse as exc:
        logger.warning("%s seed %d collapsed: %s", config.display_name, seed, exc)
        return collapsed_result(config, data, seed, exc)


def run_gbdt(entry: GbdtEntry, data: DatasetSplit, schema: FeatureSchema, spec: LabelSpec) -> RunResult:
    vocab = schema.event_types
    x_tr, x_va = gbdt.count_matrix(data.train, vocab), gbdt.count_matrix(data.validation, vocab)
    y_tr = assign_labels([s.user_session_count for s in data.train], spec)
    y_va = assign_labels([s.user_session_count for s in data.validation], spec)
    tuned = gbdt.tune_gbdt(x_tr, y_tr, x_va, y_va, spec.objective, dict(entry.grid), entry.min_samples_leaf)
    if spec.is_classification:
        m = classification_metrics(tuned.model.predict(x_va, tuned.n_rounds), y_va, spec.n_outputs)
    else:
        m = {k: math.nan for k in ("accuracy", "f1", "precision", "recall")}
    final = MetricReport(m["accuracy"], m["f1"], m["precision"], m["recall"], tuned.train_loss, tuned.val_loss)
    return RunResult(0, [], final, None, extra={"gbdt": tuned})


def benchmark(matrix: Sequence[TrainConfig | GbdtEntry], data: DatasetSplit, schema: FeatureSchema,
              objective: str, jobs: int = 1) -> list[BenchmarkRow]:
    """Train every entry on every seed against one shared label spec."""
    spec = fit_label_spec(objective, [s.user_session_count for s in data.train])
    tasks, owners = [], []
    for i, entry in enumerate(matrix):
        if isinstance(entry, TrainConfig):
            if entry.objective != objective:
                raise ConfigError(f"runs[{i}].objective: all runs must share objective {objective!r}")
            for seed in entry.seeds:
                tasks.append((entry, data, schema, seed, spec))
                owners.append(i)
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, tasks))
    else:
        results = [_run_one(t) for t in tasks]

    rows = []
    for i, entry in enumerate(matrix):
        if isinstance(entry, GbdtEntry):
            res = run_gbdt(entry, data, schema, spec)
            rows.append(BenchmarkRow(entry.name, RunMetrics([res]).summary(), 1, 0, [res],
                                     note="deterministic; single run, std reported as 0"))
            continue
        runs = [r for r, owner in zip(results, owners) if owner == i]
        metrics = RunMetrics(runs)
        note = "single seed; std reported as 0" if metrics.single_seed else ""
        rows.append(BenchmarkRow(entry.display_name, metrics.summary(), len(runs),
                                 sum(r.collapsed for r in runs), runs, note))
    return rows


def _fmt(mean: float, std: float) -> str:
    if math.isnan(mean):
        return "n/a"
    return f"{mean:.3f} ± {std:.3f}"


def write_comparison_csv(rows: Sequence[BenchmarkRow], path: str | Path) -> None:
    header = ["model"]
    for m in SUMMARY_METRICS:
        header += [f"{m}_mean", f"{m}_std"]
    header += ["n_runs", "collapsed", "note"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            line = [row.name]
            for m in SUMMARY_METRICS:
                mean, std = row.summary[m]
                line += [repr(mean), repr(std)]
            w.writerow(line + [row.n_runs, row.collapsed, row.note])


def format_table(rows: Sequence[BenchmarkRow]) -> str:
    cells = [["Model", *TABLE_HEADERS]]
    for row in rows:
        cells.append([row.name + (" (collapsed runs)" if row.collapsed else "")]
                     + [_fmt(*row.summary[m]) for m in SUMMARY_METRICS])
    widths = [max(len(r[i]) for r in cells) for i in range(len(cells[0]))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_run_logs(rows: Sequence[BenchmarkRow], out_dir: str | Path) -> None:
    base = Path(out_dir) / "logs"
    for row in rows:
        slug = row.name.lower().replace(" ", "-")
        for run in row.runs:
            if run.records:
                (base / slug).mkdir(parents=True, exist_ok=True)
                write_metrics_csv(run.records, base / slug / f"seed{run.seed}.csv")
