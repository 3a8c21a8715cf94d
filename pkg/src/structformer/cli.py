"""Command-line entry point: gen-data, train, eval, benchmark, export-curves."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import benchmark as bench
from .datagen import GeneratorConfig, summarize, write_corpus
from .gbdt import GbdtModel
from .schema import (
    ConfigError,
    DatasetSplit,
    EventLogError,
    FeatureSchema,
    SchemaError,
    Session,
    load_schema,
    load_session_counts,
    parse_event_log,
    split_by_user,
)
from .trainer import (
    LOG_COLUMNS,
    SchemaMismatch,
    TrainConfig,
    TrainingCollapse,
    evaluate,
    load_checkpoint,
    read_metrics_csv,
    save_checkpoint,
    train,
    write_metrics_csv,
)

logger = logging.getLogger("structformer")

EXIT_OK, EXIT_DATA, EXIT_USAGE, EXIT_COLLAPSE = 0, 1, 2, 3


class DataError(RuntimeError):
    pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_json(path: str | Path | None) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return raw


def write_manifest(out: Path, command: str, config: dict, seed, started: float,
                   inputs: Sequence[Path] = ()) -> Path:
    """Config copy, seed, input/output hashes and wall time; everything but wall time is reproducible."""
    artifacts = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            artifacts[p.relative_to(out).as_posix()] = _sha256(p)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(p): _sha256(p) for p in inputs if p.is_file()},
        "artifacts": artifacts,
        "wall_time_s": round(time.time() - started, 3),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_data_dir(data_dir: str | Path) -> tuple[FeatureSchema, list[Session], list[Path]]:
    """schema.json + events.jsonl, plus session_counts.json when present."""
    d = Path(data_dir)
    schema_path, events_path, counts_path = d / "schema.json", d / "events.jsonl", d / "session_counts.json"
    for p in (schema_path, events_path):
        if not p.is_file():
            raise DataError(f"{p}: missing from data directory")
    schema = load_schema(schema_path)
    counts = load_session_counts(counts_path) if counts_path.is_file() else None
    sessions = parse_event_log(events_path, schema, counts)
    used = [schema_path, events_path] + ([counts_path] if counts is not None else [])
    return schema, sessions, used


# --------------------------------------------------------------- subcommands
def cmd_gen_data(args, started: float) -> int:
    raw = _read_json(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = GeneratorConfig.from_dict(raw)
    out = Path(args.out)
    write_corpus(cfg, out)
    _, sessions, _ = load_data_dir(out)
    s = summarize(sessions)
    print(f"wrote {s.n_sessions} sessions to {out} (median count {s.median_count:g}, mean {s.mean_count:.1f})")
    write_manifest(out, "gen-data", cfg.to_dict(), cfg.seed, started)
    return EXIT_OK


def _split(sessions: list[Session], config: TrainConfig) -> DatasetSplit:
    return split_by_user(sessions, config.split_fraction, config.split_seed)


def _write_collapse(out: Path, snapshots: list[dict]) -> None:
    (out / "collapse.json").write_text(json.dumps(snapshots, indent=2, default=float) + "\n", encoding="utf-8")


def cmd_train(args, started: float) -> int:
    config = TrainConfig.from_dict(_read_json(args.config))
    if args.seed is not None:
        config = replace(config, seeds=(args.seed,))
    schema, sessions, inputs = load_data_dir(args.data)
    data = _split(sessions, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # a single run aborts on collapse; multi-seed runs record it and keep going
    try:
        ckpt, metrics = train(config, data, schema, tolerate_collapse=len(config.seeds) > 1)
    except TrainingCollapse as exc:
        _write_collapse(out, [exc.snapshot])
        write_manifest(out, "train", config.to_dict(), list(config.seeds), started, inputs)
        print(f"error: training collapsed: {exc}", file=sys.stderr)
        return EXIT_COLLAPSE
    collapsed = [r.diagnostic for r in metrics.runs if r.collapsed]
    if collapsed:
        _write_collapse(out, collapsed)
    if ckpt is None:
        write_manifest(out, "train", config.to_dict(), list(config.seeds), started, inputs)
        print("error: every seed collapsed", file=sys.stderr)
        return EXIT_COLLAPSE
    for run in metrics.runs:
        if not run.collapsed:
            write_metrics_csv(run.records, out / f"metrics_seed{run.seed}.csv")
    save_checkpoint(ckpt, out / "checkpoint")
    summary = {k: {"mean": m, "std": s} for k, (m, s) in metrics.summary().items()}
    summary["single_seed"] = metrics.single_seed
    summary["collapsed_seeds"] = [r.seed for r in metrics.runs if r.collapsed]
    summary["checkpoint_seed"] = ckpt.seed
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    write_manifest(out, "train", config.to_dict(), list(config.seeds), started, inputs)
    acc = metrics.summary()["accuracy"]
    print(f"{config.display_name}: accuracy {acc[0]:.4f} ± {acc[1]:.4f} over {len(metrics.runs)} seed(s)")
    return EXIT_OK


def cmd_eval(args, started: float) -> int:
    raw = _read_json(args.config)
    split = raw.get("split", args.split)
    if split not in ("train", "validation", "all"):
        raise ConfigError(f"split: expected train, validation or all, got {split!r}")
    ckpt_dir = Path(args.checkpoint)
    if not (ckpt_dir / "checkpoint.json").is_file():
        raise DataError(f"{ckpt_dir}: not a checkpoint directory")
    ckpt = load_checkpoint(ckpt_dir)
    schema, sessions, inputs = load_data_dir(args.data)
    if split != "all":
        data = _split(sessions, ckpt.config)
        sessions = data.train if split == "train" else data.validation
    report, m = evaluate(ckpt, sessions, schema=schema, batch_size=int(raw.get("batch_size", 512)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps({"split": split, "n": len(sessions), **m}, indent=2) + "\n",
                                      encoding="utf-8")
    write_manifest(out, "eval", {"split": split, "checkpoint": str(ckpt_dir)}, ckpt.seed, started,
                   inputs + [ckpt_dir / "model.bin"])
    print(f"{split}: accuracy {report.accuracy:.4f} loss {report.val_loss:.4f} (n={len(sessions)})")
    return EXIT_OK


def cmd_benchmark(args, started: float) -> int:
    raw = _read_json(args.config)
    if args.seed is not None:
        raw["seeds"] = [args.seed]
    matrix, objective = bench.parse_matrix(raw)
    schema, sessions, inputs = load_data_dir(args.data)
    first = next((e for e in matrix if isinstance(e, TrainConfig)), None)
    defaults = raw.get("defaults", {})
    fraction = first.split_fraction if first else float(defaults.get("split_fraction", 0.9))
    split_seed = first.split_seed if first else int(defaults.get("split_seed", 0))
    data = split_by_user(sessions, fraction, split_seed)
    rows = bench.benchmark(matrix, data, schema, objective, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bench.write_comparison_csv(rows, out / "comparison.csv")
    table = bench.format_table(rows)
    (out / "table.txt").write_text(table, encoding="utf-8")
    bench.write_run_logs(rows, out)
    for row in rows:
        tuned = row.runs[0].extra.get("gbdt") if row.runs else None
        if tuned is not None:
            tuned.model.save(out / "gbdt_model.json")
            (out / "gbdt_tuning.json").write_text(json.dumps(tuned.results, indent=2) + "\n", encoding="utf-8")
    write_manifest(out, "benchmark", raw, raw.get("seeds"), started, inputs)
    print(table, end="")
    return EXIT_OK


def cmd_export_curves(args, started: float) -> int:
    raw = _read_json(args.config)
    run_dirs = [Path(p) for p in (args.runs or raw.get("runs", []))]
    if not run_dirs:
        raise ConfigError("runs: no run directories given")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    inputs = []
    for d in run_dirs:
        logs = sorted(d.rglob("*.csv"))
        logs = [p for p in logs if p.name.startswith(("metrics_seed", "seed"))]
        if not logs:
            raise DataError(f"{d}: no metric logs found")
        for p in logs:
            inputs.append(p)
            model = p.parent.name if p.parent != d else d.name
            seed = p.stem.rsplit("seed", 1)[1]
            for rec in read_metrics_csv(p):
                rows.append([model, seed, *rec.row()])
    rows.sort(key=lambda r: (r[0], int(r[1]), r[2]))
    with open(out / "curves.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "seed", *LOG_COLUMNS])
        w.writerows(rows)
    write_manifest(out, "export-curves", {"runs": [str(d) for d in run_dirs]}, None, started, inputs)
    print(f"wrote {len(rows)} curve points to {out / 'curves.csv'}")
    return EXIT_OK


# -------------------------------------------------------------------- parser
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="structformer", description="Structured event tokenization and engagement models.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic event corpus")
    g.add_argument("--config", help="generator config JSON (defaults used when omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one config over its seeds")
    t.add_argument("--config", required=True, help="TrainConfig JSON")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, help="run this single seed instead of the config's list")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a saved checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config", help="optional JSON with 'split' and 'batch_size'")
    e.add_argument("--split", default="validation", choices=("train", "validation", "all"))
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("benchmark", help="multi-config, multi-seed comparison")
    b.add_argument("--config", required=True, help="benchmark matrix JSON")
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--seed", type=int, help="run every config on this single seed")
    b.set_defaults(func=cmd_benchmark)

    c = sub.add_parser("export-curves", help="merge metric logs into one long-format CSV")
    c.add_argument("--runs", nargs="*", help="train or benchmark output directories")
    c.add_argument("--config", help="optional JSON with a 'runs' list")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_export_curves)
    return p


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    started = time.time()
    try:
        return args.func(args, started)
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
    except (DataError, SchemaError, SchemaMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
    except EventLogError as exc:
        print(f"error: event log: {exc}", file=sys.stderr)
    return EXIT_DATA


def main() -> None:
    sys.exit(run())
