from __future__ import annotations

import math

import numpy as np
import pytest

from structformer import tensor as T
from structformer import trainer as trainer_mod
from structformer.backbones import BackboneConfig, BehaviorModel
from structformer.benchmark import GbdtEntry, benchmark, format_table, parse_matrix, write_comparison_csv
from structformer.objectives import fit_label_spec
from structformer.schema import ConfigError, split_by_user
from structformer.tokenizer import collate, normalize_numericals
from structformer.trainer import (
    PlateauScheduler,
    TrainConfig,
    TrainingCollapse,
    evaluate,
    load_checkpoint,
    prepare,
    read_metrics_csv,
    save_checkpoint,
    train,
    train_run,
    write_metrics_csv,
)

from oracles import small_corpus

TINY = BackboneConfig("transformer", 16, 1, 2, name="tiny16")


def _config(**kw):
    base = dict(backbone=TINY, batch_size=16, max_steps=12, eval_interval=4, seeds=(0,), max_len=24)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def corpus():
    schema, sessions = small_corpus(160, seed=3, embedding_dim=4)
    return schema, split_by_user(sessions, 0.8, seed=0)


# ------------------------------------------------------------------ scheduler
def test_scheduler_improving_losses_keep_lr():
    s = PlateauScheduler(1e-4, patience=2)
    assert [s.step(v) for v in (1.0, 0.9, 0.8)] == [1e-4] * 3


def test_scheduler_flat_losses_reduce_once_patience_runs_out():
    s = PlateauScheduler(1e-4, patience=2)
    assert [s.step(1.0) for _ in range(3)] == [1e-4, 1e-4, 1e-5]


def test_scheduler_repeated_plateaus_clamp_at_floor():
    s = PlateauScheduler(1e-4, factor=0.1, patience=3, min_lr=1e-6)
    s.step(1.0)
    trace = []
    for _ in range(4):
        for _ in range(3):
            lr = s.step(1.0)
        trace.append(lr)
    assert trace == [1e-5, 1e-6, 1e-6, 1e-6]


def test_scheduler_improvement_below_min_delta_counts_as_stall():
    s = PlateauScheduler(1e-4, patience=1, min_delta=1e-3)
    s.step(1.0)
    assert s.step(0.9995) == 1e-5


def test_forced_plateau_trace_in_training(corpus):
    schema, data = corpus
    # a min_delta no loss can beat turns every evaluation after the first into a stall
    cfg = _config(max_steps=6, eval_interval=1, plateau_patience=1, plateau_min_delta=1e3)
    run = train_run(cfg, data, schema, 0)
    assert [r.lr for r in run.records] == [1e-4, 1e-4, 1e-5, 1e-6, 1e-6, 1e-6]


def test_lr_trace_stays_in_bounds(corpus):
    schema, data = corpus
    cfg = _config(max_steps=20, eval_interval=2, plateau_patience=1)
    lrs = [r.lr for r in train_run(cfg, data, schema, 0).records]
    assert all(cfg.lr_min <= lr <= cfg.lr_init for lr in lrs)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


# -------------------------------------------------------------- configuration
@pytest.mark.parametrize("raw, field", [
    ({"backbone": "structformer-tiny", "lr_min": 1.0}, "lr_min"),
    ({"backbone": "structformer-tiny", "batch_size": 0}, "batch_size"),
    ({"backbone": "structformer-tiny", "objective": "ordinal"}, "objective"),
    ({"backbone": "structformer-tiny", "max_steps": 1.5}, "max_steps"),
    ({"backbone": "nope"}, "backbone"),
    ({"backbone": "structformer-tiny", "colour": 1}, "colour"),
    ({"lr_init": 1e-3}, "backbone"),
    ({"backbone": {"kind": "transformer", "hidden_dim": 10, "heads": 3}}, "backbone"),
])
def test_config_errors_name_the_field(raw, field):
    with pytest.raises(ConfigError, match=field):
        TrainConfig.from_dict(raw)


def test_config_round_trip():
    cfg = _config(seeds=(4, 5), name="x")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert TrainConfig.from_dict({"backbone": "mlp-small"}).backbone.mlp_neurons == (256, 128, 64)


# ------------------------------------------------------------------ training
def test_metric_csv_bit_identical_across_runs(corpus, tmp_path):
    schema, data = corpus
    cfg = _config()
    for name in ("a.csv", "b.csv"):
        write_metrics_csv(train_run(cfg, data, schema, 7).records, tmp_path / name)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    back = read_metrics_csv(tmp_path / "a.csv")
    assert [r.step for r in back] == [4, 8, 12]


def test_different_seeds_differ(corpus):
    schema, data = corpus
    cfg = _config()
    a = train_run(cfg, data, schema, 0).records
    b = train_run(cfg, data, schema, 1).records
    assert [r.train_loss for r in a] != [r.train_loss for r in b]


def test_checkpoint_round_trip_evaluates_identically(corpus, tmp_path):
    schema, data = corpus
    ckpt, _ = train(_config(), data, schema)
    save_checkpoint(ckpt, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert back.checksum() == ckpt.checksum()
    r1, m1 = evaluate(ckpt, data.validation)
    r2, m2 = evaluate(back, data.validation)
    assert m1 == m2 and r1.accuracy == r2.accuracy


def test_evaluation_leaves_parameters_untouched(corpus):
    schema, data = corpus
    ckpt, _ = train(_config(), data, schema)
    before = ckpt.checksum()
    evaluate(ckpt, data.validation)
    evaluate(ckpt, data.train)
    assert ckpt.checksum() == before


def test_evaluate_rejects_other_schema(corpus):
    schema, data = corpus
    ckpt, _ = train(_config(), data, schema)
    other, _ = small_corpus(20, seed=1, embedding_dim=8)
    with pytest.raises(trainer_mod.SchemaMismatch):
        evaluate(ckpt, data.validation, schema=other)


def test_gradients_are_zeroed_between_steps(corpus):
    schema, data = corpus
    spec = fit_label_spec("binary", [s.user_session_count for s in data.train])
    prep = prepare(data.train[:8], schema, normalize_numericals(data.train, schema), spec, 24)
    batch = collate(prep.encoded, schema.k_cat, schema.k_num)
    model = BehaviorModel(schema, TINY, 2, 24, seed=0)
    params = model.parameters()
    opt = T.AdamW(params, lr=0.0)

    def step():
        opt.zero_grad()
        T.cross_entropy(model(batch), prep.targets).backward()
        grads = {k: p.grad.copy() for k, p in params.items()}
        opt.step()
        return grads

    snapshot = model.state_dict()
    g1, g2 = step(), step()
    for k in g1:
        np.testing.assert_array_equal(g1[k], g2[k])
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, snapshot[k])


def test_untrained_binary_model_is_at_chance(corpus):
    schema, data = corpus
    spec = fit_label_spec("binary", [s.user_session_count for s in data.train])
    prep = prepare(data.validation + data.train, schema, normalize_numericals(data.train, schema), spec, 24)
    model = BehaviorModel(schema, TINY, 2, 24, seed=0)
    m = trainer_mod.score(trainer_mod.predict_outputs(model, prep), prep, spec)
    assert abs(m["loss"] - math.log(2)) < 0.05


def _nan_loss_after(n):
    calls = {"n": 0}
    real = trainer_mod._loss

    def fake(outputs, targets, spec):
        calls["n"] += 1
        loss = real(outputs, targets, spec)
        return T.mul(loss, math.nan) if calls["n"] > n else loss

    return fake


def test_collapse_raises_with_snapshot(corpus, monkeypatch):
    schema, data = corpus
    monkeypatch.setattr(trainer_mod, "_loss", _nan_loss_after(2))
    with pytest.raises(TrainingCollapse) as info:
        train_run(_config(), data, schema, 0)
    snap = info.value.snapshot
    assert snap["step"] == 3 and snap["lr"] == 1e-4 and math.isnan(snap["loss"])


def test_collapse_tolerated_reports_chance(corpus, monkeypatch):
    schema, data = corpus
    monkeypatch.setattr(trainer_mod, "_loss", _nan_loss_after(0))
    ckpt, metrics = train(_config(seeds=(0, 1)), data, schema, tolerate_collapse=True)
    assert ckpt is None
    assert all(r.collapsed for r in metrics.runs)
    assert metrics.summary()["train_loss"] == (pytest.approx(math.log(2)), 0.0)


def test_regression_objective_trains(corpus):
    schema, data = corpus
    run = train_run(_config(objective="regression"), data, schema, 0)
    assert math.isnan(run.final.accuracy) and math.isfinite(run.final.val_loss)


# ------------------------------------------------------------------ benchmark
def test_benchmark_two_configs_three_seeds(corpus, tmp_path):
    schema, data = corpus
    matrix, objective = parse_matrix({
        "seeds": [0, 1, 2],
        "defaults": {"batch_size": 16, "max_steps": 4, "eval_interval": 2, "max_len": 24},
        "runs": [
            {"backbone": TINY.to_dict(), "name": "A"},
            {"backbone": {"kind": "mlp", "hidden_dim": 16, "mlp_neurons": [16]}, "name": "B"},
            {"kind": "gbdt", "grid": {"max_depth": [2], "n_rounds": [5], "learning_rate": [0.1]}},
        ],
    })
    rows = benchmark(matrix, data, schema, objective)
    assert [r.name for r in rows] == ["A", "B", "GBDT"]
    assert [r.n_runs for r in rows] == [3, 3, 1]
    accs = [r.final.accuracy for r in rows[0].runs]
    assert rows[0].summary["accuracy"] == (pytest.approx(np.mean(accs)), pytest.approx(np.std(accs, ddof=1)))
    assert rows[2].summary["accuracy"][1] == 0.0
    table = format_table(rows).splitlines()
    assert [c.strip() for c in table[0].split(" | ")] == ["Model", "Accuracy", "F1", "Precision", "Recall",
                                                        "Train loss", "Val loss"]
    assert "±" in table[2]
    write_comparison_csv(rows, tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0].startswith("model,accuracy_mean,accuracy_std")


def test_benchmark_matrix_errors():
    with pytest.raises(ConfigError, match=r"runs\[0\]\.lr_min"):
        parse_matrix({"runs": [{"backbone": "structformer-tiny", "lr_min": 5.0}]})
    with pytest.raises(ConfigError, match="runs"):
        parse_matrix({"defaults": {}})
    with pytest.raises(ConfigError, match=r"runs\[0\]\.depth"):
        parse_matrix({"runs": [{"kind": "gbdt", "depth": 3}]})
    assert isinstance(parse_matrix({"runs": [{"kind": "gbdt"}]})[0][0], GbdtEntry)
