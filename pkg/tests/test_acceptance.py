"""End-to-end acceptance suite: one PASS/FAIL line per criterion.

Criteria 7, 8 and 12 train real models on 10,000-user corpora and take
several minutes on one CPU core; they carry the ``slow`` marker.
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest

from structformer import tensor as T
from structformer.backbones import PRESETS, BackboneConfig, BehaviorModel
from structformer.benchmark import TABLE_HEADERS, GbdtEntry, benchmark, format_table, run_gbdt
from structformer.datagen import GeneratorConfig, default_schema, generate_corpus
from structformer.gbdt import GbdtParams, _Binned, best_split, fit_gbdt
from structformer.objectives import assign_labels, class_balance, fit_label_spec
from structformer.schema import CategoricalFeature, EventRecord, FeatureSchema, split_by_user
from structformer.tokenizer import TokenizerParams, collate, encode_event, normalize_numericals
from structformer.trainer import (
    TrainConfig,
    evaluate,
    load_checkpoint,
    predict_outputs,
    prepare,
    save_checkpoint,
    score,
    train_run,
    write_metrics_csv,
)

from gradcheck import OP_CASES, sweep
from oracles import brute_force_split, model_gradcheck, permutation_dichotomy, small_corpus

N_USERS = 10_000
FULL_STEPS = 800
FULL_LEN = 64


def _corpus(**kw):
    cfg = GeneratorConfig(n_users=N_USERS, seed=0, **kw)
    sessions, _ = generate_corpus(cfg)
    schema = default_schema(cfg)
    return schema, split_by_user(sessions, 0.9, seed=0)


@pytest.fixture(scope="session")
def mixed_corpus():
    return _corpus()


def _full_config(preset, seeds=(0, 1, 2)):
    return TrainConfig(PRESETS[preset], max_steps=FULL_STEPS, max_len=FULL_LEN, seeds=seeds,
                       name=preset)


@pytest.fixture(scope="session")
def ordering_rows(mixed_corpus):
    schema, data = mixed_corpus
    matrix = [_full_config("structformer-small"), _full_config("mlp-small"), GbdtEntry()]
    t0 = time.time()
    rows = benchmark(matrix, data, schema, "binary")
    return {r.name: r for r in rows}, time.time() - t0


# --------------------------------------------------------------------- 1
def test_criterion_01_gradient_integrity(verdict):
    t0 = time.time()
    worst = {name: sweep(name, trials=100) for name in OP_CASES}
    schema, sessions = small_corpus(8, seed=1, min_events=3, mean_events=4, max_events=5, embedding_dim=2)
    model_err = model_gradcheck(BackboneConfig("transformer", 8, 2, 2), schema, sessions[:4], [0, 1, 1, 0])
    elapsed = time.time() - t0
    op, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < 1e-3 and model_err < 1e-2 and elapsed < 60
    verdict(1, "gradient integrity", ok,
            f"{len(worst)} ops, worst {op} {err:.2e} (<1e-3); miniature transformer {model_err:.2e} (<1e-2); "
            f"{elapsed:.1f}s")


# --------------------------------------------------------------------- 2
def test_criterion_02_tokenization_laws(verdict):
    rng = np.random.default_rng(0)
    failures = 0
    for _ in range(200):
        k_cat, k_num, c = int(rng.integers(0, 7)), int(rng.integers(0, 7)), int(rng.integers(1, 9))
        if k_cat + k_num == 0:
            k_num = 1
        cats = tuple(CategoricalFeature(f"c{j}", ("a", "b", "c")) for j in range(k_cat))
        schema = FeatureSchema(cats, tuple(f"n{j}" for j in range(k_num)), embedding_dim=c)
        params = TokenizerParams(schema, 8, 16, rng)
        cat_vals = {f"c{j}": str(rng.choice(["a", "b", "c", "zz"])) for j in range(k_cat) if rng.random() < 0.5}
        num_vals = {f"n{j}": float(rng.normal(0, 10)) or 1.0 for j in range(k_num) if rng.random() < 0.5}
        row = encode_event(EventRecord(0, "x", cat_vals, num_vals), schema, params).data
        good = row.shape == (c * k_cat + k_num,)
        for j in range(k_cat):
            lo, hi = schema.span(f"c{j}")
            good &= (f"c{j}" not in cat_vals) == bool(np.all(row[lo:hi] == 0))
        for j in range(k_num):
            lo, _ = schema.span(f"n{j}")
            good &= (f"n{j}" not in num_vals) == (row[lo] == 0)
        failures += not good
    verdict(2, "tokenization laws", failures == 0, f"{200 - failures}/200 schemas: width c*k_cat+k_num, "
            "missing spans exactly zero")


# --------------------------------------------------------------------- 3
def test_criterion_03_label_balance(verdict, mixed_corpus):
    _, data = mixed_corpus
    train_counts = [s.user_session_count for s in data.train]
    all_counts = train_counts + [s.user_session_count for s in data.validation]
    binary = class_balance(assign_labels(all_counts, fit_label_spec("binary", train_counts)), 2)
    quart = class_balance(assign_labels(all_counts, fit_label_spec("multiclass4", train_counts)), 4)
    ok = np.all(np.abs(binary - 0.5) <= 0.03) and np.all(np.abs(quart - 0.25) <= 0.03)
    verdict(3, "label balance", bool(ok), f"n={len(all_counts)} binary {np.round(binary, 4).tolist()}, "
            f"quartile {np.round(quart, 4).tolist()}")


# --------------------------------------------------------------------- 4
def test_criterion_04_chance_level_signature(verdict):
    cfg = GeneratorConfig(n_users=2000, seed=0)
    sessions, _ = generate_corpus(cfg)
    schema = default_schema(cfg)
    data = split_by_user(sessions, 0.9, seed=0)
    spec = fit_label_spec("binary", [s.user_session_count for s in data.train])
    prep = prepare(sessions, schema, normalize_numericals(data.train, schema), spec, FULL_LEN)
    worst_loss, worst_acc = 0.0, 0.0
    names = ["structformer-tiny", "structformer-small", "mlp-small", "mlp-medium"]
    for name in names:
        for seed in range(3):
            m = score(predict_outputs(BehaviorModel(schema, PRESETS[name], 2, FULL_LEN, seed), prep), prep, spec)
            worst_loss = max(worst_loss, abs(m["loss"] - math.log(2)))
            worst_acc = max(worst_acc, abs(m["accuracy"] - 0.5))
    ok = worst_loss <= 0.05 and worst_acc <= 0.05
    verdict(4, "chance-level signature", ok, f"{len(names)} presets x 3 seeds on n=2000: "
            f"max |loss - ln2| {worst_loss:.4f}, max |acc - 0.5| {worst_acc:.4f}")


# --------------------------------------------------------------------- 5
def test_criterion_05_memorization_probe(verdict):
    schema, sessions = small_corpus(64, seed=0, embedding_dim=32)
    spec = fit_label_spec("binary", [s.user_session_count for s in sessions])
    prep = prepare(sessions, schema, normalize_numericals(sessions, schema), spec, FULL_LEN)
    batch = collate(prep.encoded, schema.k_cat, schema.k_num)
    model = BehaviorModel(schema, PRESETS["structformer-tiny"], 2, FULL_LEN, seed=0)
    opt = T.AdamW(model.parameters(), lr=1e-3)
    t0 = time.time()
    loss = math.inf
    for step in range(1, 501):
        opt.zero_grad()
        out = T.cross_entropy(model(batch), prep.targets)
        out.backward()
        opt.step()
        loss = out.item()
        if loss < 0.05:
            break
    elapsed = time.time() - t0
    verdict(5, "memorization probe", loss < 0.05 and elapsed < 120,
            f"structformer-tiny loss {loss:.4f} at step {step} (<0.05 within 500), {elapsed:.1f}s")


# --------------------------------------------------------------------- 6
def test_criterion_06_permutation_dichotomy(verdict):
    schema, sessions = small_corpus(120, seed=5, embedding_dim=32)
    same, changed, deltas = permutation_dichotomy(schema, sessions, n_pairs=100)
    verdict(6, "permutation dichotomy", same == 100 and changed >= 95,
            f"MLP bit-identical {same}/100; transformer CLS changed {changed}/100 (min delta {min(deltas):.3g})")


# --------------------------------------------------------------------- 7
@pytest.mark.slow
def test_criterion_07_ordering(verdict, ordering_rows):
    rows, elapsed = ordering_rows
    sf = rows["structformer-small"].summary["accuracy"][0]
    mlp = rows["mlp-small"].summary["accuracy"][0]
    gb = rows["GBDT"].summary["accuracy"][0]
    ok = sf > mlp > gb and sf - gb >= 0.03
    verdict(7, "ordering", ok, f"Structformer-Small {sf:.4f} > MLP-Small {mlp:.4f} > GBDT {gb:.4f}, "
            f"margin {100 * (sf - gb):.1f} pts (>=3); {elapsed / 60:.1f} min")


# --------------------------------------------------------------------- 8
@pytest.mark.slow
def test_criterion_08_ablation_blindness(verdict):
    schema, data = _corpus(engagement_mix_strength=0.0, order_signal_strength=1.0, feature_signal_strength=0.0)
    spec = fit_label_spec("binary", [s.user_session_count for s in data.train])
    gb = run_gbdt(GbdtEntry(), data, schema, spec).final.accuracy
    sf = train_run(_full_config("structformer-small", seeds=(0,)), data, schema, 0, spec).final.accuracy
    ok = abs(gb - 0.5) <= 0.03 and sf >= 0.60
    verdict(8, "ablation blindness", ok, f"order-only corpus: GBDT {gb:.4f} (0.50 +/- 0.03), "
            f"Structformer-Small {sf:.4f} (>=0.60)")


# --------------------------------------------------------------------- 9
def test_criterion_09_scheduler_contract(verdict):
    schema, sessions = small_corpus(160, seed=3, embedding_dim=4)
    data = split_by_user(sessions, 0.8, seed=0)
    # min_delta no loss can beat: every evaluation after the first is a plateau
    cfg = TrainConfig(BackboneConfig("transformer", 16, 1, 2), batch_size=16, max_steps=6, eval_interval=1,
                      plateau_patience=1, plateau_min_delta=1e3, seeds=(0,), max_len=24)
    trace = [r.lr for r in train_run(cfg, data, schema, 0).records]
    distinct = [lr for i, lr in enumerate(trace) if i == 0 or lr != trace[i - 1]]
    ok = distinct == [1e-4, 1e-5, 1e-6] and trace[-2:] == [1e-6, 1e-6]
    verdict(9, "scheduler contract", ok, f"lr trace {trace}")


# -------------------------------------------------------------------- 10
def test_criterion_10_determinism_and_persistence(verdict, tmp_path):
    schema, sessions = small_corpus(160, seed=3, embedding_dim=4)
    data = split_by_user(sessions, 0.8, seed=0)
    cfg = TrainConfig(BackboneConfig("transformer", 16, 1, 2), batch_size=16, max_steps=12, eval_interval=4,
                      seeds=(0,), max_len=24)
    runs = [train_run(cfg, data, schema, 0) for _ in range(2)]
    for i, r in enumerate(runs):
        write_metrics_csv(r.records, tmp_path / f"m{i}.csv")
    same_csv = (tmp_path / "m0.csv").read_bytes() == (tmp_path / "m1.csv").read_bytes()
    save_checkpoint(runs[0].checkpoint, tmp_path / "ck")
    _, before = evaluate(runs[0].checkpoint, data.validation)
    _, after = evaluate(load_checkpoint(tmp_path / "ck"), data.validation)
    verdict(10, "determinism & persistence", same_csv and before == after,
            f"metric CSVs identical: {same_csv}; reloaded evaluation identical: {before == after}")


# -------------------------------------------------------------------- 11
def test_criterion_11_gbdt_correctness(verdict):
    matches = 0
    for trial in range(50):
        rng = np.random.default_rng(trial)
        x = rng.integers(0, 6, (20, 4)).astype(float)
        g, h = rng.standard_normal(20), rng.uniform(0.1, 1.0, 20)
        params = GbdtParams(min_samples_leaf=int(rng.integers(1, 4)))
        got = best_split(_Binned(x), np.arange(20), g, h, params)
        want = brute_force_split(x, g, h, params.l2, params.min_samples_leaf)
        if want is None:
            matches += got is None
        else:
            matches += (got.feature, got.threshold) == want[:2] and math.isclose(got.gain, want[2], rel_tol=1e-9)
    monotone = 0
    for trial in range(20):
        rng = np.random.default_rng(100 + trial)
        x = rng.integers(0, 8, (120, 6))
        y = rng.integers(0, 2, 120)
        losses = np.array(fit_gbdt(x, y, "binary", GbdtParams(n_rounds=30, max_depth=3, min_samples_leaf=2,
                                                               learning_rate=0.3)).round_losses)
        monotone += bool(np.all(np.diff(losses) <= 1e-12))
    verdict(11, "GBDT correctness", matches == 50 and monotone == 20,
            f"first split = brute force on {matches}/50; monotone training loss on {monotone}/20 fits")


# -------------------------------------------------------------------- 12
@pytest.mark.slow
def test_criterion_12_multi_seed_reporting(verdict, ordering_rows):
    rows, _ = ordering_rows
    neural = [rows["structformer-small"], rows["mlp-small"]]
    stds = {r.name: r.summary["accuracy"][1] for r in neural}
    header = [c.strip() for c in format_table(list(rows.values())).splitlines()[0].split(" | ")]
    ok = (all(r.n_runs == 3 for r in neural) and all(s < 0.02 for s in stds.values())
          and header == ["Model", *TABLE_HEADERS])
    verdict(12, "multi-seed reporting", ok,
            "accuracy std " + ", ".join(f"{k} {100 * v:.2f} pts" for k, v in stds.items())
            + f" (<2); columns {header[1:]}")
