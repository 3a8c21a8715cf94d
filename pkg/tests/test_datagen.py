from __future__ import annotations

import numpy as np
import pytest
from scipy.stats import chi2_contingency, pearsonr

from structformer.datagen import (
    SIGNATURE,
    GeneratorConfig,
    default_schema,
    generate_corpus,
    sample_session_counts,
    write_corpus,
)
from structformer.schema import ConfigError, load_session_counts, parse_event_log


@pytest.fixture(scope="module")
def plain_corpus():
    cfg = GeneratorConfig(n_users=10_000, engagement_mix_strength=0.0, order_signal_strength=0.0, seed=3)
    return generate_corpus(cfg)


def _quartile_groups(sessions):
    counts = np.array([s.user_session_count for s in sessions])
    lo, hi = np.quantile(counts, [0.25, 0.75])
    return [s for s in sessions if s.user_session_count <= lo], [s for s in sessions if s.user_session_count > hi]


def _bigram_first(session):
    types = [e.event_type for e in session.events]
    i, j = types.index(SIGNATURE[0]), types.index(SIGNATURE[1])
    return abs(i - j) == 1, i < j


def test_huge_shape_gives_all_ones():
    counts = sample_session_counts(GeneratorConfig(n_users=500, pareto_shape=1e6))
    assert set(counts.values()) == {1}


def test_counts_right_skewed_and_bounded():
    cfg = GeneratorConfig(n_users=10_000, pareto_shape=1.5)
    values = np.array(list(sample_session_counts(cfg).values()))
    assert np.median(values) < values.mean()
    assert values.min() >= 1 and values.max() <= cfg.max_sessions


def test_counts_deterministic():
    cfg = GeneratorConfig(n_users=300, seed=9)
    assert sample_session_counts(cfg) == sample_session_counts(cfg)
    assert sample_session_counts(cfg) != sample_session_counts(GeneratorConfig(n_users=300, seed=10))


@pytest.mark.parametrize("bad", [
    dict(n_users=1), dict(pareto_shape=1.0), dict(max_sessions=3), dict(order_signal_strength=1.5),
    dict(engagement_mix_strength=-0.1), dict(event_types=("a", "b")), dict(signature_window=0),
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        GeneratorConfig(**bad)


def test_config_from_dict_rejects_unknown_key():
    with pytest.raises(ConfigError, match="colour"):
        GeneratorConfig.from_dict({"colour": 1})


def test_no_signal_means_same_type_mix_across_quartiles(plain_corpus):
    sessions, _ = plain_corpus
    low, high = _quartile_groups(sessions)
    types = default_schema().event_types
    table = [[sum(e.event_type == t for s in group for e in s.events) for t in types] for group in (low, high)]
    assert chi2_contingency(np.array(table))[1] > 0.01


def test_no_order_signal_means_balanced_bigram(plain_corpus):
    sessions, _ = plain_corpus
    low, high = _quartile_groups(sessions)
    assert abs(np.mean([_bigram_first(s)[1] for s in high]) - 0.5) < 0.04
    assert abs(np.mean([_bigram_first(s)[1] for s in low]) - 0.5) < 0.04


def test_full_order_signal_plants_bigram_by_engagement():
    cfg = GeneratorConfig(n_users=2000, order_signal_strength=1.0, engagement_mix_strength=0.0, seed=1)
    sessions, counts = generate_corpus(cfg)
    median = np.median(list(counts.values()))
    for s in sessions:
        adjacent, forward = _bigram_first(s)
        assert adjacent
        assert forward == (s.user_session_count > median)


def test_mix_signal_correlates_bonus_with_count():
    sessions, _ = generate_corpus(GeneratorConfig(n_users=5000, engagement_mix_strength=1.0, seed=2))
    bonus = [sum(e.event_type == "bonus" for e in s.events) for s in sessions]
    r, _ = pearsonr(bonus, [s.user_session_count for s in sessions])
    assert r > 0


def test_written_corpus_parses_and_is_byte_deterministic(tmp_path):
    cfg = GeneratorConfig(n_users=200, seed=4)
    a = write_corpus(cfg, tmp_path / "a")
    b = write_corpus(cfg, tmp_path / "b")
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes()
    counts = load_session_counts(a["session_counts"])
    sessions = parse_event_log(a["events"], default_schema(cfg), counts)
    assert len(sessions) == 200
    assert {s.user_id: s.user_session_count for s in sessions} == counts
    generated, _ = generate_corpus(cfg)
    assert sorted(sessions, key=lambda s: s.user_id) == generated
