"""Synthetic behaviour corpus with a long-tailed session-count distribution.

Three planted signals tie a user's recorded session to their engagement
(total session count):

* event-type mix: engaged users produce more ``bonus``/``level_complete``
  events (visible to count features);
* per-event features: engaged users pick harder levels and play longer
  (invisible to count features, visible to the token models);
* an ordered signature bigram at the start of the session: ``daily_reward``
  immediately before ``level_start`` for engaged users, reversed for casual
  ones (invisible to count features and to mean pooling).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .schema import EVENT_TYPE, CategoricalFeature, ConfigError, EventRecord, FeatureSchema, Session

BACKGROUND_TYPES = (
    "app_open", "level_complete", "level_fail", "ad_view", "bonus", "shop_visit",
)
SIGNATURE = ("daily_reward", "level_start")
DEFAULT_EVENT_TYPES = BACKGROUND_TYPES + SIGNATURE

DIFFICULTIES = ("easy", "normal", "hard")
PLACEMENTS = ("banner", "interstitial", "rewarded")

# background event-type mixes for the least and the most engaged users
LOW_MIX = np.array([0.22, 0.12, 0.24, 0.24, 0.06, 0.12])
HIGH_MIX = np.array([0.14, 0.26, 0.12, 0.12, 0.22, 0.14])


@dataclass(frozen=True)
class GeneratorConfig:
    n_users: int = 10_000
    pareto_shape: float = 1.5
    pareto_scale: float = 40.0
    max_sessions: int = 1000
    event_types: tuple[str, ...] = DEFAULT_EVENT_TYPES
    engagement_mix_strength: float = 1.0
    order_signal_strength: float = 0.5
    feature_signal_strength: float = 0.5
    mean_events: float = 14.0
    min_events: int = 6
    max_events: int = 40
    signature_window: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "event_types", tuple(self.event_types))
        if self.n_users < 2:
            raise ConfigError("n_users: must be >= 2")
        if self.pareto_shape <= 1.0:
            raise ConfigError("pareto_shape: must be > 1")
        if self.pareto_scale <= 0:
            raise ConfigError("pareto_scale: must be > 0")
        if self.max_sessions < 4:
            raise ConfigError("max_sessions: must be >= 4 so that quartiles are definable")
        for name in ("engagement_mix_strength", "order_signal_strength", "feature_signal_strength"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name}: must lie in [0, 1], got {value}")
        missing = [t for t in DEFAULT_EVENT_TYPES if t not in self.event_types]
        if missing:
            raise ConfigError(f"event_types: generator requires {missing}")
        if not 2 <= self.min_events <= self.max_events:
            raise ConfigError("min_events/max_events: need 2 <= min_events <= max_events")
        if not 1 <= self.signature_window <= self.min_events - 1:
            raise ConfigError("signature_window: must lie in [1, min_events - 1]")

    @classmethod
    def from_dict(cls, raw: dict) -> "GeneratorConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown generator option")
        return cls(**raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["event_types"] = list(self.event_types)
        return d


def default_schema(cfg: GeneratorConfig | None = None, embedding_dim: int = 32) -> FeatureSchema:
    """Three categorical features (type, difficulty, placement) and two numerical ones."""
    types = cfg.event_types if cfg is not None else DEFAULT_EVENT_TYPES
    return FeatureSchema(
        categorical_features=(
            CategoricalFeature(EVENT_TYPE, tuple(types)),
            CategoricalFeature("difficulty", DIFFICULTIES),
            CategoricalFeature("placement", PLACEMENTS),
        ),
        numerical_features=("duration_s", "score"),
        embedding_dim=embedding_dim,
    )


def user_id(i: int) -> str:
    return f"u{i:06d}"


def sample_session_counts(cfg: GeneratorConfig) -> dict[str, int]:
    """Counts from a discretised Lomax-type Pareto truncated to [1, max_sessions].

    count = 1 + floor(scale * ((1 - u)^(-1/shape) - 1)), with u drawn
    uniformly below the CDF at the truncation point (exact truncation).
    """
    rng = np.random.default_rng([cfg.seed, 0])
    a, s = cfg.pareto_shape, cfg.pareto_scale
    # P(count <= max_sessions) = F(max_sessions / s) for the continuous part
    top = 1.0 - (1.0 + cfg.max_sessions / s) ** (-a)
    u = rng.random(cfg.n_users) * top
    x = s * ((1.0 - u) ** (-1.0 / a) - 1.0)
    counts = np.minimum(1 + np.floor(x).astype(np.int64), cfg.max_sessions)
    return {user_id(i): int(c) for i, c in enumerate(counts)}


def _percentiles(values: np.ndarray) -> np.ndarray:
    """Mid-rank percentile of each value in (0, 1)."""
    order = np.sort(values)
    below = np.searchsorted(order, values, side="left")
    upto = np.searchsorted(order, values, side="right")
    return (below + upto) / (2.0 * len(values))


def generate_sessions(cfg: GeneratorConfig, counts: dict[str, int]) -> list[Session]:
    """One recorded session per user, carrying the planted engagement signals."""
    users = sorted(counts)
    values = np.array([counts[u] for u in users], dtype=np.float64)
    pct = _percentiles(values)
    median = float(np.median(values))
    sessions = []
    for i, uid in enumerate(users):
        rng = np.random.default_rng([cfg.seed, 1, i])
        engaged = values[i] > median
        sessions.append(_make_session(cfg, rng, uid, int(values[i]), float(pct[i]), engaged))
    return sessions


def _make_session(cfg: GeneratorConfig, rng: np.random.Generator, uid: str, count: int,
                  pct: float, engaged: bool) -> Session:
    n = int(np.clip(cfg.min_events + rng.poisson(cfg.mean_events - cfg.min_events),
                    cfg.min_events, cfg.max_events))
    weight = 0.5 + cfg.engagement_mix_strength * (pct - 0.5)
    mix = (1.0 - weight) * LOW_MIX + weight * HIGH_MIX
    types = list(rng.choice(len(BACKGROUND_TYPES), size=n - 2, p=mix / mix.sum()))
    types = [BACKGROUND_TYPES[t] for t in types]

    if rng.random() < cfg.order_signal_strength:
        pair = list(SIGNATURE) if engaged else list(reversed(SIGNATURE))
    else:
        pair = list(SIGNATURE) if rng.random() < 0.5 else list(reversed(SIGNATURE))
    at = int(rng.integers(0, cfg.signature_window))
    types[at:at] = pair

    skill = 0.5 + cfg.feature_signal_strength * (pct - 0.5)
    hard_p = np.array([1.0 - skill, 0.5, skill]) * np.array([0.6, 1.0, 0.6])
    hard_p /= hard_p.sum()

    events = []
    ts = 1_700_000_000_000 + int(rng.integers(0, 30 * 86_400_000))
    for etype in types:
        ts += int(rng.integers(500, 60_000))
        cats: dict[str, str] = {EVENT_TYPE: etype}
        nums: dict[str, float] = {}
        if etype in ("level_start", "level_complete", "level_fail"):
            cats["difficulty"] = DIFFICULTIES[int(rng.choice(3, p=hard_p))]
        if etype == "ad_view":
            cats["placement"] = PLACEMENTS[int(rng.integers(0, 3))]
        if etype != "app_open":
            dur = rng.lognormal(mean=3.0 + 0.8 * cfg.feature_signal_strength * (pct - 0.5), sigma=0.5)
            nums["duration_s"] = round(float(dur), 3)
        if etype in ("level_complete", "level_fail"):
            nums["score"] = float(int(rng.integers(0, 1000)))
        events.append(EventRecord(ts, etype, cats, nums))
    return Session(uid, f"{uid}-s0", tuple(events), count)


def generate_corpus(cfg: GeneratorConfig) -> tuple[list[Session], dict[str, int]]:
    counts = sample_session_counts(cfg)
    return generate_sessions(cfg, counts), counts


def write_corpus(cfg: GeneratorConfig, out_dir: str | Path) -> dict[str, Path]:
    """Write events.jsonl, session_counts.json and schema.json into ``out_dir``."""
    from .schema import save_schema, write_event_log

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sessions, counts = generate_corpus(cfg)
    paths = {
        "events": out / "events.jsonl",
        "session_counts": out / "session_counts.json",
        "schema": out / "schema.json",
    }
    write_event_log(sessions, paths["events"])
    paths["session_counts"].write_text(json.dumps(counts, sort_keys=True, indent=0) + "\n", encoding="utf-8")
    save_schema(default_schema(cfg), paths["schema"])
    return paths


@dataclass
class CorpusSummary:
    n_sessions: int
    median_count: float
    mean_count: float
    type_counts: dict[str, int] = field(default_factory=dict)


def summarize(sessions: list[Session]) -> CorpusSummary:
    counts = np.array([s.user_session_count for s in sessions])
    types: dict[str, int] = {}
    for s in sessions:
        for e in s.events:
            types[e.event_type] = types.get(e.event_type, 0) + 1
    return CorpusSummary(len(sessions), float(np.median(counts)), float(counts.mean()), types)
