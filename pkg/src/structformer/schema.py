"""Event/session data model, JSONL event-log parsing and user-level splits."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

UNKNOWN = "<UNK>"
EVENT_TYPE = "event_type"


class ConfigError(ValueError):
    """A configuration value is invalid; the message starts with the field name."""


class SchemaError(ValueError):
    """A feature schema definition is invalid."""


class EventLogError(ValueError):
    """A line of an event log is malformed or violates the schema."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line
        self.field = field


@dataclass(frozen=True)
class CategoricalFeature:
    name: str
    vocabulary: tuple[str, ...]

    @property
    def size(self) -> int:
        """Table rows, including the UNKNOWN sentinel at index 0."""
        return len(self.vocabulary) + 1


@dataclass(frozen=True)
class FeatureSchema:
    """Feature registry fixing the column layout of the feature matrix.

    Index 0 of every categorical vocabulary is the UNKNOWN sentinel; the
    listed categories occupy indices 1..V.  A categorical feature named
    ``event_type`` is filled from each event's type.
    """

    categorical_features: tuple[CategoricalFeature, ...]
    numerical_features: tuple[str, ...]
    embedding_dim: int = 32

    def __post_init__(self):
        object.__setattr__(self, "categorical_features", tuple(self.categorical_features))
        object.__setattr__(self, "numerical_features", tuple(self.numerical_features))
        names = [f.name for f in self.categorical_features] + list(self.numerical_features)
        if len(set(names)) != len(names):
            raise SchemaError(f"feature names must be unique: {names}")
        if not names:
            raise SchemaError("schema needs at least one feature")
        if int(self.embedding_dim) < 1:
            raise SchemaError("embedding_dim must be a positive integer")
        for feat in self.categorical_features:
            if len(set(feat.vocabulary)) != len(feat.vocabulary):
                raise SchemaError(f"duplicate categories in vocabulary of {feat.name!r}")
            if UNKNOWN in feat.vocabulary:
                raise SchemaError(f"{UNKNOWN!r} is reserved (feature {feat.name!r})")
        object.__setattr__(self, "_index", {
            f.name: {cat: i + 1 for i, cat in enumerate(f.vocabulary)} for f in self.categorical_features
        })

    @property
    def k_cat(self) -> int:
        return len(self.categorical_features)

    @property
    def k_num(self) -> int:
        return len(self.numerical_features)

    @property
    def width(self) -> int:
        """Row width m = c * k_cat + k_num of the feature matrix."""
        return self.embedding_dim * self.k_cat + self.k_num

    @property
    def categorical_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.categorical_features)

    def feature(self, name: str) -> CategoricalFeature:
        for f in self.categorical_features:
            if f.name == name:
                return f
        raise KeyError(name)

    def category_index(self, feature: str, value: str) -> int:
        """Vocabulary index of ``value``; 0 (UNKNOWN) when unseen."""
        return self._index[feature].get(value, 0)

    def is_known(self, feature: str, value: str) -> bool:
        return value in self._index[feature]

    @property
    def event_types(self) -> tuple[str, ...]:
        if EVENT_TYPE not in self._index:
            raise SchemaError(f"schema has no {EVENT_TYPE!r} categorical feature")
        return self.feature(EVENT_TYPE).vocabulary

    def span(self, name: str) -> tuple[int, int]:
        """Column range [start, stop) of a feature inside an encoded row."""
        c = self.embedding_dim
        for j, f in enumerate(self.categorical_features):
            if f.name == name:
                return j * c, (j + 1) * c
        base = c * self.k_cat
        for j, f in enumerate(self.numerical_features):
            if f == name:
                return base + j, base + j + 1
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "categorical_features": [
                {"name": f.name, "vocabulary": list(f.vocabulary)} for f in self.categorical_features
            ],
            "numerical_features": list(self.numerical_features),
            "embedding_dim": int(self.embedding_dim),
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "FeatureSchema":
        try:
            cats = tuple(
                CategoricalFeature(str(f["name"]), tuple(str(v) for v in f["vocabulary"]))
                for f in raw.get("categorical_features", [])
            )
            nums = tuple(str(n) for n in raw.get("numerical_features", []))
            dim = raw.get("embedding_dim", 32)
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema: {exc}") from exc
        if not isinstance(dim, int) or isinstance(dim, bool):
            raise SchemaError("embedding_dim must be an integer")
        return cls(cats, nums, dim)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def load_schema(path: str | Path) -> FeatureSchema:
    return FeatureSchema.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_schema(schema: FeatureSchema, path: str | Path) -> None:
    Path(path).write_text(json.dumps(schema.to_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class EventRecord:
    timestamp: int
    event_type: str
    categorical_values: Mapping[str, str] = field(default_factory=dict)
    numerical_values: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class Session:
    user_id: str
    session_id: str
    events: tuple[EventRecord, ...]
    user_session_count: int

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        if not self.events:
            raise ValueError(f"session {self.session_id!r} of user {self.user_id!r} has no events")
        ts = [e.timestamp for e in self.events]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"session {self.session_id!r}: timestamps must be non-decreasing")
        if int(self.user_session_count) < 1:
            raise ValueError(f"user {self.user_id!r}: session count must be >= 1")

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[Session, ...]
    validation: tuple[Session, ...]
    split_fraction: float
    split_seed: int


@dataclass
class ParseStats:
    lines: int = 0
    events: int = 0
    unknown_categories: int = 0
    unknown_by_feature: dict[str, int] = field(default_factory=lambda: defaultdict(int))


# ------------------------------------------------------------------- parsing
def _parse_line(obj, schema: FeatureSchema, lineno: int, stats: ParseStats):
    if not isinstance(obj, dict):
        raise EventLogError("expected a JSON object", lineno)
    for key, kind in (("user_id", str), ("session_id", str), ("event_type", str)):
        if key not in obj:
            raise EventLogError(f"missing field {key!r}", lineno, key)
        if not isinstance(obj[key], kind):
            raise EventLogError(f"field {key!r} must be a string", lineno, key)
    ts = obj.get("ts")
    if isinstance(ts, bool) or not isinstance(ts, int):
        raise EventLogError("field 'ts' must be an integer (milliseconds)", lineno, "ts")

    cats_raw = obj.get("cat", {})
    nums_raw = obj.get("num", {})
    if not isinstance(cats_raw, dict):
        raise EventLogError("field 'cat' must be an object", lineno, "cat")
    if not isinstance(nums_raw, dict):
        raise EventLogError("field 'num' must be an object", lineno, "num")

    cats: dict[str, str] = {}
    cat_names = set(schema.categorical_names)
    for name, value in cats_raw.items():
        if name not in cat_names:
            raise EventLogError(f"unknown categorical feature {name!r}", lineno, name)
        if not isinstance(value, str):
            raise EventLogError(f"categorical feature {name!r} must be a string", lineno, name)
        cats[name] = value
    if EVENT_TYPE in cat_names:
        cats.setdefault(EVENT_TYPE, obj["event_type"])
        if cats[EVENT_TYPE] != obj["event_type"]:
            raise EventLogError("cat.event_type disagrees with event_type", lineno, EVENT_TYPE)
    for name, value in cats.items():
        if not schema.is_known(name, value):
            stats.unknown_categories += 1
            stats.unknown_by_feature[name] += 1

    nums: dict[str, float] = {}
    num_names = set(schema.numerical_features)
    for name, value in nums_raw.items():
        if name not in num_names:
            raise EventLogError(f"unknown numerical feature {name!r}", lineno, name)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise EventLogError(f"numerical feature {name!r} must be a number", lineno, name)
        if not math.isfinite(value):
            raise EventLogError(f"numerical feature {name!r} must be finite", lineno, name)
        nums[name] = float(value)

    event = EventRecord(ts, obj["event_type"], cats, nums)
    return obj["user_id"], obj["session_id"], event


def parse_event_log(path: str | Path, schema: FeatureSchema,
                    session_counts: Mapping[str, int] | None = None,
                    stats: ParseStats | None = None) -> list[Session]:
    """Read a JSONL event log into sessions grouped by (user_id, session_id).

    Events are stably sorted by timestamp.  ``session_counts`` supplies each
    user's total session count (the label source); without it the count is
    the number of distinct sessions the user has in the log.
    """
    stats = stats if stats is not None else ParseStats()
    grouped: dict[tuple[str, str], list[EventRecord]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            stats.lines += 1
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise EventLogError(f"malformed JSON ({exc.msg})", lineno) from None
            user, sid, event = _parse_line(obj, schema, lineno, stats)
            grouped.setdefault((user, sid), []).append(event)
            stats.events += 1
    if stats.unknown_categories:
        logger.warning("%s: %d unknown category value(s) mapped to %s",
                       path, stats.unknown_categories, UNKNOWN)

    per_user: dict[str, int] = defaultdict(int)
    for user, _ in grouped:
        per_user[user] += 1
    sessions = []
    for (user, sid), events in grouped.items():
        if session_counts is not None:
            if user not in session_counts:
                raise EventLogError(f"no session count for user {user!r}", field="user_id")
            count = int(session_counts[user])
        else:
            count = per_user[user]
        events.sort(key=lambda e: e.timestamp)
        sessions.append(Session(user, sid, tuple(events), count))
    return sessions


def event_to_json(user_id: str, session_id: str, event: EventRecord) -> dict:
    cats = {k: v for k, v in event.categorical_values.items()}
    return {
        "user_id": user_id,
        "session_id": session_id,
        "ts": int(event.timestamp),
        "event_type": event.event_type,
        "cat": cats,
        "num": {k: float(v) for k, v in event.numerical_values.items()},
    }


def write_event_log(sessions: Iterable[Session], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sessions:
            for e in s.events:
                fh.write(json.dumps(event_to_json(s.user_id, s.session_id, e), separators=(",", ":")))
                fh.write("\n")


def load_session_counts(path: str | Path) -> dict[str, int]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return {str(k): int(v) for k, v in raw.items()}


# ------------------------------------------------------------------ splitting
def split_by_user(sessions: Sequence[Session], fraction: float = 0.9, seed: int = 0) -> DatasetSplit:
    """Assign whole users to train/validation so that ~``fraction`` of sessions train.

    Users are shuffled deterministically and taken into the training split
    until the cumulative session count reaches ``fraction`` of the total.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"split fraction must lie in (0, 1), got {fraction}")
    by_user: dict[str, list[Session]] = defaultdict(list)
    for s in sessions:
        by_user[s.user_id].append(s)
    users = sorted(by_user)
    if len(users) < 2:
        raise ValueError(f"need at least 2 distinct users to split, got {len(users)}")

    order = np.random.default_rng(seed).permutation(len(users))
    target = fraction * len(sessions)
    train_users: set[str] = set()
    taken = 0
    for i in order:
        if taken >= target:
            break
        train_users.add(users[i])
        taken += len(by_user[users[i]])
    if len(train_users) == len(users):
        train_users.discard(users[order[-1]])

    train = tuple(s for s in sessions if s.user_id in train_users)
    val = tuple(s for s in sessions if s.user_id not in train_users)
    return DatasetSplit(train, val, fraction, seed)
