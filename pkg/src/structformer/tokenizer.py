"""Sparse structured tokenization of event sequences.

An event becomes one row of the feature matrix: the embedding of every
categorical feature (c columns each) followed by the normalised value of
every numerical feature (one column each).  Features an event does not
carry leave their columns at exactly zero.  The rows of a session are then
projected by a bias-free linear map to d-dimensional tokens.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .schema import EventRecord, FeatureSchema, Session
from .tensor import Tensor

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-6
INIT_STD = 0.02


@dataclass(frozen=True)
class NumericStats:
    mean: float
    std: float


def normalize_numericals(train: Sequence[Session], schema: FeatureSchema) -> dict[str, NumericStats]:
    """Per-feature mean/std over the values present in the training sessions."""
    stats = {}
    for name in schema.numerical_features:
        values = np.array([e.numerical_values[name] for s in train for e in s.events
                           if name in e.numerical_values], dtype=np.float64)
        if values.size == 0:
            logger.warning("numerical feature %r never present in training data; using (0, 1)", name)
            stats[name] = NumericStats(0.0, 1.0)
            continue
        stats[name] = NumericStats(float(values.mean()), max(float(values.std()), STD_FLOOR))
    return stats


class TokenizerParams:
    """Embedding tables, projection, CLS vector and positional table."""

    def __init__(self, schema: FeatureSchema, d: int, max_len: int, rng: np.random.Generator,
                 with_cls: bool = True):
        self.schema = schema
        self.d = d
        self.max_len = max_len
        self.emb = {
            f.name: T.parameter(rng.normal(0.0, INIT_STD, (f.size, schema.embedding_dim)), name=f"emb.{f.name}")
            for f in schema.categorical_features
        }
        self.proj = T.parameter(rng.normal(0.0, INIT_STD, (schema.width, d)), name="proj.W")
        self.cls = T.parameter(rng.normal(0.0, INIT_STD, (d,)), name="cls") if with_cls else None
        self.pos = T.parameter(rng.normal(0.0, INIT_STD, (max_len, d)), name="pos") if with_cls else None

    def parameters(self) -> dict[str, Tensor]:
        out = {t.name: t for t in self.emb.values()}
        out["proj.W"] = self.proj
        if self.cls is not None:
            out["cls"] = self.cls
            out["pos"] = self.pos
        return out


@dataclass
class EncodedEvents:
    """Integer/float arrays for one session; -1 marks a missing categorical."""

    cat_index: np.ndarray   # [n, k_cat] int64
    num_value: np.ndarray   # [n, k_num] float, 0 where missing
    num_present: np.ndarray  # [n, k_num] bool

    def __len__(self) -> int:
        return self.cat_index.shape[0]


def event_arrays(events: Sequence[EventRecord], schema: FeatureSchema,
                 stats: Mapping[str, NumericStats] | None) -> EncodedEvents:
    n = len(events)
    cat = np.full((n, schema.k_cat), -1, dtype=np.int64)
    num = np.zeros((n, schema.k_num), dtype=np.float64)
    present = np.zeros((n, schema.k_num), dtype=bool)
    for i, e in enumerate(events):
        for j, name in enumerate(schema.categorical_names):
            value = e.categorical_values.get(name)
            if value is not None:
                cat[i, j] = schema.category_index(name, value)
        for j, name in enumerate(schema.numerical_features):
            if name in e.numerical_values:
                x = e.numerical_values[name]
                if stats is not None:
                    st = stats[name]
                    x = (x - st.mean) / st.std
                num[i, j] = x
                present[i, j] = True
    return EncodedEvents(cat, num, present)


def encode_session_arrays(session: Session, schema: FeatureSchema, stats, max_len: int) -> EncodedEvents:
    """Arrays for the most recent ``max_len - 1`` events (one slot is CLS)."""
    events = session.events[-(max_len - 1):]
    return event_arrays(events, schema, stats)


def feature_rows(params: TokenizerParams, cat_index: np.ndarray, num_value: np.ndarray) -> Tensor:
    """Feature matrix A for arrays shaped [..., n, k]: returns [..., n, m]."""
    schema = params.schema
    pieces = []
    for j, feat in enumerate(schema.categorical_features):
        idx = cat_index[..., j]
        present = idx >= 0
        rows = T.embedding_lookup(params.emb[feat.name], np.where(present, idx, 0))
        pieces.append(T.mul(rows, Tensor(present[..., None])))
    if schema.k_num:
        pieces.append(Tensor(num_value))
    return pieces[0] if len(pieces) == 1 else T.concat(pieces, axis=-1)


def encode_event(event: EventRecord, schema: FeatureSchema, params: TokenizerParams,
                 stats: Mapping[str, NumericStats] | None = None) -> Tensor:
    """One row [v_1, ..., v_k] of width c * k_cat + k_num."""
    arr = event_arrays([event], schema, stats)
    return feature_rows(params, arr.cat_index, arr.num_value)[0]


@dataclass
class TokenSequence:
    tokens: Tensor            # [L_max, d], CLS at position 0
    attention_mask: np.ndarray  # [L_max] bool, True = attended
    source_length: int


def project_tokens(params: TokenizerParams, rows: Tensor, mask: np.ndarray) -> Tensor:
    """[..., n, m] feature rows -> [..., n+1, d] tokens with CLS prepended.

    Positional embeddings are added to event positions 1..n; padded event
    positions (``mask`` False) are zeroed.
    """
    tok = T.matmul(rows, params.proj)
    n = tok.shape[-2]
    tok = T.add(tok, params.pos[1:n + 1])
    tok = T.mul(tok, Tensor(mask[..., None]))
    lead = tok.shape[:-2]
    cls = T.add(T.reshape(params.cls, (1,) * len(lead) + (1, params.d)),
                Tensor(np.zeros(lead + (1, params.d))))
    return T.concat([cls, tok], axis=-2)


def encode_session(session: Session, schema: FeatureSchema, params: TokenizerParams,
                   max_len: int | None = None, stats=None) -> TokenSequence:
    max_len = max_len or params.max_len
    arr = encode_session_arrays(session, schema, stats, max_len)
    n = len(arr)
    pad = max_len - 1 - n
    cat = np.concatenate([arr.cat_index, np.full((pad, schema.k_cat), -1, dtype=np.int64)])
    num = np.concatenate([arr.num_value, np.zeros((pad, schema.k_num))])
    mask = np.arange(max_len - 1) < n
    tokens = project_tokens(params, feature_rows(params, cat, num), mask)
    attn = np.concatenate([[True], mask])
    return TokenSequence(tokens, attn, n)


@dataclass
class Batch:
    cat_index: np.ndarray   # [B, n, k_cat]
    num_value: np.ndarray   # [B, n, k_num]
    mask: np.ndarray        # [B, n] bool over events
    lengths: np.ndarray

    @property
    def attention_mask(self) -> np.ndarray:
        """[B, n+1]: CLS always attended."""
        return np.concatenate([np.ones((len(self.lengths), 1), dtype=bool), self.mask], axis=1)


def collate(encoded: Sequence[EncodedEvents], k_cat: int, k_num: int) -> Batch:
    """Pad a list of encoded sessions to the longest one in the batch."""
    lengths = np.array([len(e) for e in encoded])
    n = int(lengths.max())
    b = len(encoded)
    cat = np.full((b, n, k_cat), -1, dtype=np.int64)
    num = np.zeros((b, n, k_num))
    for i, e in enumerate(encoded):
        cat[i, :len(e)] = e.cat_index
        num[i, :len(e)] = e.num_value
    mask = np.arange(n)[None, :] < lengths[:, None]
    return Batch(cat, num, mask, lengths)
