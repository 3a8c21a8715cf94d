"""Transformer (CLS readout) and MLP (mean pooling) encoders plus the model wrapper."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np

from . import tensor as T
from .schema import FeatureSchema
from .tensor import DimensionError, Tensor
from .tokenizer import INIT_STD, Batch, TokenizerParams, feature_rows, project_tokens

MASK_FILL = -1e9


@dataclass(frozen=True)
class BackboneConfig:
    kind: str
    hidden_dim: int = 64
    layers: int = 1
    heads: int = 1
    mlp_neurons: tuple[int, ...] = ()
    ffn_ratio: int = 4
    dropout: float = 0.0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "mlp_neurons", tuple(int(n) for n in self.mlp_neurons))
        if self.kind not in ("transformer", "mlp"):
            raise ValueError(f"kind: expected 'transformer' or 'mlp', got {self.kind!r}")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim: must be positive")
        if self.kind == "transformer":
            if self.heads < 1 or self.hidden_dim % self.heads:
                raise ValueError(f"heads: hidden_dim {self.hidden_dim} is not divisible by {self.heads} heads")
            if self.layers < 0:
                raise ValueError("layers: must be >= 0")
        elif not self.mlp_neurons:
            raise ValueError("mlp_neurons: an MLP backbone needs at least one hidden layer")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout: must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_neurons"] = list(self.mlp_neurons)
        return d

    @classmethod
    def from_dict(cls, raw: Mapping) -> "BackboneConfig":
        if "preset" in raw:
            base = PRESETS[raw["preset"]]
            extra = {k: v for k, v in raw.items() if k != "preset"}
            return replace(base, **extra)
        return cls(**raw)


PRESETS: dict[str, BackboneConfig] = {
    "structformer-tiny": BackboneConfig("transformer", 64, 1, 1, name="Structformer-Tiny"),
    "structformer-small": BackboneConfig("transformer", 64, 4, 4, name="Structformer-Small"),
    "structformer-medium": BackboneConfig("transformer", 512, 1, 1, name="Structformer-Medium"),
    "structformer-large": BackboneConfig("transformer", 512, 4, 4, name="Structformer-Large"),
    "structformer-xlarge": BackboneConfig("transformer", 512, 8, 8, name="Structformer-XLarge"),
    # MLP token width equals the small transformers' d so the tokenizer is shared
    "mlp-small": BackboneConfig("mlp", 64, mlp_neurons=(256, 128, 64), name="MLP-Small"),
    "mlp-medium": BackboneConfig("mlp", 64, mlp_neurons=(512, 256, 128), name="MLP-Medium"),
    "mlp-large": BackboneConfig("mlp", 64, mlp_neurons=(512, 512, 256, 128), name="MLP-Large"),
}


def _weight(rng, fan_in, fan_out, name, std=INIT_STD):
    return T.parameter(rng.normal(0.0, std, (fan_in, fan_out)), name=name)


def _zeros(n, name):
    return T.parameter(np.zeros(n), name=name)


def _ones(n, name):
    return T.parameter(np.ones(n), name=name)


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    @classmethod
    def init(cls, rng, d, prefix):
        return cls(
            _weight(rng, d, d, f"{prefix}.Wq"), _weight(rng, d, d, f"{prefix}.Wk"),
            _weight(rng, d, d, f"{prefix}.Wv"), _zeros(d, f"{prefix}.bq"),
            _zeros(d, f"{prefix}.bk"), _zeros(d, f"{prefix}.bv"),
            _weight(rng, d, d, f"{prefix}.Wo"), _zeros(d, f"{prefix}.bo"),
        )

    def tensors(self):
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]


def multi_head_attention(x: Tensor, mask: np.ndarray, heads: int, p: AttentionParams,
                         dropout: float = 0.0, rng=None) -> Tensor:
    """Scaled dot-product self-attention over [L, d] or [B, L, d] inputs.

    Key positions where ``mask`` is False get MASK_FILL before the softmax,
    so they receive exactly zero weight.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
        mask = np.asarray(mask)[None]
    b, length, d = x.shape
    if d % heads:
        raise DimensionError(f"model width {d} not divisible by {heads} heads")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (b, length):
        raise DimensionError(f"mask shape {mask.shape} does not match input {x.shape}")
    dh = d // heads

    def split(t):
        return T.transpose(T.reshape(t, (b, length, heads, dh)), (0, 2, 1, 3))

    q = split(T.linear(x, p.wq, p.bq))
    k = split(T.linear(x, p.wk, p.bk))
    v = split(T.linear(x, p.wv, p.bv))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    bias = np.where(mask, 0.0, MASK_FILL).astype(x.data.dtype)[:, None, None, :]
    weights = T.dropout(T.softmax_rows(T.add(scores, Tensor(bias))), dropout, rng)
    ctx = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (b, length, d))
    out = T.linear(ctx, p.wo, p.bo)
    return T.reshape(out, (length, d)) if squeeze else out


@dataclass
class Block:
    ln1_g: Tensor
    ln1_b: Tensor
    attn: AttentionParams
    ln2_g: Tensor
    ln2_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor

    @classmethod
    def init(cls, rng, d, ffn_ratio, prefix):
        h = d * ffn_ratio
        return cls(
            _ones(d, f"{prefix}.ln1.gain"), _zeros(d, f"{prefix}.ln1.bias"),
            AttentionParams.init(rng, d, f"{prefix}.attn"),
            _ones(d, f"{prefix}.ln2.gain"), _zeros(d, f"{prefix}.ln2.bias"),
            _weight(rng, d, h, f"{prefix}.ffn.W1"), _zeros(h, f"{prefix}.ffn.b1"),
            _weight(rng, h, d, f"{prefix}.ffn.W2"), _zeros(d, f"{prefix}.ffn.b2"),
        )

    def tensors(self):
        return [self.ln1_g, self.ln1_b, *self.attn.tensors(), self.ln2_g, self.ln2_b,
                self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]


@dataclass
class TransformerParams:
    blocks: list[Block]
    final_g: Tensor
    final_b: Tensor

    @classmethod
    def init(cls, rng, cfg: BackboneConfig):
        d = cfg.hidden_dim
        blocks = [Block.init(rng, d, cfg.ffn_ratio, f"blocks.{i}") for i in range(cfg.layers)]
        return cls(blocks, _ones(d, "final_ln.gain"), _zeros(d, "final_ln.bias"))

    def tensors(self):
        return [t for blk in self.blocks for t in blk.tensors()] + [self.final_g, self.final_b]


def transformer_encode(tokens: Tensor, mask: np.ndarray, cfg: BackboneConfig, params: TransformerParams,
                       rng=None) -> Tensor:
    """Pre-LN encoder stack; returns the final-normalised CLS (position 0) state."""
    x = tokens
    p_drop = cfg.dropout if rng is not None else 0.0
    for blk in params.blocks:
        h = T.layer_norm(x, blk.ln1_g, blk.ln1_b)
        x = T.add(x, T.dropout(multi_head_attention(h, mask, cfg.heads, blk.attn, p_drop, rng), p_drop, rng))
        h = T.layer_norm(x, blk.ln2_g, blk.ln2_b)
        h = T.linear(T.gelu(T.linear(h, blk.fc1_w, blk.fc1_b)), blk.fc2_w, blk.fc2_b)
        x = T.add(x, T.dropout(h, p_drop, rng))
    x = T.layer_norm(x, params.final_g, params.final_b)
    return x[..., 0, :]


@dataclass
class MLPParams:
    weights: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def init(cls, rng, cfg: BackboneConfig):
        widths = (cfg.hidden_dim,) + cfg.mlp_neurons
        ws, bs = [], []
        for i, (a, b) in enumerate(zip(widths, widths[1:])):
            ws.append(_weight(rng, a, b, f"mlp.{i}.W", std=1.0 / math.sqrt(a)))
            bs.append(_zeros(b, f"mlp.{i}.b"))
        return cls(ws, bs)

    def tensors(self):
        return [t for pair in zip(self.weights, self.biases) for t in pair]


def mlp_stack(x: Tensor, cfg: BackboneConfig, params: MLPParams, rng=None) -> Tensor:
    p_drop = cfg.dropout if rng is not None else 0.0
    for w, b in zip(params.weights, params.biases):
        x = T.dropout(T.gelu(T.linear(x, w, b)), p_drop, rng)
    return x


def mlp_encode(event_rows: Tensor, cfg: BackboneConfig, params: MLPParams, mask=None, rng=None) -> Tensor:
    """Average-pool event tokens, then the hidden linear+GELU layers."""
    return mlp_stack(T.mean_pool_rows(event_rows, mask), cfg, params, rng)


class BehaviorModel:
    """Tokenizer + backbone + linear head producing ``n_outputs`` scores per session."""

    def __init__(self, schema: FeatureSchema, cfg: BackboneConfig, n_outputs: int, max_len: int = 256,
                 seed: int = 0):
        rng = np.random.default_rng([seed, 17])
        self.schema = schema
        self.cfg = cfg
        self.n_outputs = n_outputs
        self.max_len = max_len
        d = cfg.hidden_dim
        is_tf = cfg.kind == "transformer"
        self.tok = TokenizerParams(schema, d, max_len, rng, with_cls=is_tf)
        if is_tf:
            self.backbone = TransformerParams.init(rng, cfg)
            out_dim = d
        else:
            self.backbone = MLPParams.init(rng, cfg)
            out_dim = cfg.mlp_neurons[-1]
        # zero head: untrained logits are exactly equal, so loss starts at ln(n_outputs)
        self.head_w = T.parameter(np.zeros((out_dim, n_outputs)), name="head.W")
        self.head_b = _zeros(n_outputs, "head.b")

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.tok.parameters())
        for t in self.backbone.tensors():
            out[t.name] = t
        out["head.W"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def encode(self, batch: Batch, rng=None) -> Tensor:
        """Sequence representation: CLS state (transformer) or pooled MLP features."""
        rows = feature_rows(self.tok, batch.cat_index, batch.num_value)
        if self.cfg.kind == "transformer":
            tokens = project_tokens(self.tok, rows, batch.mask)
            return transformer_encode(tokens, batch.attention_mask, self.cfg, self.backbone, rng)
        # pool-then-project equals project-then-pool by linearity and keeps pooling exact
        pooled = T.matmul(T.mean_pool_rows(rows, batch.mask), self.tok.proj)
        return mlp_stack(pooled, self.cfg, self.backbone, rng)

    def forward(self, batch: Batch, rng=None) -> Tensor:
        return T.linear(self.encode(batch, rng), self.head_w, self.head_b)

    __call__ = forward

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise KeyError(f"checkpoint lacks parameter {missing[0]!r}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.data.dtype).copy()


def linear_count(fan_in: int, fan_out: int, bias: bool = True) -> int:
    return fan_in * fan_out + (fan_out if bias else 0)


def count_parameters(cfg: BackboneConfig, schema: FeatureSchema, n_outputs: int = 2, max_len: int = 256) -> int:
    """Closed-form trainable scalar count (embeddings + projection + backbone + head)."""
    d = cfg.hidden_dim
    total = sum(f.size * schema.embedding_dim for f in schema.categorical_features)
    total += linear_count(schema.width, d, bias=False)
    if cfg.kind == "transformer":
        h = cfg.ffn_ratio * d
        per_block = 4 * d + 4 * linear_count(d, d) + linear_count(d, h) + linear_count(h, d)
        total += d + max_len * d + cfg.layers * per_block + 2 * d
        out_dim = d
    else:
        widths = (d,) + cfg.mlp_neurons
        total += sum(linear_count(a, b) for a, b in zip(widths, widths[1:]))
        out_dim = cfg.mlp_neurons[-1]
    return total + linear_count(out_dim, n_outputs)
