"""Dense tensors with define-by-run reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its inputs and a
closure propagating the upstream gradient to them.  ``Tensor.backward``
orders the recorded graph topologically and visits each op exactly once,
in reverse.  Values live in numpy arrays; float32 is the training dtype and
float64 can be switched on for gradient verification.
"""

from __future__ import annotations

import contextlib
import io
import math
import struct
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

_STATE = {"dtype": np.float32, "grad_enabled": True}


class DimensionError(ValueError):
    """Operand shapes are incompatible for an op."""


def get_default_dtype():
    return _STATE["dtype"]


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors."""
    prev = _STATE["dtype"]
    _STATE["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _STATE["dtype"] = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (evaluation mode)."""
    prev = _STATE["grad_enabled"]
    _STATE["grad_enabled"] = False
    try:
        yield
    finally:
        _STATE["grad_enabled"] = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _parents=(), _op: str = ""):
        arr = np.asarray(data)
        if arr.dtype.kind != "f" or (not _parents and arr.dtype.type is not _STATE["dtype"]):
            arr = arr.astype(_STATE["dtype"])
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # --------------------------------------------------------------- autodiff
    def topo_order(self) -> list["Tensor"]:
        """Recorded ops reachable from this tensor, inputs before outputs."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)
        for node in reversed(self.topo_order()):
            if node._backward is None:
                continue
            if node.grad is not None:
                node._backward(node.grad)
            # intermediate gradients are not retained
            node.grad = None

    # -------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=_STATE["dtype"]), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_STATE["dtype"]))


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    track = _STATE["grad_enabled"] and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=track, _parents=tuple(parents) if track else (), _op=op)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _result(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def backward(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(g, b.shape))
        out._backward = backward
    return out


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        s = float(b)
        out = _result(a.data * s, (a,), "scale")
        if out.requires_grad:
            out._backward = lambda g: _accumulate(a, g * s)
        return out
    a, b = _as_tensor(a), _as_tensor(b)
    out = _result(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def backward(g):
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
            _accumulate(b, _unbroadcast(g * a.data, b.shape))
        out._backward = backward
    return out


def neg(a: Tensor) -> Tensor:
    out = _result(-a.data, (a,), "neg")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, -g)
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    e = float(exponent)
    out = _result(a.data ** e, (a,), "pow")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, g * e * a.data ** (e - 1.0))
    return out


def exp(a: Tensor) -> Tensor:
    val = np.exp(a.data)
    out = _result(val, (a,), "exp")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, g * val)
    return out


def log(a: Tensor) -> Tensor:
    out = _result(np.log(a.data), (a,), "log")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, g / a.data)
    return out


def tanh(a: Tensor) -> Tensor:
    val = np.tanh(a.data)
    out = _result(val, (a,), "tanh")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, g * (1.0 - val * val))
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = _result(a.data * mask, (a,), "relu")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, g * mask)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = _result(0.5 * x * (1.0 + t), (a,), "gelu")
    if out.requires_grad:
        def backward(g):
            d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
            local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
            _accumulate(a, g * local)
        out._backward = backward
    return out


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or no generator is given."""
    if p <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    return mul(a, Tensor(keep))


# -------------------------------------------------------------- shape algebra
def reshape(a: Tensor, shape) -> Tensor:
    out = _result(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, g.reshape(a.shape))
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    out = _result(np.transpose(a.data, axes), (a,), "transpose")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, np.transpose(g, inverse))
    return out


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, slice, type(Ellipsis), type(None))) for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    out = _result(a.data[index], (a,), "getitem")
    if out.requires_grad:
        basic = _is_basic_index(index)

        def backward(g):
            full = np.zeros_like(a.data)
            if basic:
                full[index] = g
            else:
                np.add.at(full, index, g)
            _accumulate(a, full)
        out._backward = backward
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat")
    if out.requires_grad:
        bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

        def backward(g):
            for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
                _accumulate(t, piece)
        out._backward = backward
    return out


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g, a.shape).copy())
        out._backward = backward
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


# ------------------------------------------------------------- linear algebra
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = _result(np.matmul(a.data, b.data), (a, b), "matmul")
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
            if b.requires_grad:
                if a.ndim > 2 and b.ndim == 2:
                    a2 = a.data.reshape(-1, a.shape[-1])
                    _accumulate(b, a2.T @ g.reshape(-1, g.shape[-1]))
                else:
                    _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))
        out._backward = backward
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ----------------------------------------------------------- normalisations
def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _result(y, (x,), "softmax")
    if out.requires_grad:
        def backward(g):
            _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))
        out._backward = backward
    return out


def log_softmax_rows(x: Tensor) -> Tensor:
    m = x.data.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=-1, keepdims=True))
    y = x.data - lse
    out = _result(y, (x,), "log_softmax")
    if out.requires_grad:
        def backward(g):
            _accumulate(x, g - np.exp(y) * g.sum(axis=-1, keepdims=True))
        out._backward = backward
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit (population) variance, then affine."""
    if x.shape[-1] < 2:
        raise DimensionError(f"layer_norm needs at least 2 features, got shape {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = _result(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm")
    if out.requires_grad:
        def backward(g):
            if gain.requires_grad:
                _accumulate(gain, (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
            if bias.requires_grad:
                _accumulate(bias, g.reshape(-1, x.shape[-1]).sum(axis=0))
            if x.requires_grad:
                dxhat = g * gain.data
                dx = inv_std * (
                    dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
                )
                _accumulate(x, dx)
        out._backward = backward
    return out


# ------------------------------------------------------------------ gathering
def embedding_lookup(table: Tensor, index) -> Tensor:
    """Select rows of ``table``; gradients scatter-add back into those rows."""
    idx = np.asarray(index)
    if idx.dtype.kind not in "iu":
        raise TypeError("embedding index must be integer")
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise IndexError(f"embedding index out of range for table with {vocab} rows")
    out = _result(table.data[idx], (table,), "embedding")
    if out.requires_grad:
        def backward(g):
            full = np.zeros_like(table.data)
            np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
            _accumulate(table, full)
        out._backward = backward
    return out


def mean_pool_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean over the row axis (-2), optionally over ``mask``-selected rows only.

    Each column is summed in sorted order, so the result is bit-identical
    under any permutation of the rows.
    """
    if x.ndim < 2 or x.shape[-2] < 1:
        raise DimensionError(f"mean_pool_rows needs at least one row, got shape {x.shape}")
    if mask is None:
        weights = np.ones(x.shape[:-1], dtype=x.data.dtype)
    else:
        weights = np.asarray(mask, dtype=x.data.dtype)
    counts = weights.sum(axis=-1, keepdims=True)
    if np.any(counts <= 0):
        raise ValueError("mean_pool_rows: every sequence needs at least one unmasked row")
    masked = x.data * weights[..., None]
    total = np.sort(masked, axis=-2).sum(axis=-2)
    out = _result(total / counts, (x,), "mean_pool")
    if out.requires_grad:
        def backward(g):
            _accumulate(x, (g / counts)[..., None, :] * weights[..., None])
        out._backward = backward
    return out


# --------------------------------------------------------------------- losses
def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B, C] logits, got {logits.shape}")
    batch, n_classes = logits.shape
    if batch < 1 or labels.shape != (batch,):
        raise DimensionError(f"need {batch} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"label out of range for {n_classes} classes")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    rows = np.arange(batch)
    loss = np.mean(lse - z[rows, labels], dtype=np.float64)
    out = _result(np.asarray(loss, dtype=z.dtype), (logits,), "cross_entropy")
    if out.requires_grad:
        def backward(g):
            p = np.exp(z - lse[:, None])
            p[rows, labels] -= 1.0
            _accumulate(logits, p * (g / batch))
        out._backward = backward
    return out


def mse(pred: Tensor, target) -> Tensor:
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.data.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"mse length mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size
    out = _result(np.asarray(np.mean(diff * diff, dtype=np.float64), dtype=pred.data.dtype), (pred,), "mse")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(pred, g * 2.0 * diff / n)
    return out


# ------------------------------------------------------------------ optimiser
class AdamW:
    """AdamW with bias correction and decoupled weight decay.

    ``params`` maps a name to a trainable tensor; the name is used in error
    messages and as the key of the moment buffers.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        adamw_step(self.params, self.m, self.v, self.lr, self.beta1, self.beta2,
                   self.eps, self.weight_decay, self.t)


def adamw_step(params: Mapping[str, Tensor], m: dict, v: dict, lr: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0, t: int = 1) -> None:
    """One in-place AdamW update of ``params`` and the moment buffers ``m``, ``v``."""
    if t < 1:
        raise ValueError("step count t must be >= 1")
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"parameter {missing[0]!r} has no gradient")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad
        if weight_decay:
            p.data -= (lr * weight_decay) * p.data
        m[name] = beta1 * m[name] + (1.0 - beta1) * g
        v[name] = beta2 * v[name] + (1.0 - beta2) * (g * g)
        m_hat = m[name] / c1
        v_hat = v[name] / c2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ------------------------------------------------------------- serialisation
MAGIC = b"STFT"
VERSION = 1


def save_tensors(tensors: Mapping[str, np.ndarray | Tensor], path: str | Path) -> None:
    """Write named arrays to the little-endian float32 container format."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, value in tensors.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a tensor container (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        out[name] = arr.astype(np.float32)
    return out


def global_grad_norms(params: Mapping[str, Tensor]) -> dict[str, float]:
    return {k: float(np.sqrt(np.sum(np.square(p.grad, dtype=np.float64)))) if p.grad is not None else 0.0
            for k, p in params.items()}

