"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value flowing through the models is a :class:`Tensor`: a contiguous
row-major float64 array plus the bookkeeping reverse mode needs. Operations
record a graph while gradients are enabled; :func:`backward` walks it once
and then discards it, so each forward pass builds a fresh graph.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Additive mask value for disallowed attention positions. Large enough to
# zero out softmax weight in float64 while keeping every element finite.
MASK_VALUE = -1e9


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, frozen passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense float64 array, optionally tracked by the autodiff graph.

    Values are immutable once produced by an operation; optimizer updates
    replace ``data`` wholesale. ``grad`` is allocated lazily during backward
    and only for tensors with ``requires_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor holds non-finite values (NaN/Inf)")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _node(out_data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result, recording the edge only while grads are enabled."""
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting introduced."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable tensor with ``requires_grad``.

    ``loss`` must be scalar. The recorded graph is released afterwards;
    only leaf gradients survive the call.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to differentiate")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # Discard graph and intermediate grads; leaves keep theirs.
    for node in topo:
        if node._parents:
            node.grad = None
            node._parents = ()
            node._backward = None


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    try:
        out = a.data + b.data
    except ValueError:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    try:
        out = a.data * b.data
    except ValueError:
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        _accumulate(a, g * c)

    return _node(a.data * c, (a,), bwd)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a rank-1 bias along the last dimension."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ValueError(f"bias_add: x {x.shape} incompatible with bias {b.shape}")
    return add(x, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch axes must match."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _node(out, (a, b), bwd)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accumulate(a, np.ascontiguousarray(g.transpose(inv)))

    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view {a.shape} as {shape}")

    def bwd(g):
        _accumulate(a, g.reshape(a.shape))

    return _node(np.ascontiguousarray(out), (a,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ValueError("concat of an empty sequence")
    base = parts[0]
    for p in parts[1:]:
        if p.ndim != base.ndim:
            raise ValueError(
                f"concat: rank mismatch {base.shape} vs {p.shape}")
        for ax in range(base.ndim):
            if ax != axis % base.ndim and p.shape[ax] != base.shape[ax]:
                raise ValueError(
                    f"concat: incompatible shapes {base.shape} and {p.shape} on axis {ax}")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis % base.ndim] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis % base.ndim] = slice(int(lo), int(hi))
            _accumulate(p, g[tuple(sl)])

    return _node(out, tuple(parts), bwd)


def concat_last_dim(parts: Sequence[Tensor]) -> Tensor:
    return concat(parts, axis=-1)


def split_first_dim(a: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Split into consecutive row blocks; block gradients rejoin the parent."""
    sizes = [int(s) for s in sizes]
    if any(s < 0 for s in sizes) or sum(sizes) != a.shape[0]:
        raise ValueError(f"split sizes {sizes} do not cover first dim of {a.shape}")
    outs: list[Tensor] = []
    lo = 0
    for s in sizes:
        lo_c, hi_c = lo, lo + s

        def bwd(g, lo_c=lo_c, hi_c=hi_c):
            full = np.zeros_like(a.data)
            full[lo_c:hi_c] = g
            _accumulate(a, full)

        outs.append(_node(a.data[lo_c:hi_c].copy(), (a,), bwd))
        lo += s
    return outs


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last dimension, numerically stabilised."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accumulate(a, out * (g - dot))

    return _node(out, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accumulate(a, g * (phi + x * pdf))

    return _node(out, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last dimension, then apply learnable gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        _accumulate(bias, g.reshape(-1, d).sum(axis=0))
        gh = g * gain.data
        mean_gh = gh.mean(axis=-1, keepdims=True)
        mean_ghx = (gh * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, inv * (gh - mean_gh - xhat * mean_ghx))

    return _node(out, (x, gain, bias), bwd)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``table`` for integer ids."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError(f"embedding ids must be rank 1, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(
            f"embedding id out of range for table with {table.shape[0]} rows")
    out = table.data[idx] if idx.size else np.zeros((0, table.shape[1]))

    def bwd(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g)

    return _node(out, (table,), bwd)


def cross_entropy(logits: Tensor, labels: Sequence[int], ignore_index: int) -> Tensor:
    """Mean token-level cross-entropy; positions labelled ignore_index drop out.

    ``ignore_index`` must name a real vocabulary id (the padding token); a
    label equal to it contributes neither loss nor gradient. With every
    position ignored the result is exactly zero.
    """
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects (seq, vocab) logits, got {logits.shape}")
    vocab = logits.shape[1]
    if not 0 <= ignore_index < vocab:
        raise ValueError(
            f"ignore_index {ignore_index} outside vocabulary of size {vocab}")
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != (logits.shape[0],):
        raise ValueError(
            f"labels shape {lab.shape} does not match sequence length {logits.shape[0]}")
    if lab.size and (lab.min() < 0 or lab.max() >= vocab):
        raise ValueError(f"label id out of range for vocabulary of size {vocab}")

    mask = lab != ignore_index
    count = int(mask.sum())
    if count == 0:
        def bwd_zero(g):
            _accumulate(logits, np.zeros_like(logits.data))
        return _node(np.asarray(0.0), (logits,), bwd_zero)

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1)) + logits.data.max(axis=-1)
    picked = logits.data[np.arange(lab.size), lab]
    loss = float((lse[mask] - picked[mask]).sum() / count)

    def bwd(g):
        p = np.exp(shifted) / np.exp(shifted).sum(axis=-1, keepdims=True)
        p[np.arange(lab.size), lab] -= 1.0
        p[~mask] = 0.0
        _accumulate(logits, p * (float(g) / count))

    return _node(np.asarray(loss), (logits,), bwd)


def sum_all(a: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, np.full_like(a.data, float(g)))

    return _node(np.asarray(a.data.sum()), (a,), bwd)


def op_suite() -> dict[str, Callable]:
    """The differentiable primitives the models are built from."""
    return {
        "matmul": matmul,
        "add": add,
        "mul": mul,
        "bias_add": bias_add,
        "concat_last_dim": concat_last_dim,
        "split_first_dim": split_first_dim,
        "softmax": softmax,
        "layer_norm": layer_norm,
        "gelu": gelu,
        "embedding": embedding,
        "cross_entropy": cross_entropy,
    }


@dataclass
class Parameter:
    """A named model weight; non-trainable parameters never receive grads."""

    name: str
    tensor: Tensor
    trainable: bool = True

    def __post_init__(self):
        self.tensor.requires_grad = self.trainable

    def set_trainable(self, flag: bool) -> None:
        self.trainable = bool(flag)
        self.tensor.requires_grad = self.trainable
        if not flag:
            self.tensor.grad = None


class ParameterRegistry:
    """Ordered, unique-name parameter store shared by a model's components."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def register(self, name: str, data, trainable: bool = True) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, Tensor(data), trainable)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def all(self) -> list[Parameter]:
        return list(self._params.values())

    def trainable(self) -> list[Parameter]:
        return [p for p in self._params.values() if p.trainable]

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.tensor.grad = None
