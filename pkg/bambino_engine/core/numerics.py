"""
numerics.py
===========
Dense float64 arrays with tape-based reverse-mode differentiation, plus Adam.

Every objective in the engine (next-token cross-entropy, the clipped PPO
surrogate, the value regression) is built from the primitives below. Ops
record themselves on the active ComputationTape only when one is open and at
least one input requires a gradient; outside a tape they are plain numpy.

Usage:
    with ComputationTape() as tape:
        loss = cross_entropy_next_token(logits, targets, ignore_index=PAD)
    backward(loss, tape)
    adam_step(params, opt)

Gradient rules follow the standard matrix-calculus identities; layer norm and
GELU (tanh form) match the definitions used in GPT-2 style decoders.
"""

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import (
    DegenerateBatchError, DimensionError, DuplicateParameterError, OptimizerPreconditionError,
    RankError,
)

DTYPE = np.float64
MASK_VALUE = -1e30
LAYER_NORM_EPS = 1e-5
GELU_C = math.sqrt(2.0 / math.pi)


# ── Arrays ─────────────────────────────────────────────────────

class DenseArray:
    """Shaped float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def zeros(cls, *shape: int, requires_grad: bool = False, name: str = "") -> "DenseArray":
        return cls(np.zeros(shape, dtype=DTYPE), requires_grad, name)

    @classmethod
    def from_values(cls, shape: Sequence[int], values: Sequence[float],
                    requires_grad: bool = False) -> "DenseArray":
        if math.prod(shape) != len(values):
            raise DimensionError(
                f"{len(values)} values cannot fill shape {tuple(shape)}")
        return cls(np.asarray(values, dtype=DTYPE).reshape(tuple(shape)), requires_grad)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> List[float]:
        """Row-major flat view as a list."""
        return self.data.ravel().tolist()

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"DenseArray(shape={self.shape}{flag})"

    def __add__(self, other): return add(self, _lift(other))
    def __radd__(self, other): return add(_lift(other), self)
    def __sub__(self, other): return sub(self, _lift(other))
    def __rsub__(self, other): return sub(_lift(other), self)
    def __mul__(self, other): return mul(self, _lift(other))
    def __rmul__(self, other): return mul(_lift(other), self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)


def _lift(x) -> DenseArray:
    return x if isinstance(x, DenseArray) else DenseArray(x)


# ── Tape ───────────────────────────────────────────────────────

@dataclass
class TapeNode:
    op: str
    inputs: Tuple[DenseArray, ...]
    output: DenseArray
    backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


class ComputationTape:
    """
    Ordered record of primitive ops. Use as a context manager; nested tapes
    shadow outer ones. A tape belongs to the thread that opened it.
    """

    def __init__(self, record_visits: bool = False):
        self.nodes: List[TapeNode] = []
        self.visits: Optional[List[int]] = [] if record_visits else None

    def __enter__(self) -> "ComputationTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Optional[ComputationTape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_tape():
    """Run ops untracked even inside an open tape."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def _record(op: str, inputs: Tuple[DenseArray, ...], out_data: np.ndarray,
            backward_fn: Callable) -> DenseArray:
    out = DenseArray.__new__(DenseArray)
    out.data = out_data
    out.grad = None
    out.name = op
    tape = active_tape()
    out.requires_grad = tape is not None and any(x.requires_grad for x in inputs)
    if out.requires_grad:
        tape.nodes.append(TapeNode(op, inputs, out, backward_fn))
    return out


def backward(loss: DenseArray, tape: ComputationTape) -> None:
    """
    Reverse sweep over `tape` seeded with d(loss)/d(loss) = 1.

    Leaf gradients accumulate into `.grad` across calls; intermediate arrays
    get their gradient from this sweep only.
    """
    if loss.ndim != 0:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")

    produced = {id(n.output) for n in tape.nodes}
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if id(loss) not in produced and loss.requires_grad:
        loss.grad = grads[id(loss)] if loss.grad is None else loss.grad + 1.0
        return

    for index in range(len(tape.nodes) - 1, -1, -1):
        node = tape.nodes[index]
        if tape.visits is not None:
            tape.visits.append(index)
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad = g
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in produced:
                grads[key] = grads[key] + gi if key in grads else gi
            else:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ── Elementwise ────────────────────────────────────────────────

def add(a: DenseArray, b: DenseArray) -> DenseArray:
    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _record("add", (a, b), a.data + b.data, _bw)


def sub(a: DenseArray, b: DenseArray) -> DenseArray:
    def _bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)
    return _record("sub", (a, b), a.data - b.data, _bw)


def mul(a: DenseArray, b: DenseArray) -> DenseArray:
    def _bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _record("mul", (a, b), a.data * b.data, _bw)


def scale(a: DenseArray, c: float) -> DenseArray:
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def exp(a: DenseArray) -> DenseArray:
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def clip(a: DenseArray, lo: float, hi: float) -> DenseArray:
    inside = (a.data >= lo) & (a.data <= hi)
    return _record("clip", (a,), np.clip(a.data, lo, hi), lambda g: (g * inside,))


def minimum(a: DenseArray, b: DenseArray) -> DenseArray:
    """Elementwise min; ties route the gradient to `a`."""
    if a.shape != b.shape:
        raise DimensionError(f"minimum of shapes {a.shape} and {b.shape}")
    take_a = a.data <= b.data
    def _bw(g):
        return g * take_a, g * ~take_a
    return _record("minimum", (a, b), np.where(take_a, a.data, b.data), _bw)


def gelu(x: DenseArray) -> DenseArray:
    u = GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)
    def _bw(g):
        du = GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)
    return _record("gelu", (x,), out, _bw)


# ── Reductions and shape ops ───────────────────────────────────

def sum_all(a: DenseArray) -> DenseArray:
    return _record("sum", (a,), np.asarray(a.data.sum()),
                   lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: DenseArray) -> DenseArray:
    n = a.data.size
    return _record("mean", (a,), np.asarray(a.data.mean()),
                   lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def reshape(a: DenseArray, shape: Sequence[int]) -> DenseArray:
    return _record("reshape", (a,), a.data.reshape(tuple(shape)),
                   lambda g: (g.reshape(a.shape),))


def transpose(a: DenseArray, axes: Optional[Sequence[int]] = None) -> DenseArray:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", (a,), a.data.transpose(axes),
                   lambda g: (g.transpose(inverse),))


def concat(arrays: Sequence[DenseArray], axis: int = 0) -> DenseArray:
    arrays = tuple(arrays)
    out = np.concatenate([x.data for x in arrays], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return _record("concat", arrays, out,
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_axis(a: DenseArray, start: int, stop: int, axis: int = -1) -> DenseArray:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    def _bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)
    return _record("slice", (a,), a.data[index].copy(), _bw)


def gather(a: DenseArray, index) -> DenseArray:
    """Advanced-index read `a[index]`; repeated indices accumulate on the way back."""
    def _bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)
    return _record("gather", (a,), a.data[index].copy(), _bw)


# ── Linear algebra ─────────────────────────────────────────────

def matmul(a: DenseArray, b: DenseArray) -> DenseArray:
    """
    Matrix product. Rank-2 operands are the core case; extra leading
    dimensions are treated as batch dimensions with numpy broadcasting.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    def _bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _record("matmul", (a, b), a.data @ b.data, _bw)


def embedding(weight: DenseArray, ids: np.ndarray) -> DenseArray:
    """Gather rows of `weight` for integer `ids` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    def _bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        return (full,)
    return _record("embedding", (weight,), weight.data[ids], _bw)


def layer_norm(x: DenseArray, weight: DenseArray, bias: DenseArray,
               eps: float = LAYER_NORM_EPS) -> DenseArray:
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    n = x.shape[-1]
    def _bw(g):
        dxhat = g * weight.data
        dx = inv_std / n * (n * dxhat
                            - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, weight.shape), _unbroadcast(g, bias.shape)
    return _record("layer_norm", (x, weight, bias), xhat * weight.data + bias.data, _bw)


# ── Softmax family ─────────────────────────────────────────────

def _stable_softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(a: DenseArray) -> DenseArray:
    """Softmax over the last axis with max subtraction."""
    s = _stable_softmax(a.data)
    def _bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)
    return _record("softmax", (a,), s, _bw)


def log_softmax(a: DenseArray) -> DenseArray:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    def _bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)
    return _record("log_softmax", (a,), out, _bw)


def causal_mask(scores: DenseArray) -> DenseArray:
    """Set entries with key index j > query index i to MASK_VALUE."""
    t_q, t_k = scores.shape[-2:]
    future = np.triu(np.ones((t_q, t_k), dtype=bool), k=1)
    return _record("causal_mask", (scores,),
                   np.where(future, MASK_VALUE, scores.data),
                   lambda g: (np.where(future, 0.0, g),))


def cross_entropy_next_token(logits: DenseArray, targets, ignore_index: int) -> DenseArray:
    """
    Mean negative log-probability of `targets` under `logits` [..., V],
    skipping positions equal to `ignore_index`.
    """
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(
            f"targets of shape {targets.shape} do not match logits {logits.shape}")
    keep = targets != ignore_index
    if np.any((targets[keep] < 0) | (targets[keep] >= vocab)):
        raise DimensionError(f"target id outside [0, {vocab})")
    count = int(keep.sum())
    if count == 0:
        raise DegenerateBatchError("every target position is ignored")

    flat = logits.data.reshape(-1, vocab)
    flat_targets = np.where(keep, targets, 0).reshape(-1)
    flat_keep = keep.reshape(-1)
    shifted = flat - flat.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    rows = np.arange(flat.shape[0])
    picked = logp[rows, flat_targets]
    loss = -picked[flat_keep].sum() / count

    def _bw(g):
        grad = np.exp(logp)
        grad[rows, flat_targets] -= 1.0
        grad *= (flat_keep / count)[:, None] * g
        return (grad.reshape(logits.shape),)
    return _record("cross_entropy", (logits,), np.asarray(loss), _bw)


# ── Parameters and optimizer ───────────────────────────────────

class ParameterSet:
    """Ordered, uniquely named collection of trainable arrays."""

    def __init__(self):
        self._entries: Dict[str, DenseArray] = {}

    def add(self, name: str, array: DenseArray) -> DenseArray:
        if name in self._entries:
            raise DuplicateParameterError(f"duplicate parameter name {name!r}")
        array.requires_grad = True
        array.name = name
        self._entries[name] = array
        return array

    def __getitem__(self, name: str) -> DenseArray:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    @property
    def num_values(self) -> int:
        return sum(p.data.size for p in self._entries.values())

    def zero_grad(self) -> None:
        for p in self._entries.values():
            p.zero_grad()

    def grad_norm(self) -> float:
        total = 0.0
        for name, p in self._entries.items():
            if p.grad is None:
                raise OptimizerPreconditionError(f"parameter {name!r} has no gradient")
            total += float((p.grad ** 2).sum())
        return math.sqrt(total)

    def clip_grad_norm(self, max_norm: float) -> float:
        """Scale all grads so their global L2 norm is at most max_norm; return the pre-clip norm."""
        norm = self.grad_norm()
        if norm > max_norm:
            factor = max_norm / (norm + 1e-12)
            for p in self._entries.values():
                p.grad *= factor
        return norm


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParameterSet, **hyper) -> "AdamState":
        state = cls(**hyper)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params: ParameterSet, state: AdamState) -> None:
    """Bias-corrected Adam update in place. Gradients are left for the caller to reset."""
    for name, p in params.items():
        if p.grad is None:
            raise OptimizerPreconditionError(f"parameter {name!r} has no gradient")
        if name not in state.m or state.m[name].shape != p.shape:
            raise OptimizerPreconditionError(
                f"optimizer state does not match parameter {name!r} of shape {p.shape}")

    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * p.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * p.grad ** 2
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ── Gradient checking ──────────────────────────────────────────

def numerical_gradient(fn: Callable[[], float], array: DenseArray,
                       h: float = 1e-6, indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central differences of scalar `fn()` w.r.t. the flat entries of `array` (all, or `indices`)."""
    flat = array.data.reshape(-1)
    picks = range(flat.size) if indices is None else indices
    out = np.zeros(len(picks))
    for i, k in enumerate(picks):
        saved = flat[k]
        flat[k] = saved + h
        up = fn()
        flat[k] = saved - h
        down = fn()
        flat[k] = saved
        out[i] = (up - down) / (2 * h)
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """max |a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from dominating."""
    analytic = np.asarray(analytic, dtype=DTYPE).ravel()
    numeric = np.asarray(numeric, dtype=DTYPE).ravel()
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))
