"""Dense tensors with taped reverse-mode differentiation.

Desk-scale engine: tensors wrap numpy arrays, differentiable ops append
entries to the innermost active ``Tape``, and ``backward`` replays the tape
in reverse, accumulating gradients additively across fan-out. With no tape
active (or no tracked inputs) every op is plain numpy, which keeps frozen
submodels free of bookkeeping.

Parameters and activations are float32 by default; gradient-check suites
construct everything in float64 for precision.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, EmptyLossError, ShapeError

DEFAULT_DTYPE = np.float32

_node_ids = itertools.count()
_tape_stack: list["Tape"] = []


class Tensor:
    """A dense float array plus autodiff bookkeeping.

    ``requires_grad`` marks leaves owned by an optimizer; op outputs inherit
    it whenever a recorded input requires grad. ``grad`` is populated by
    ``backward`` and always matches ``data``'s shape. Tensors are treated as
    immutable once created; only optimizers mutate leaf ``data`` in place,
    between steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; everything routes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(_coerce(other, self), -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class TapeEntry:
    __slots__ = ("output", "inputs", "backward_rule")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], backward_rule: Callable):
        self.output = output
        self.inputs = inputs
        self.backward_rule = backward_rule


class Tape:
    """Ordered record of differentiable operations.

    Entries are appended in execution order, so every operation's inputs
    precede it — the list is topologically sorted by construction.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack.pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise ContractError("tape stack corrupted: exited a tape that is not innermost")
        return False


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def _record(out: Tensor, inputs: Sequence[Tensor], backward_rule: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.entries.append(TapeEntry(out, tuple(inputs), backward_rule))
    return out


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad tensor reachable from ``loss``.

    Gradients accumulate additively across fan-out. ``grad`` is overwritten,
    not accumulated, across separate ``backward`` calls.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {loss.node_id: loss}
    for entry in reversed(tape.entries):
        out_grad = grads.pop(entry.output.node_id, None)
        if out_grad is None:
            continue
        if entry.output.requires_grad:
            entry.output.grad = out_grad
        input_grads = entry.backward_rule(out_grad)
        for tensor, grad in zip(entry.inputs, input_grads):
            if grad is None:
                continue
            holders[tensor.node_id] = tensor
            seen = grads.get(tensor.node_id)
            grads[tensor.node_id] = grad if seen is None else seen + grad
    for node_id, grad in grads.items():
        tensor = holders[node_id]
        if tensor.requires_grad:
            tensor.grad = grad


# ---------------------------------------------------------------------------
# elementwise / arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out = Tensor(a.data + b.data)
    na, nb = a.requires_grad, b.requires_grad

    def rule(g):
        return (
            _unbroadcast(g, a.data.shape) if na else None,
            _unbroadcast(g, b.data.shape) if nb else None,
        )

    return _record(out, (a, b), rule)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out = Tensor(a.data * b.data)
    na, nb = a.requires_grad, b.requires_grad
    a_data, b_data = a.data, b.data

    def rule(g):
        return (
            _unbroadcast(g * b_data, a_data.shape) if na else None,
            _unbroadcast(g * a_data, b_data.shape) if nb else None,
        )

    return _record(out, (a, b), rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    na, nb = a.requires_grad, b.requires_grad
    a_data, b_data = a.data, b.data

    def rule(g):
        ga = gb = None
        if na:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b_data, -1, -2)), a_data.shape)
        if nb:
            gb = _unbroadcast(np.matmul(np.swapaxes(a_data, -1, -2), g), b_data.shape)
        return ga, gb

    return _record(out, (a, b), rule)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0

    def rule(g):
        return (g * mask,)

    return _record(out, (x,), rule)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(x.data * sig)
    x_data = x.data

    def rule(g):
        return (g * (sig * (1.0 + x_data * (1.0 - sig))),)

    return _record(out, (x,), rule)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = Tensor(t)

    def rule(g):
        return (g * (1.0 - t * t),)

    return _record(out, (x,), rule)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(np.reshape(x.data, shape))
    orig = x.data.shape

    def rule(g):
        return (np.reshape(g, orig),)

    return _record(out, (x,), rule)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(np.transpose(x.data, axes))
    inverse = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))

    def rule(g):
        return (np.transpose(g, inverse),)

    return _record(out, (x,), rule)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or length < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] exceeds extent {x.shape[axis]} of {x.shape}")
    index = tuple(slice(None) if d != axis else slice(start, start + length) for d in range(x.ndim))
    out = Tensor(x.data[index])
    full_shape = x.data.shape

    def rule(g):
        grad = np.zeros(full_shape, dtype=g.dtype)
        grad[index] = g
        return (grad,)

    return _record(out, (x,), rule)


def take(x: Tensor, indices, axis: int) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(np.take(x.data, idx, axis=axis))
    full_shape = x.data.shape

    def rule(g):
        grad = np.zeros(full_shape, dtype=g.dtype)
        expanded = tuple(slice(None) if d != axis else idx for d in range(len(full_shape)))
        np.add.at(grad, expanded, g)
        return (grad,)

    return _record(out, (x,), rule)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    extents = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + extents)
    needs = [t.requires_grad for t in tensors]

    def rule(g):
        pieces = []
        for i, need in enumerate(needs):
            if not need:
                pieces.append(None)
                continue
            index = tuple(
                slice(None) if d != axis else slice(offsets[i], offsets[i + 1]) for d in range(g.ndim)
            )
            pieces.append(g[index])
        return tuple(pieces)

    return _record(out, tuple(tensors), rule)


def embedding(table: Tensor, indices) -> Tensor:
    """Row gather: out[..., :] = table[indices[...], :]."""
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(table.data[idx])
    table_shape = table.data.shape

    def rule(g):
        grad = np.zeros(table_shape, dtype=g.dtype)
        np.add.at(grad, idx, g)
        return (grad,)

    return _record(out, (table,), rule)


# ---------------------------------------------------------------------------
# reductions and normalizations
# ---------------------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims))
    shape = x.data.shape

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        grad = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(grad, shape).copy(),)

    return _record(out, (x,), rule)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of bounds for shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    y = exp / np.sum(exp, axis=axis, keepdims=True)
    out = Tensor(y)

    def rule(g):
        inner = np.sum(g * y, axis=axis, keepdims=True)
        return ((g - inner) * y,)

    return _record(out, (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must be ({d},), got {gain.shape} and {bias.shape}")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data)
    nx, ng, nb = x.requires_grad, gain.requires_grad, bias.requires_grad
    gain_data = gain.data
    lead = tuple(range(x.ndim - 1))

    def rule(g):
        gx = gg = gb = None
        if ng:
            gg = np.sum(g * xhat, axis=lead)
        if nb:
            gb = np.sum(g, axis=lead)
        if nx:
            dxhat = g * gain_data
            m1 = np.mean(dxhat, axis=-1, keepdims=True)
            m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        return gx, gg, gb

    return _record(out, (x, gain, bias), rule)


def cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean next-token negative log-likelihood over masked-in positions.

    ``logits`` is [T, V]; ``targets`` length-T integer indices; ``mask`` a
    length-T boolean sequence selecting supervised positions. Log-sum-exp
    stabilized. Raises EmptyLossError when nothing is masked in.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [T, V] logits, got {logits.shape}")
    t_len, vocab = logits.shape
    idx = np.asarray(targets, dtype=np.int64)
    keep = np.asarray(mask, dtype=bool)
    if idx.shape != (t_len,) or keep.shape != (t_len,):
        raise ShapeError(
            f"targets/mask must be length {t_len}, got {idx.shape} and {keep.shape}"
        )
    if np.any((idx < 0) | (idx >= vocab)):
        bad = int(np.argmax((idx < 0) | (idx >= vocab)))
        raise ContractError(f"target index {idx[bad]} at position {bad} outside vocab of {vocab}")
    kept = int(keep.sum())
    if kept == 0:
        raise EmptyLossError("cross_entropy over a fully masked-out batch")
    shifted = logits.data - np.max(logits.data, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1)) + np.max(logits.data, axis=-1)
    nll = lse - logits.data[np.arange(t_len), idx]
    out = Tensor(np.asarray(np.sum(nll * keep) / kept, dtype=logits.data.dtype))
    logits_data = logits.data

    def rule(g):
        probs = np.exp(shifted)
        probs /= np.sum(probs, axis=-1, keepdims=True)
        probs[np.arange(t_len), idx] -= 1.0
        probs *= (keep / kept)[:, None]
        return (probs * g,)

    return _record(out, (logits,), rule)
