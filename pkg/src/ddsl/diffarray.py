"""Minimal reverse-mode autodiff over 4-D (batch, channel, height, width) arrays.

Every differentiable value is an :class:`Array4`.  Operations executed while a
:class:`Tape` is active are recorded on that tape together with a backward
rule; ``tape.backward(loss)`` replays them in reverse.  Outside a tape the same
functions run as plain numpy inference.

    with Tape() as tape:
        y = relu(add(x, w))
        loss = sum_all(y)
    tape.backward(loss)
    w.grad  # populated
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

_local = threading.local()
_DEFAULT_DTYPE = np.float32


def default_dtype() -> np.dtype:
    return np.dtype(getattr(_local, "dtype", _DEFAULT_DTYPE))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new parameters and inputs.

    ``with precision(np.float64): ...`` is how gradient checks run.
    """
    prev = getattr(_local, "dtype", _DEFAULT_DTYPE)
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = prev


class Array4:
    """A 4-D array with an optional gradient buffer."""

    __slots__ = ("values", "grad", "requires_grad", "name", "logits", "__weakref__")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(values, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(default_dtype())
        if arr.ndim != 4:
            raise ValueError(f"Array4 needs 4 dims (n, c, h, w), got shape {arr.shape}")
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.logits: Array4 | None = None  # set by sigmoid, for stable log-losses

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.values.shape  # type: ignore[return-value]

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() needs a single-element array, got {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Array4(shape={self.shape}, dtype={self.dtype}{tag})"


def zeros(shape, requires_grad: bool = False, name: str | None = None) -> Array4:
    return Array4(np.zeros(shape, dtype=default_dtype()), requires_grad, name)


def zeros_like(a: Array4) -> Array4:
    return Array4(np.zeros_like(a.values))


def constant(values) -> Array4:
    """Wrap ``values`` (cast to the default dtype) as a non-learnable array."""
    return Array4(np.asarray(values, dtype=default_dtype()))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Array4, inputs: tuple[Array4, ...], backward: BackwardFn):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of one forward pass.

    A tape is activated with ``with Tape() as tape:``; activation is
    thread-local so independent threads never share a tape.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Array4) -> None:
        backward(loss, self)


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_record() -> Iterator[None]:
    """Run ops without recording even if a tape is active."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


@contextlib.contextmanager
def record_patterns() -> Iterator[list]:
    """Collect fingerprints of every piecewise-linear branch choice (relu masks,
    pooling argmaxes) made inside the block.  Two evaluations with equal
    fingerprints lie on the same smooth piece of the function."""
    prev = getattr(_local, "patterns", None)
    _local.patterns = pats = []
    try:
        yield pats
    finally:
        _local.patterns = prev


def note_pattern(choice: np.ndarray) -> None:
    pats = getattr(_local, "patterns", None)
    if pats is not None:
        pats.append(hash(np.ascontiguousarray(choice).tobytes()))


def check_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise FloatingPointError(f"non-finite values produced by {what}")


def record(out_values: np.ndarray, inputs: Sequence[Array4], backward_fn: BackwardFn,
           what: str) -> Array4:
    """Wrap ``out_values`` as an Array4 and record it on the active tape.

    ``backward_fn`` maps the output gradient to one gradient per input (``None``
    for inputs that need none).  Exposed so layers can define fused kernels.
    """
    check_finite(out_values, what)
    needs = any(a.requires_grad for a in inputs)
    out = Array4(out_values, requires_grad=needs)
    tape = active_tape()
    if tape is not None and needs:
        if tape.consumed:
            raise RuntimeError("cannot record on a tape that has already run backward")
        tape.nodes.append(_Node(out, tuple(inputs), backward_fn))
    return out


def _accumulate(a: Array4, g: np.ndarray) -> None:
    if g.shape != a.values.shape:
        raise RuntimeError(f"gradient shape {g.shape} does not match array shape {a.shape}")
    if a.grad is None:
        a.grad = np.array(g, dtype=a.values.dtype, copy=True)
    else:
        a.grad += g


def backward(loss: Array4, tape: Tape) -> None:
    """Populate ``.grad`` on every array reachable from ``loss`` through ``tape``.

    Gradients accumulate into existing ``.grad`` buffers of leaves, so callers
    zero parameter grads between steps.
    """
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward call")
    if loss.shape != (1, 1, 1, 1):
        raise ValueError(f"backward needs a scalar loss of shape (1,1,1,1), got {loss.shape}")
    tape.consumed = True
    # intermediate grads live here; leaves (params, inputs) get them on .grad
    produced = {id(node.out) for node in tape.nodes}
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in produced:
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
            else:
                _accumulate(inp, gi)
    if id(loss) in pending and id(loss) not in produced:
        _accumulate(loss, pending.pop(id(loss)))


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------

def _same_shape(a: Array4, b: Array4, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Array4, b: Array4) -> Array4:
    _same_shape(a, b, "add")
    return record(a.values + b.values, (a, b), lambda g: (g, g), "add")


def mul(a: Array4, b: Array4) -> Array4:
    _same_shape(a, b, "mul")
    av, bv = a.values, b.values
    return record(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a: Array4, c: float) -> Array4:
    return record(a.values * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Array4) -> Array4:
    mask = a.values > 0  # relu'(0) := 0
    note_pattern(mask)
    return record(a.values * mask, (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a: Array4) -> Array4:
    s = _sigmoid(a.values)
    out = record(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")
    out.logits = a
    return out


def elementwise(op: str, a: Array4, b: "Array4 | float | None" = None) -> Array4:
    """Dispatch by name: ``add``, ``mul``, ``relu``, ``sigmoid``, ``scale``."""
    if op == "add":
        return add(a, b)  # type: ignore[arg-type]
    if op == "mul":
        return mul(a, b)  # type: ignore[arg-type]
    if op == "scale":
        return scale(a, float(b))  # type: ignore[arg-type]
    if op == "relu":
        return relu(a)
    if op == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown elementwise op {op!r}")


def concat_channels(parts: Sequence[Array4]) -> Array4:
    if not parts:
        raise ValueError("concat_channels needs at least one part")
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ValueError(
                f"concat_channels: spatial/batch mismatch {parts[0].shape} vs {p.shape}")
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.concatenate([p.values for p in parts], axis=1)

    def back(g):
        return [g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts))]

    return record(out, tuple(parts), back, "concat_channels")


def split_channels(a: Array4, sizes: Sequence[int]) -> list[Array4]:
    """Inverse of :func:`concat_channels` given the part channel counts."""
    if sum(sizes) != a.shape[1]:
        raise ValueError(f"split sizes {list(sizes)} do not sum to {a.shape[1]} channels")
    offsets = np.cumsum([0] + list(sizes))
    outs = []
    for i in range(len(sizes)):
        lo, hi = int(offsets[i]), int(offsets[i + 1])

        def back(g, lo=lo, hi=hi):
            full = np.zeros_like(a.values)
            full[:, lo:hi] = g
            return (full,)

        outs.append(record(a.values[:, lo:hi].copy(), (a,), back, "split_channels"))
    return outs


def sum_all(a: Array4) -> Array4:
    total = a.values.sum(dtype=np.float64).astype(a.dtype).reshape(1, 1, 1, 1)
    return record(total, (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),),
                  "sum_all")


def weighted_sum(terms: Sequence[tuple[float, Array4]]) -> Array4:
    """Scalar combination ``Σ c_k · t_k`` of same-shape arrays."""
    first = terms[0][1]
    for _, t in terms[1:]:
        _same_shape(first, t, "weighted_sum")
    out = sum(c * t.values for c, t in terms)
    coeffs = [c for c, _ in terms]
    return record(np.asarray(out, dtype=first.dtype), tuple(t for _, t in terms),
                  lambda g: [c * g for c in coeffs], "weighted_sum")
