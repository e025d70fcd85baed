"""Reverse-mode automatic differentiation over dense numpy arrays.

Small tape engine: every op computes its forward result eagerly and, when a
tape is active and some input requires gradients, appends a backward closure
to the tape. ``Tape.backward`` walks the closures in reverse execution order,
which is a valid topological order by construction, and accumulates gradients
additively into every tensor on the path.

Only the shapes the graph blocks need are supported (1-D and 2-D, no general
broadcasting). Everything runs in float64; determinism is bitwise for a fixed
op sequence.
"""

from __future__ import annotations

import os
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

# Debug switch: verify every op output is finite. Costs one pass per op.
CHECK_FINITE = bool(os.environ.get("QGNAS_CHECK_FINITE"))

ACTIVATION_KINDS = (
    "none",
    "sigmoid",
    "tanh",
    "softplus",
    "relu",
    "leaky_relu",
    "relu6",
    "elu",
)

_LEAKY_SLOPE = 0.01  # slope of the leaky_relu activation candidate
_ELU_ALPHA = 1.0


class Tensor:
    """A dense array plus an optional gradient buffer.

    ``grad`` is allocated lazily on first accumulation and persists until the
    caller clears it, so gradients add up across backward calls.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def parameter(data, rng: np.random.Generator | None = None) -> Tensor:
    """Wrap an array as a trainable leaf."""
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def detach(t: Tensor) -> Tensor:
    """A view of the same values that no gradient flows through."""
    return Tensor(t.data, requires_grad=False)


_STACK = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STACK, "stack", None)
    if stack is None:
        stack = []
        _STACK.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of backward closures for one forward pass."""

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and propagate to every recorded tensor."""
        if loss.data.ndim != 0:
            raise ValueError("backward expects a scalar loss, got shape %r" % (loss.shape,))
        if loss.grad is None:
            loss.grad = np.zeros_like(loss.data)
        loss.grad += 1.0
        for out, fn in reversed(self._nodes):
            if out.grad is not None:
                fn(out.grad)


def record(out: Tensor, inputs: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    """Register a custom op on the active tape.

    Marks ``out`` as requiring grad when any tensor input does, so later ops
    keep the chain alive. No-op outside a tape (pure inference).
    """
    if CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite values in op output")
    tape = active_tape()
    if tape is None:
        return out
    if any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._nodes.append((out, backward))
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# ---------------------------------------------------------------------------
# elementwise and linear ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return record(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data)

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return record(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return record(out, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python float constant."""
    c = float(c)
    out = Tensor(x.data * c)

    def bw(g):
        _accum(x, g * c)

    return record(out, (x,), bw)


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply a tensor by a scalar tensor (0-d), differentiable in both."""
    if s.data.ndim != 0:
        raise ValueError("scale_by expects a 0-d scalar tensor")
    out = Tensor(x.data * s.data)

    def bw(g):
        _accum(x, g * s.data)
        _accum(s, np.asarray((g * x.data).sum(), dtype=DTYPE))

    return record(out, (x, s), bw)


def add_n(terms: Sequence[Tensor]) -> Tensor:
    """Sum a non-empty list of same-shape tensors."""
    if not terms:
        raise ValueError("add_n needs at least one term")
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return acc


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return record(out, (a, b), bw)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def bw(g):
        _accum(x, g.reshape(x.data.shape))

    return record(out, (x,), bw)


def matvec(a: Tensor, w: Tensor) -> Tensor:
    """[n, k] @ [k] -> [n]."""
    return reshape(matmul(a, reshape(w, (-1, 1))), (-1,))


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows by integer index; duplicate indices accumulate on backward."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(x.data[idx])

    def bw(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, idx, g)

    return record(out, (x,), bw)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError(f"concat_cols shape mismatch {a.shape} vs {b.shape}")
    na = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))

    def bw(g):
        _accum(a, g[:, :na])
        _accum(b, g[:, na:])

    return record(out, (a, b), bw)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of a matrix by scalar s[i]."""
    if x.ndim != 2 or s.ndim != 1 or x.shape[0] != s.shape[0]:
        raise ValueError(f"scale_rows shape mismatch {x.shape} vs {s.shape}")
    out = Tensor(x.data * s.data[:, None])

    def bw(g):
        _accum(x, g * s.data[:, None])
        _accum(s, (g * x.data).sum(axis=1))

    return record(out, (x, s), bw)


def row_sum(x: Tensor) -> Tensor:
    """[n, k] -> [n], summing along axis 1."""
    if x.ndim != 2:
        raise ValueError("row_sum expects a matrix")
    out = Tensor(x.data.sum(axis=1))

    def bw(g):
        _accum(x, np.repeat(g[:, None], x.shape[1], axis=1))

    return record(out, (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum()))

    def bw(g):
        _accum(x, np.full_like(x.data, float(g)))

    return record(out, (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


def dot_const(x: Tensor, w: np.ndarray) -> Tensor:
    """Scalar <x, w> against a constant weight vector."""
    w = np.asarray(w, dtype=DTYPE)
    if x.shape != w.shape:
        raise ValueError(f"dot_const shape mismatch {x.shape} vs {w.shape}")
    out = Tensor(np.asarray(np.dot(x.data, w)))

    def bw(g):
        _accum(x, g * w)

    return record(out, (x,), bw)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x: Tensor, kind: str) -> Tensor:
    """One of the fixed activation candidates, applied elementwise."""
    d = x.data
    if kind == "none":
        return x
    if kind == "sigmoid":
        y = _sigmoid(d)
        deriv = y * (1.0 - y)
    elif kind == "tanh":
        y = np.tanh(d)
        deriv = 1.0 - y * y
    elif kind == "softplus":
        y = np.logaddexp(0.0, d)
        deriv = _sigmoid(d)
    elif kind == "relu":
        y = np.maximum(d, 0.0)
        deriv = (d > 0).astype(DTYPE)
    elif kind == "leaky_relu":
        y = np.where(d > 0, d, _LEAKY_SLOPE * d)
        deriv = np.where(d > 0, 1.0, _LEAKY_SLOPE)
    elif kind == "relu6":
        y = np.minimum(np.maximum(d, 0.0), 6.0)
        deriv = ((d > 0) & (d < 6)).astype(DTYPE)
    elif kind == "elu":
        y = np.where(d > 0, d, _ELU_ALPHA * (np.exp(np.minimum(d, 0.0)) - 1.0))
        deriv = np.where(d > 0, 1.0, _ELU_ALPHA * np.exp(np.minimum(d, 0.0)))
    else:
        raise ValueError(f"unknown activation {kind!r}")
    out = Tensor(y)

    def bw(g):
        _accum(x, g * deriv)

    return record(out, (x,), bw)


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    """Leaky rectifier with an explicit slope (attention scores use 0.2)."""
    d = x.data
    out = Tensor(np.where(d > 0, d, slope * d))

    def bw(g):
        _accum(x, g * np.where(d > 0, 1.0, slope))

    return record(out, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(DTYPE) / (1.0 - p)
    out = Tensor(x.data * keep)

    def bw(g):
        _accum(x, g * keep)

    return record(out, (x,), bw)


# ---------------------------------------------------------------------------
# segment ops over edge lists
# ---------------------------------------------------------------------------


def _segment_layout(targets: np.ndarray, n: int):
    """Stable order by target plus [start, end) offsets per segment."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= n):
        raise IndexError("segment target index out of range")
    if targets.size == 0 or np.all(targets[:-1] <= targets[1:]):
        order = None
        sorted_t = targets
    else:
        order = np.argsort(targets, kind="stable")
        sorted_t = targets[order]
    starts = np.searchsorted(sorted_t, np.arange(n), side="left")
    ends = np.searchsorted(sorted_t, np.arange(n), side="right")
    return order, starts, ends


def segment_aggregate(msg: Tensor, targets: np.ndarray, n: int, mode: str) -> Tensor:
    """Reduce per-edge messages onto their target nodes.

    Nodes with no incoming edge get zeros. For ``max`` the gradient goes to
    the per-column argmax edge; ties break toward the lowest edge index.
    """
    if mode not in ("mean", "add", "max"):
        raise ValueError(f"unknown aggregation {mode!r}")
    if msg.ndim != 2:
        raise ValueError("segment_aggregate expects [E, k] messages")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape[0] != msg.shape[0]:
        raise ValueError("one target per message row required")
    order, starts, ends = _segment_layout(targets, n)
    data = msg.data if order is None else msg.data[order]
    counts = (ends - starts).astype(DTYPE)
    nonempty = counts > 0
    k = msg.shape[1]
    out_data = np.zeros((n, k), dtype=DTYPE)

    if mode in ("mean", "add"):
        if data.shape[0]:
            sums = np.add.reduceat(data, starts[nonempty], axis=0) if nonempty.any() else None
            # reduceat folds runs between consecutive offsets; empty segments
            # were filtered out so each row is one true segment sum
            if sums is not None:
                out_data[nonempty] = sums
        if mode == "mean":
            out_data[nonempty] /= counts[nonempty, None]
        out = Tensor(out_data)

        def bw(g):
            if not msg.requires_grad:
                return
            per_edge = g[targets]
            if mode == "mean":
                per_edge = per_edge / counts[targets][:, None]
            _accum(msg, per_edge)

        return record(out, (msg,), bw)

    # max: reduceat would mis-handle empty runs, do segments explicitly
    winners = np.zeros((int(nonempty.sum()), k), dtype=np.int64)
    rows = np.nonzero(nonempty)[0]
    for i, node in enumerate(rows):
        block = data[starts[node]:ends[node]]
        am = np.argmax(block, axis=0)  # first occurrence = lowest edge index
        out_data[node] = block[am, np.arange(k)]
        src_rows = np.arange(starts[node], ends[node])
        winner_rows = src_rows[am]
        winners[i] = winner_rows if order is None else order[winner_rows]
    out = Tensor(out_data)

    def bw(g):
        if not msg.requires_grad:
            return
        if msg.grad is None:
            msg.grad = np.zeros_like(msg.data)
        cols = np.arange(k)
        for i, node in enumerate(rows):
            msg.grad[winners[i], cols] += g[node]

    return record(out, (msg,), bw)


def segment_softmax(scores: Tensor, targets: np.ndarray, n: int) -> Tensor:
    """Softmax of per-edge scores within each target segment.

    Stabilised by subtracting the per-segment maximum before exponentiation.
    """
    if scores.ndim != 1:
        raise ValueError("segment_softmax expects a 1-D score vector")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape[0] != scores.shape[0]:
        raise ValueError("one target per score required")
    order, starts, ends = _segment_layout(targets, n)
    nonempty = ends > starts
    seg_max = np.zeros(n, dtype=DTYPE)
    data = scores.data if order is None else scores.data[order]
    if data.size and nonempty.any():
        seg_max[nonempty] = np.maximum.reduceat(data, starts[nonempty])
    shifted = np.exp(scores.data - seg_max[targets])
    denom = np.zeros(n, dtype=DTYPE)
    np.add.at(denom, targets, shifted)
    p = shifted / denom[targets]
    out = Tensor(p)

    def bw(g):
        if not scores.requires_grad:
            return
        weighted = np.zeros(n, dtype=DTYPE)
        np.add.at(weighted, targets, g * p)
        _accum(scores, p * (g - weighted[targets]))

    return record(out, (scores,), bw)


# ---------------------------------------------------------------------------
# losses and probability heads
# ---------------------------------------------------------------------------


def softmax1d(x: Tensor) -> Tensor:
    if x.ndim != 1:
        raise ValueError("softmax1d expects a vector")
    e = np.exp(x.data - x.data.max())
    p = e / e.sum()
    out = Tensor(p)

    def bw(g):
        _accum(x, p * (g - float(np.dot(g, p))))

    return record(out, (x,), bw)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean CE over masked rows, labels as class indices."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask in softmax_cross_entropy")
    rows = np.nonzero(mask)[0]
    labels = np.asarray(labels, dtype=np.int64)[rows]
    z = logits.data[rows]
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    loss = float((lse - z[np.arange(rows.size), labels]).mean())
    out = Tensor(np.asarray(loss))

    def bw(g):
        if not logits.requires_grad:
            return
        soft = np.exp(z - m)
        soft /= soft.sum(axis=1, keepdims=True)
        soft[np.arange(rows.size), labels] -= 1.0
        if logits.grad is None:
            logits.grad = np.zeros_like(logits.data)
        logits.grad[rows] += soft * (float(g) / rows.size)

    return record(out, (logits,), bw)


def sigmoid_binary_cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean elementwise BCE over masked rows, targets multi-hot in {0, 1}."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask in sigmoid_binary_cross_entropy")
    rows = np.nonzero(mask)[0]
    z = logits.data[rows]
    y = np.asarray(targets, dtype=DTYPE)[rows]
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = float(per.mean())
    out = Tensor(np.asarray(loss))

    def bw(g):
        if not logits.requires_grad:
            return
        if logits.grad is None:
            logits.grad = np.zeros_like(logits.data)
        logits.grad[rows] += (_sigmoid(z) - y) * (float(g) / per.size)

    return record(out, (logits,), bw)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def gradient_check(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    eps: float = 1e-6,
) -> float:
    """Compare tape gradients with central finite differences.

    ``fn`` must rebuild the scalar loss from the current parameter values on
    every call. Returns the worst relative error over the probed coordinates,
    |a - n| / max(|a|, |n|, eps).
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
        tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idxs = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            ana = a.reshape(-1)[i]
            rel = abs(ana - numeric) / max(abs(ana), abs(numeric), eps)
            worst = max(worst, rel)
    return worst
