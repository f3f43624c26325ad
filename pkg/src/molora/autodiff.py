"""Dense float64 matrix algebra with a reverse-mode gradient tape.

Values are plain 2-D C-contiguous float64 numpy arrays throughout; ``as_matrix``
is the validating constructor. Differentiation is define-by-run: every
``GradTape`` method both computes its result and records how to push gradients
back, so ``backward`` is a single reverse sweep over the recorded ops (the
record order is already topological). A tape is single-owner and single-shot:
it must not be shared across threads, and a second ``backward`` without a fresh
forward pass raises.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Finite stand-in for -inf in masked attention scores: exp(-1e30) underflows to
# exactly 0.0, so masked positions carry exactly zero weight while every array
# stays finite.
MASK_FILL = -1e30

_TRIL_CACHE: dict[int, np.ndarray] = {}


def _tril_mask(t: int) -> np.ndarray:
    mask = _TRIL_CACHE.get(t)
    if mask is None:
        mask = np.tril(np.ones((t, t), dtype=bool))
        mask.flags.writeable = False
        _TRIL_CACHE[t] = mask
    return mask


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class TapeError(RuntimeError):
    """Gradient-tape misuse (e.g. backward twice on one forward pass)."""


def as_matrix(data) -> np.ndarray:
    """Coerce to a 2-D C-contiguous float64 array and validate finiteness.

    1-D input becomes a single row. Raises ShapeError for >2-D input and
    ValueError for NaN/Inf entries.
    """
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"expected a matrix, got ndim={arr.ndim}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError("matrix entries must be finite")
    return arr


@dataclass
class Param:
    """A named, mutable parameter array.

    ``adapter`` tags parameters that belong to adapter branches so the model
    can flip which half of the parameter set trains in each mode.
    """

    name: str
    value: np.ndarray
    adapter: bool = False

    def __post_init__(self):
        self.value = as_matrix(self.value)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def copy(self) -> "Param":
        return Param(self.name, self.value.copy(), self.adapter)


class Node:
    """One tape entry: a value plus the closure that backpropagates into its inputs."""

    __slots__ = ("value", "grad", "_backward")

    def __init__(self, value: np.ndarray, backward=None):
        self.value = value
        self.grad = None
        self._backward = backward

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def _accumulate(self, g: np.ndarray, own: bool = False) -> None:
        # ``own=True`` transfers ownership of ``g`` (it must be freshly
        # allocated, or the upstream grad of the node being processed, and
        # may be handed to at most one sink); the array will be mutated by
        # later accumulations.
        if self.grad is None:
            self.grad = g if own else g.copy()
        else:
            self.grad += g


def _check_matmul(a: Node, b: Node) -> None:
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.value.shape} @ {b.value.shape}")


def _check_same_shape(op: str, a: Node, b: Node) -> None:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shapes differ, {a.value.shape} vs {b.value.shape}")


class GradTape:
    """Append-only op record with a parameter registry.

    Parameters enter the graph through ``parameter``; frozen ones participate
    in the forward computation but accumulate no gradient. After ``backward``,
    ``grad`` returns an array of the parameter's exact shape for every
    registered parameter (zeros where nothing flowed).
    """

    def __init__(self):
        self._nodes: list[Node] = []
        self._registry: dict[str, Param] = {}
        self._param_nodes: dict[int, tuple[Node, bool]] = {}
        self._consumed = False

    # ---- leaves ------------------------------------------------------------

    def constant(self, value) -> Node:
        return Node(as_matrix(value))

    def parameter(self, param: Param, trainable: bool = True) -> Node:
        """Bind a parameter into this graph, registering it for gradient lookup.

        Repeated binds of the same parameter return the same node (so tied
        weights accumulate into one gradient); the trainable flag must not
        change between binds within one tape.
        """
        key = id(param)
        if key in self._param_nodes:
            node, was_trainable = self._param_nodes[key]
            if was_trainable != trainable:
                raise TapeError(f"parameter {param.name!r} bound as both trainable and frozen")
            return node
        self._registry[param.name] = param
        node = Node(param.value)
        self._param_nodes[key] = (node, trainable)
        return node

    def _record(self, value: np.ndarray, backward) -> Node:
        node = Node(value, backward)
        self._nodes.append(node)
        return node

    # ---- arithmetic ----------------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        _check_same_shape("add", a, b)

        def backward(g):
            b._accumulate(g)
            a._accumulate(g, own=True)

        return self._record(a.value + b.value, backward)

    def add_bias(self, a: Node, bias: Node) -> Node:
        """Row-broadcast add: (T, d) + (1, d)."""
        if bias.value.shape != (1, a.value.shape[1]):
            raise ShapeError(f"add_bias: bias {bias.value.shape} does not broadcast over {a.value.shape}")

        def backward(g):
            bias._accumulate(g.sum(axis=0, keepdims=True), own=True)
            a._accumulate(g, own=True)

        return self._record(a.value + bias.value, backward)

    def scale(self, a: Node, s: float) -> Node:
        s = float(s)

        def backward(g):
            g *= s
            a._accumulate(g, own=True)

        return self._record(s * a.value, backward)

    def matmul(self, a: Node, b: Node) -> Node:
        _check_matmul(a, b)

        def backward(g):
            a._accumulate(g @ b.value.T, own=True)
            b._accumulate(a.value.T @ g, own=True)

        return self._record(a.value @ b.value, backward)

    def matmul_const(self, a: Node, c: np.ndarray) -> Node:
        """Right-multiply by a constant matrix (no gradient into ``c``)."""
        if a.value.shape[1] != c.shape[0]:
            raise ShapeError(f"matmul: inner dimensions differ, {a.value.shape} @ {c.shape}")

        def backward(g):
            a._accumulate(g @ c.T, own=True)

        return self._record(a.value @ c, backward)

    def transpose(self, a: Node) -> Node:
        def backward(g):
            a._accumulate(g.T, own=True)

        return self._record(a.value.T, backward)

    # ---- slicing and assembly --------------------------------------------------

    def slice_rows(self, a: Node, i0: int, i1: int) -> Node:
        if not 0 <= i0 < i1 <= a.value.shape[0]:
            raise ShapeError(f"slice_rows: [{i0}:{i1}] out of range for {a.value.shape}")

        def backward(g):
            full = np.zeros_like(a.value)
            full[i0:i1] = g
            a._accumulate(full, own=True)

        return self._record(a.value[i0:i1], backward)

    def slice_cols(self, a: Node, j0: int, j1: int) -> Node:
        if not 0 <= j0 < j1 <= a.value.shape[1]:
            raise ShapeError(f"slice_cols: [{j0}:{j1}] out of range for {a.value.shape}")

        def backward(g):
            full = np.zeros_like(a.value)
            full[:, j0:j1] = g
            a._accumulate(full, own=True)

        return self._record(a.value[:, j0:j1], backward)

    def concat_rows(self, parts: list[Node]) -> Node:
        cols = parts[0].value.shape[1]
        for p in parts:
            if p.value.shape[1] != cols:
                raise ShapeError(f"concat_rows: column counts differ, {p.value.shape[1]} vs {cols}")
        splits = np.cumsum([p.value.shape[0] for p in parts])[:-1]

        def backward(g):
            # np.split yields disjoint views of g, so each may be donated.
            for p, piece in zip(parts, np.split(g, splits, axis=0)):
                p._accumulate(piece, own=True)

        return self._record(np.concatenate([p.value for p in parts], axis=0), backward)

    def concat_cols(self, parts: list[Node]) -> Node:
        rows = parts[0].value.shape[0]
        for p in parts:
            if p.value.shape[0] != rows:
                raise ShapeError(f"concat_cols: row counts differ, {p.value.shape[0]} vs {rows}")
        splits = np.cumsum([p.value.shape[1] for p in parts])[:-1]

        def backward(g):
            for p, piece in zip(parts, np.split(g, splits, axis=1)):
                p._accumulate(piece, own=True)

        return self._record(np.concatenate([p.value for p in parts], axis=1), backward)

    def pad_cols(self, a: Node, cols: int) -> Node:
        """Zero-pad on the right to ``cols`` columns."""
        t, k = a.value.shape
        if cols < k:
            raise ShapeError(f"pad_cols: target {cols} smaller than current {k}")
        if cols == k:
            return a
        out = np.zeros((t, cols))
        out[:, :k] = a.value

        def backward(g):
            a._accumulate(g[:, :k], own=True)

        return self._record(out, backward)

    def tile_cols(self, a: Node, reps: int, out_cols: int) -> Node:
        """Repeat the columns ``reps`` times, then truncate to ``out_cols``."""
        t, k = a.value.shape
        if not 1 <= out_cols <= reps * k:
            raise ShapeError(f"tile_cols: cannot produce {out_cols} columns from {k} x {reps}")
        out = np.tile(a.value, (1, reps))[:, :out_cols]

        def backward(g):
            acc = np.zeros_like(a.value)
            for r in range(reps):
                lo = r * k
                if lo >= out_cols:
                    break
                width = min(k, out_cols - lo)
                acc[:, :width] += g[:, lo:lo + width]
            a._accumulate(acc, own=True)

        return self._record(out, backward)

    def reshape(self, a: Node, rows: int, cols: int) -> Node:
        if rows * cols != a.value.size:
            raise ShapeError(f"reshape: {a.value.shape} has {a.value.size} entries, not {rows}x{cols}")
        shape = a.value.shape

        def backward(g):
            a._accumulate(np.ascontiguousarray(g).reshape(shape), own=True)

        return self._record(np.ascontiguousarray(a.value).reshape(rows, cols), backward)

    # ---- nonlinearities ---------------------------------------------------------

    def gelu(self, a: Node) -> Node:
        x = a.value
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

        def backward(g):
            pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
            a._accumulate(g * (cdf + x * pdf), own=True)

        return self._record(x * cdf, backward)

    def layer_norm(self, a: Node, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
        """Per-row normalization with learned (1, d) gain and bias."""
        d = a.value.shape[1]
        if gain.value.shape != (1, d) or bias.value.shape != (1, d):
            raise ShapeError(
                f"layer_norm: gain {gain.value.shape} / bias {bias.value.shape} must be (1, {d})"
            )
        mu = a.value.mean(axis=1, keepdims=True)
        centered = a.value - mu
        var = (centered * centered).mean(axis=1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std

        def backward(g):
            gain._accumulate((g * xhat).sum(axis=0, keepdims=True), own=True)
            bias._accumulate(g.sum(axis=0, keepdims=True), own=True)
            gx = g * gain.value
            # d xhat / d x folded analytically: remove the mean and the
            # projection onto xhat, then rescale.
            a._accumulate(
                inv_std
                * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True)),
                own=True,
            )

        return self._record(xhat * gain.value + bias.value, backward)

    def softmax_rows(self, a: Node) -> Node:
        p = softmax_rows(a.value)

        def backward(g):
            dot = (g * p).sum(axis=1, keepdims=True)
            a._accumulate(p * (g - dot), own=True)

        return self._record(p, backward)

    def causal_mask_fill(self, a: Node) -> Node:
        """Overwrite strictly-upper-triangular entries of a square score matrix.

        Masked entries are replaced (not added to), so the output is invariant
        to whatever the masked scores were.
        """
        t, t2 = a.value.shape
        if t != t2:
            raise ShapeError(f"causal_mask_fill: expected square scores, got {a.value.shape}")
        keep = _tril_mask(t)
        out = np.where(keep, a.value, MASK_FILL)

        def backward(g):
            g *= keep
            a._accumulate(g, own=True)

        return self._record(out, backward)

    def embedding(self, table: Node, ids) -> Node:
        ids = np.asarray(ids, dtype=np.intp)
        if ids.ndim != 1:
            raise ShapeError(f"embedding: ids must be 1-D, got ndim={ids.ndim}")
        n = table.value.shape[0]
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            raise IndexError(f"embedding: id out of range for table with {n} rows")

        def backward(g):
            full = np.zeros_like(table.value)
            np.add.at(full, ids, g)
            table._accumulate(full, own=True)

        return self._record(table.value[ids], backward)

    def cross_entropy(self, logits: Node, targets, weights=None) -> Node:
        """Weighted mean of -log softmax(logits)[t, target_t]; returns a 1x1 node.

        ``weights`` (length T, nonnegative, positive sum) selects and weights
        positions; omitted means plain mean over all T positions.
        """
        t, v = logits.value.shape
        ids = np.asarray(targets, dtype=np.intp)
        if ids.shape != (t,):
            raise ShapeError(f"cross_entropy: {t} logit rows but {ids.shape} targets")
        if ids.size and (ids.min() < 0 or ids.max() >= v):
            raise IndexError(f"cross_entropy: target id out of range [0, {v})")
        if weights is None:
            w = np.ones(t)
        else:
            w = np.asarray(weights, dtype=np.float64)
            if w.shape != (t,):
                raise ShapeError(f"cross_entropy: weights shape {w.shape}, expected ({t},)")
            if np.any(w < 0) or w.sum() <= 0:
                raise ValueError("cross_entropy: weights must be nonnegative with positive sum")
        shifted = logits.value - logits.value.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_p = shifted - log_z
        total_w = w.sum()
        loss = -(w * log_p[np.arange(t), ids]).sum() / total_w
        p = np.exp(log_p)

        def backward(g):
            scale = g[0, 0] / total_w
            d = p * w[:, None]
            d[np.arange(t), ids] -= w
            d *= scale
            logits._accumulate(d, own=True)

        return self._record(np.array([[loss]]), backward)

    # ---- reverse sweep ---------------------------------------------------------

    def backward(self, loss: Node) -> None:
        if self._consumed:
            raise TapeError("backward already ran on this tape; rebuild the forward pass first")
        if loss.value.shape != (1, 1):
            raise ShapeError(f"backward: loss must be 1x1, got {loss.value.shape}")
        self._consumed = True
        loss._accumulate(np.ones((1, 1)), own=True)
        for node in reversed(self._nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)

    def grad(self, param: Param) -> np.ndarray:
        entry = self._param_nodes.get(id(param))
        if entry is None:
            return np.zeros_like(param.value)
        node, trainable = entry
        if not trainable or node.grad is None:
            return np.zeros_like(param.value)
        return node.grad

    def grads(self) -> dict[str, np.ndarray]:
        """Gradient for every registered parameter, zeros where nothing flowed."""
        return {name: self.grad(p) for name, p in self._registry.items()}


# ---- plain-array helpers (no tape) ------------------------------------------


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row softmax with per-row max subtraction; rows sum to 1 within 1e-12."""
    a = np.asarray(a, dtype=np.float64)
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def entropy_nats(probs: np.ndarray) -> float:
    """Shannon entropy of a probability vector in nats, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def rng_stream(seed: int, label: str) -> np.random.Generator:
    """Named substream of a single run seed (stable across runs and platforms)."""
    return np.random.default_rng([int(seed)] + list(label.encode("utf-8")))


def grad_check(fn, params: list[Param], h: float = 1e-4, entries=None) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn(tape)`` must rebuild the scalar loss from the current parameter
    values. ``entries`` is an optional list of (param, flat_index) pairs;
    by default every entry of every parameter is checked. Relative error
    uses denominator max(|analytic|, |numeric|, 1e-8).
    """
    tape = GradTape()
    loss = fn(tape)
    tape.backward(loss)
    analytic = {id(p): tape.grad(p) for p in params}

    def evaluate() -> float:
        out = float(fn(GradTape()).value[0, 0])
        if not math.isfinite(out):
            raise ValueError("grad_check: function evaluated to a non-finite value")
        return out

    if entries is None:
        entries = [(p, i) for p in params for i in range(p.value.size)]
    worst = 0.0
    for param, idx in entries:
        flat = param.value.reshape(-1)
        saved = flat[idx]
        flat[idx] = saved + h
        f_plus = evaluate()
        flat[idx] = saved - h
        f_minus = evaluate()
        flat[idx] = saved
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = analytic[id(param)].reshape(-1)[idx]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
