"""Tape-based reverse-mode differentiation over 2-D float64 arrays.

Operations record onto the innermost active :class:`Tape`; outside a tape
they only compute values, which is how finite-difference probes and
evaluation passes run.

    with Tape() as tape:
        loss = total(...)
    tape.backward(loss)      # fills .grad on every requires_grad leaf
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .graph import SparseMatrix

LEAKY_SLOPE = 0.2


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


def _as2d(data) -> np.ndarray:
    a = np.array(data, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(-1, 1)
    elif a.ndim != 2:
        raise ValueError(f"tensors are 2-D, got {a.ndim}-D data")
    return a


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tracked")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as2d(data)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._tracked = requires_grad

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_TAPES: list["Tape"] = []
_MONITORS: list["KinkMonitor"] = []


class KinkMonitor:
    """Records how close non-smooth primitives came to their kinks.

    ``margin`` is the smallest |input| seen by relu/leaky_relu, or the
    smallest gap between the extreme and runner-up value in
    reduce_max/reduce_min. Central differences are only trustworthy when
    the step is well below this margin.
    """

    def __init__(self) -> None:
        self.margin = np.inf

    def __enter__(self) -> "KinkMonitor":
        _MONITORS.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _MONITORS.remove(self)


def _note_margin(value: float) -> None:
    for mon in _MONITORS:
        mon.margin = min(mon.margin, float(value))


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.used = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        if self.used:
            raise TapeError("cannot record onto a tape that was already replayed")
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        """Write d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

        Leaf gradients are overwritten, not summed with earlier passes.
        """
        if self.used:
            raise TapeError("backward called twice on the same tape")
        if loss.shape != (1, 1):
            raise ValueError(f"loss must be 1x1, got {loss.shape}")
        self.used = True
        adj: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        leaves = {id(t): t for node in self.nodes for t in node.inputs if t.requires_grad}
        if loss.requires_grad:
            leaves[id(loss)] = loss
        for node in reversed(self.nodes):
            g = adj.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp._tracked:
                    continue
                key = id(inp)
                if key in adj:
                    adj[key] = adj[key] + gi
                else:
                    adj[key] = gi
        for key, t in leaves.items():
            t.grad = adj.get(key, np.zeros_like(t.data))


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _finish(name: str, data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{name} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.name = None
    out._tracked = any(t._tracked for t in inputs)
    if out._tracked and _TAPES:
        _TAPES[-1].record(out, inputs, bwd)
    return out


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- linear primitives ----------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _t(a), _t(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    return _finish("matmul", a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a 1 x cols row added to every row."""
    a, b = _t(a), _t(b)
    if b.shape == (1, a.shape[1]) and a.shape[0] != 1:
        return _finish("add", a.data + b.data, (a, b),
                       lambda g: (g, g.sum(axis=0, keepdims=True)))
    _same_shape("add", a, b)
    return _finish("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _t(a), _t(b)
    _same_shape("sub", a, b)
    return _finish("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product. A plain array for ``b`` is a constant."""
    a, b = _t(a), _t(b)
    _same_shape("mul", a, b)
    return _finish("mul", a.data * b.data, (a, b),
                   lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    a = _t(a)
    c = float(c)
    return _finish("scale", a.data * c, (a,), lambda g: (g * c,))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(_t(p) for p in parts)
    if len({p.shape[0] for p in parts}) != 1:
        raise ValueError("concat_cols: row counts differ")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def bwd(g):
        return tuple(g[:, bounds[k]:bounds[k + 1]] for k in range(len(parts)))

    return _finish("concat_cols", np.concatenate([p.data for p in parts], axis=1), parts, bwd)


def gather_rows(x: Tensor, idx) -> Tensor:
    x = _t(x)
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _finish("gather_rows", x.data[idx], (x,), bwd)


def sum(x: Tensor) -> Tensor:  # noqa: A001
    x = _t(x)
    return _finish("sum", np.array([[x.data.sum()]]), (x,),
                   lambda g: (np.full_like(x.data, g[0, 0]),))


def mean(x: Tensor) -> Tensor:
    x = _t(x)
    size = x.data.size
    return _finish("mean", np.array([[x.data.mean()]]), (x,),
                   lambda g: (np.full_like(x.data, g[0, 0] / size),))


def _extreme(x: Tensor, pick) -> Tensor:
    x = _t(x)
    if x.data.size == 0:
        raise ValueError("reduction over an empty tensor")
    flat = x.data.ravel()
    k = int(pick(flat))  # argmax/argmin return the first attaining index
    if _MONITORS and flat.size > 1:
        _note_margin(np.min(np.abs(np.delete(flat, k) - flat[k])))

    def bwd(g):
        out = np.zeros(flat.size)
        out[k] = g[0, 0]
        return (out.reshape(x.shape),)

    return _finish("extreme", np.array([[flat[k]]]), (x,), bwd)


def reduce_max(x: Tensor) -> Tensor:
    return _extreme(x, np.argmax)


def reduce_min(x: Tensor) -> Tensor:
    return _extreme(x, np.argmin)


# -- nonlinearities -------------------------------------------------------

def clip_min(x: Tensor, lo: float) -> Tensor:
    """max(x, lo) elementwise; no gradient where clipped."""
    x = _t(x)
    on = x.data >= lo
    return _finish("clip_min", np.where(on, x.data, lo), (x,), lambda g: (g * on,))


def relu(x: Tensor) -> Tensor:
    x = _t(x)
    if _MONITORS and x.data.size:
        _note_margin(np.abs(x.data).min())
    on = x.data > 0
    return _finish("relu", np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    x = _t(x)
    if _MONITORS and x.data.size:
        _note_margin(np.abs(x.data).min())
    factor = np.where(x.data > 0, 1.0, slope)
    return _finish("leaky_relu", x.data * factor, (x,), lambda g: (g * factor,))


def exp(x: Tensor) -> Tensor:
    x = _t(x)
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        y = np.exp(x.data)
    return _finish("exp", y, (x,), lambda g: (g * y,))


def row_softmax(x: Tensor) -> Tensor:
    x = _t(x)
    z = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    y = z / z.sum(axis=1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _finish("row_softmax", y, (x,), bwd)


def segment_softmax(x: Tensor, row_ptr: np.ndarray) -> Tensor:
    """Softmax of a stored-entry column over each CSR row segment."""
    x = _t(x)
    row_ptr = np.asarray(row_ptr, dtype=np.int64)
    counts = np.diff(row_ptr)
    if x.shape != (int(row_ptr[-1]), 1):
        raise ValueError(f"segment_softmax: expected ({row_ptr[-1]}, 1), got {x.shape}")
    if np.any(counts == 0):
        raise ValueError(f"segment_softmax: row {int(np.argmax(counts == 0))} has no entries")
    seg = np.repeat(np.arange(counts.size), counts)
    v = x.data[:, 0]
    mx = np.maximum.reduceat(v, row_ptr[:-1])
    z = np.exp(v - mx[seg])
    y = z / np.bincount(seg, weights=z)[seg]

    def bwd(g):
        gv = g[:, 0]
        dot = np.bincount(seg, weights=gv * y, minlength=counts.size)
        return ((y * (gv - dot[seg]))[:, None],)

    return _finish("segment_softmax", y[:, None], (x,), bwd)


# -- graph primitives -----------------------------------------------------

def neg_sqdist_on_pairs(z: Tensor, rows, cols) -> Tensor:
    """-||z_i - z_j||^2 for every pair (rows[e], cols[e]), as an (E, 1) column."""
    z = _t(z)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    diff = z.data[rows] - z.data[cols]

    def bwd(g):
        w = -2.0 * g * diff
        out = np.zeros_like(z.data)
        np.add.at(out, rows, w)
        np.add.at(out, cols, -w)
        return (out,)

    return _finish("neg_sqdist_on_pairs", -np.sum(diff * diff, axis=1, keepdims=True), (z,), bwd)


def spmm_diff(pattern: SparseMatrix, values: Tensor | None, x: Tensor) -> Tensor:
    """S @ X where S has ``pattern``'s layout and entries ``values`` (nnz x 1).

    With ``values=None`` the pattern's own values are used as constants.
    """
    x = _t(x)
    if x.shape[0] != pattern.n:
        raise ValueError(f"spmm_diff: {pattern.n}x{pattern.n} sparse by {x.shape}")
    if values is None:
        vals = Tensor(pattern.values)
    else:
        vals = _t(values)
        if vals.shape != (pattern.nnz, 1):
            raise ValueError(f"spmm_diff: values must be ({pattern.nnz}, 1), got {vals.shape}")
    mat = pattern.with_values(vals.data[:, 0], symmetric=False).to_scipy()
    rows, cols = pattern.rows, pattern.col_idx

    def bwd(g):
        dx = np.asarray(mat.T @ g) if x._tracked else None
        dv = np.einsum("ij,ij->i", g[rows], x.data[cols])[:, None] if vals._tracked else None
        return (dv, dx)

    return _finish("spmm_diff", np.asarray(mat @ x.data), (vals, x), bwd)


# -- training primitives --------------------------------------------------

def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate); identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = _t(x)
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _finish("dropout", x.data * keep, (x,), lambda g: (g * keep,))


dropout_apply = dropout


def masked_cross_entropy(logits: Tensor, labels, mask) -> Tensor:
    """Mean negative log-likelihood over rows where ``mask`` is set."""
    logits = _t(logits)
    labels = np.asarray(labels, dtype=np.int64)
    idx = np.flatnonzero(np.asarray(mask, dtype=bool))
    if idx.size == 0:
        raise ValueError("masked_cross_entropy: empty mask")
    sub_logits = logits.data[idx]
    shifted = sub_logits - sub_logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(idx.size), labels[idx]]
    loss = np.mean(logz - picked)

    def bwd(g):
        p = np.exp(shifted - logz[:, None])
        p[np.arange(idx.size), labels[idx]] -= 1.0
        out = np.zeros_like(logits.data)
        out[idx] = p * (g[0, 0] / idx.size)
        return (out,)

    return _finish("masked_cross_entropy", np.array([[loss]]), (logits,), bwd)


# -- optimisation ---------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new arrays; inputs are untouched."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_step: params, grads and state differ in length")
    t = state.t + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"adam_step: shape mismatch {p.shape} / {g.shape} / {m.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_p.append(p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


class Adam:
    """Adam over a fixed list of leaf tensors, reading their ``.grad``."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.01, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def step(self) -> None:
        new, self.state = adam_step(
            [p.data for p in self.params], [p.grad for p in self.params], self.state,
            self.lr, self.beta1, self.beta2, self.eps,
        )
        for p, d in zip(self.params, new):
            p.data = d


# -- gradient checking ----------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    kink_margin: float = np.inf
    errors: list[tuple[str, tuple[int, int], float, float, float]] = field(default_factory=list)

    def passes(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-4,
               n_coords: int = 50, rng: np.random.Generator | None = None,
               floor: float = 1e-6, tol: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` against central differences.

    Relative error per coordinate is |a - n| / max(|a|, |n|, floor). At
    least ``n_coords`` coordinates are probed (all of them if fewer exist).
    ``errors`` lists the coordinates whose error exceeds ``tol``.
    ``kink_margin`` comes from a :class:`KinkMonitor` around the base
    evaluation.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    with Tape() as tape, KinkMonitor() as mon:
        loss = fn()
    base = loss.item()
    if fn().item() != base:
        raise TapeError("fn is not deterministic (repeated evaluation differs)")
    if not params:
        return GradCheckReport(0.0, 0, mon.margin)
    tape.backward(loss)
    analytic = [np.array(p.grad) for p in params]

    coords = [(k, idx) for k, p in enumerate(params) for idx in np.ndindex(*p.shape)]
    if len(coords) > n_coords:
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in np.sort(pick)]

    worst = 0.0
    bad = []
    for k, idx in coords:
        p = params[k]
        old = p.data[idx]
        p.data[idx] = old + eps
        up = fn().item()
        p.data[idx] = old - eps
        down = fn().item()
        p.data[idx] = old
        num = (up - down) / (2.0 * eps)
        a = analytic[k][idx]
        rel = abs(a - num) / max(abs(a), abs(num), floor)
        worst = max(worst, rel)
        if rel > tol:
            bad.append((p.name or f"param{k}", idx, a, num, rel))
    return GradCheckReport(worst, len(coords), mon.margin, bad)
