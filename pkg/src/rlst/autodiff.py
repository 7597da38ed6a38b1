"""Tape-based reverse-mode differentiation over numpy arrays.

Only the primitives the RLST network and its losses need are provided.
Primitives record onto the innermost active :class:`Tape` when at least one
input requires a gradient; outside a tape they just compute values, which is
what evaluation uses.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

_node_ids = itertools.count()
_active_tapes: list["Tape"] = []


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "node", "requires_grad")

    def __init__(self, value, requires_grad=False, dtype=None):
        value = np.asarray(value, dtype=dtype)
        if value.dtype.kind != "f":
            value = value.astype(np.float64)
        self.value = value
        self.requires_grad = requires_grad
        self.node = next(_node_ids) if requires_grad else None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node})"


def parameter(value, dtype=np.float64) -> Tensor:
    """A leaf tensor that receives gradients."""
    return Tensor(value, requires_grad=True, dtype=dtype)


def constant(value, dtype=None) -> Tensor:
    return Tensor(value, requires_grad=False, dtype=dtype)


@dataclass
class _Record:
    out: int
    parents: tuple
    vjp: object


@dataclass
class Tape:
    records: list = field(default_factory=list)

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def __len__(self):
        return len(self.records)


def _tape_for(inputs) -> Tape | None:
    if not _active_tapes:
        return None
    if any(t.requires_grad for t in inputs):
        return _active_tapes[-1]
    return None


def _emit(value, inputs, vjp) -> Tensor:
    """Wrap ``value`` and record its backward rule if a tape is active.

    ``vjp(g)`` returns one gradient (or None) per input.
    """
    tape = _tape_for(inputs)
    if tape is None:
        return Tensor(value, dtype=value.dtype)
    out = Tensor(value, requires_grad=True, dtype=value.dtype)
    parents = tuple(t.node if t.requires_grad else None for t in inputs)
    tape.records.append(_Record(out.node, parents, vjp))
    return out


def _need_2d(name, t):
    if t.value.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-d operand, got shape {t.shape}")


# -- primitives -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need_2d("matmul", a)
    _need_2d("matmul", b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector broadcast over rows of ``a``."""
    if a.shape == b.shape:
        return _emit(a.value + b.value, (a, b), lambda g: (g, g))
    if a.value.ndim == 2 and b.value.ndim == 1 and a.shape[1] == b.shape[0]:
        return _emit(a.value + b.value, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` as one node (``b`` broadcast over rows)."""
    _need_2d("affine", x)
    _need_2d("affine", W)
    if x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"affine: incompatible shapes {x.shape}, {W.shape}, {b.shape}")
    xv, Wv = x.value, W.value
    return _emit(xv @ Wv + b.value, (x, W, b), lambda g: (g @ Wv.T, xv.T @ g, g.sum(axis=0)))


def gru(x: Tensor, h: Tensor, W: Tensor, U: Tensor, b: Tensor, b_n: Tensor) -> Tensor:
    """Fused gated recurrent cell.

    ``u, r = sigmoid(xW + hU + b)`` over the first two column blocks,
    ``n = tanh(xW_n + b_xn + r * (hU_n + b_n))`` over the third, and the
    new state is ``h + u * (n - h)``.
    """
    _need_2d("gru", x)
    _need_2d("gru", h)
    H = h.shape[1]
    if (W.shape != (x.shape[1], 3 * H) or U.shape != (H, 3 * H) or b.shape != (3 * H,)
            or b_n.shape != (H,) or x.shape[0] != h.shape[0]):
        raise ShapeError(f"gru: incompatible shapes x{x.shape} h{h.shape} W{W.shape} "
                         f"U{U.shape} b{b.shape} b_n{b_n.shape}")
    xv, hv, Wv, Uv = x.value, h.value, W.value, U.value
    gx = xv @ Wv + b.value
    gh = hv @ Uv
    ur = 0.5 * (np.tanh(0.5 * (gx[:, :2 * H] + gh[:, :2 * H])) + 1.0)
    u, r = ur[:, :H], ur[:, H:]
    hn = gh[:, 2 * H:] + b_n.value
    n = np.tanh(gx[:, 2 * H:] + r * hn)
    out = hv + u * (n - hv)

    def vjp(g):
        du = g * (n - hv)
        dn = g * u * (1.0 - n * n)
        dr = dn * hn
        dgx = np.concatenate([du * u * (1.0 - u), dr * r * (1.0 - r), dn], axis=1)
        dgh = np.concatenate([dgx[:, :2 * H], dn * r], axis=1)
        return (dgx @ Wv.T, g * (1.0 - u) + dgh @ Uv.T, xv.T @ dgx, hv.T @ dgh,
                dgx.sum(axis=0), dgh[:, 2 * H:].sum(axis=0))

    return _emit(out, (x, h, W, U, b, b_n), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _emit(a.value - b.value, (a, b), lambda g: (g, -g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.value * c, (a,), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.value.dtype
    return _emit(np.asarray(a.value.sum(), dtype=dtype), (a,),
                 lambda g: (np.broadcast_to(g, shape).astype(dtype),))


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            d != e for k, (d, e) in enumerate(zip(t.shape, ref)) if k != axis % len(ref)
        ):
            raise ShapeError(f"concat(axis={axis}): incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    value = np.concatenate([t.value for t in tensors], axis=axis)

    def vjp(g):
        index = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            out.append(g[tuple(index)])
        return tuple(out)

    return _emit(value, tensors, vjp)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of a 2-d tensor."""
    _need_2d("slice_cols", a)
    if not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"slice_cols: range {start}:{stop} outside shape {a.shape}")
    shape, dtype = a.shape, a.value.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        full[:, start:stop] = g
        return (full,)

    return _emit(a.value[:, start:stop], (a,), vjp)


def select_cols(a: Tensor, cols) -> Tensor:
    """Pick one column per row: ``out[k] = a[k, cols[k]]``."""
    _need_2d("select_cols", a)
    cols = np.asarray(cols, dtype=np.intp)
    if cols.shape != (a.shape[0],):
        raise ShapeError(f"select_cols: index shape {cols.shape} does not match {a.shape}")
    rows = np.arange(a.shape[0])
    shape, dtype = a.shape, a.value.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        full[rows, cols] = g
        return (full,)

    return _emit(a.value[rows, cols], (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    s = 0.5 * (np.tanh(0.5 * a.value) + 1.0)
    return _emit(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.value)
    return _emit(t, (a,), lambda g: (g * (1.0 - t * t),))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    d = np.where(a.value > 0, 1.0, slope).astype(a.value.dtype)
    return _emit(a.value * d, (a,), lambda g: (g * d,))


def embedding_row(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by ``ids`` (an int or a 1-d int array)."""
    _need_2d("embedding_row", table)
    ids = np.atleast_1d(np.asarray(ids, dtype=np.intp))
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding_row: id out of range for table of {n} rows: {ids}")
    shape, dtype = table.shape, table.value.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _emit(table.value[ids], (table,), vjp)


def dropout(a: Tensor, mask, keep_prob: float) -> Tensor:
    """Inverted dropout with a caller-supplied 0/1 mask."""
    mask = np.asarray(mask)
    if mask.shape != a.shape:
        raise ShapeError(f"dropout: mask shape {mask.shape} does not match {a.shape}")
    factor = (mask / keep_prob).astype(a.value.dtype)
    return _emit(a.value * factor, (a,), lambda g: (g * factor,))


def softmax_cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Cross-entropy of softmax(logits) against integer targets.

    A 1-d ``logits`` with a scalar target gives ``-log softmax[target]``.
    For 2-d ``logits`` the result is the ``weights``-weighted sum of the
    per-row losses (unit weights if omitted).
    """
    single = logits.value.ndim == 1
    z = logits.value[None, :] if single else logits.value
    targets = np.atleast_1d(np.asarray(targets, dtype=np.intp))
    n, v = z.shape
    if targets.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: {targets.shape} targets for logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"softmax_cross_entropy: target id out of range [0, {v})")
    w = np.ones(n, dtype=z.dtype) if weights is None else np.asarray(weights, dtype=z.dtype)
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    per_row = log_norm - shifted[rows, targets]
    value = np.asarray((w * per_row).sum(), dtype=z.dtype)

    def vjp(g):
        p = np.exp(shifted - log_norm[:, None])
        p[rows, targets] -= 1.0
        grad = p * (w * g)[:, None]
        return (grad[0] if single else grad,)

    return _emit(value, (logits,), vjp)


def mse(pred: Tensor, target, weights=None) -> Tensor:
    """Squared error ``(pred - target)**2``, weighted-summed for vector inputs.

    ``target`` is a constant; no gradient flows into it.
    """
    target = np.asarray(target, dtype=pred.value.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"mse: target shape {target.shape} does not match {pred.shape}")
    diff = pred.value - target
    w = np.ones_like(diff) if weights is None else np.asarray(weights, dtype=diff.dtype)
    value = np.asarray((w * diff * diff).sum(), dtype=diff.dtype)
    return _emit(value, (pred,), lambda g: (2.0 * g * w * diff,))


# -- reverse pass -----------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` for every leaf reached on ``tape``.

    Returns a map from leaf node id to gradient array.
    """
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads = {loss.node: np.ones_like(loss.value)}
    produced = set()
    for rec in reversed(tape.records):
        g = grads.get(rec.out)
        if g is None:
            continue
        produced.add(rec.out)
        del grads[rec.out]
        for parent, pg in zip(rec.parents, rec.vjp(g)):
            if parent is None or pg is None:
                continue
            prev = grads.get(parent)
            grads[parent] = pg if prev is None else prev + pg
    return grads


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values())))


def clip_global_norm(grads: dict, c: float) -> dict:
    norm = global_norm(grads)
    if norm <= c:
        return dict(grads)
    factor = c / norm
    return {k: g * factor for k, g in grads.items()}


# -- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


@dataclass
class Adam:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    state: AdamState = field(default_factory=AdamState)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")

    def step(self, params: dict, grads: dict):
        adam_step(params, grads, self.state, self.lr, self.beta1, self.beta2,
                  self.eps, self.weight_decay)


def adam_step(params: dict, grads: dict, state: AdamState, lr=3e-4, beta1=0.9,
              beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One Adam update with coupled L2 weight decay, in place.

    ``params`` maps names to :class:`Tensor`; ``grads`` maps the same names to
    arrays. Parameters missing from ``grads`` are treated as having zero
    gradient.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.value) if g is None else g
        if weight_decay:
            g = g + weight_decay * p.value
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.value -= update.astype(p.value.dtype, copy=False)
