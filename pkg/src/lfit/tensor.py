"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``GradTape`` records every differentiable operation executed while it is
active; ``GradTape.backward`` replays the records in reverse, accumulating
gradients into the leaves (parameters and inputs). Tapes are per-forward-pass
and must not be shared between threads. All buffers are 64-bit floats so
finite-difference gradient checks are decisive.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, VocabularyError


_ACTIVE_TAPE: "GradTape | None" = None


class Tensor:
    """A dense float64 array, optionally attached to the active gradient tape."""

    __slots__ = ("data", "grad", "_tape", "_node")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._tape: GradTape | None = None
        self._node: int = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def sum(self, axis: int | None = None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return tmean(self, axis)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"

    # Arithmetic sugar; all routing through the module-level ops.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Append-only record of one forward pass.

    Nodes are appended in execution order, so the sequence is already
    topologically sorted: every node's parents precede it. ``backward``
    scans the list once in reverse.
    """

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._backward: list = []
        self._leaves: list[Tensor | None] = []
        self._used = False

    def __enter__(self) -> "GradTape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a gradient tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def _node_for(self, t: Tensor) -> int:
        if t._tape is self:
            return t._node
        # First sighting on this tape: register as a leaf.
        nid = len(self._parents)
        self._parents.append(())
        self._backward.append(None)
        self._leaves.append(t)
        t._tape = self
        t._node = nid
        return nid

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], backward) -> Tensor:
        pids = tuple(self._node_for(p) for p in parents)
        nid = len(self._parents)
        self._parents.append(pids)
        self._backward.append(backward)
        self._leaves.append(None)
        out._tape = self
        out._node = nid
        return out

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(node) to every leaf's ``.grad``.

        Leaves that do not participate in ``loss`` receive zeros. A tape can
        run backward once; it is discarded afterwards.
        """
        if self._used:
            raise ContractError("tape already consumed by a previous backward pass")
        if loss._tape is not self:
            raise ContractError("loss tensor was not recorded on this tape")
        if loss.data.shape != ():
            raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
        self._used = True

        grads: list[np.ndarray | None] = [None] * len(self._parents)
        grads[loss._node] = np.ones((), dtype=np.float64)
        for nid in range(len(self._parents) - 1, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            fn = self._backward[nid]
            if fn is None:
                continue
            contribs = fn(g)
            for pid, pg in zip(self._parents[nid], contribs):
                if pg is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    grads[pid] = grads[pid] + pg
            grads[nid] = None  # free as we go

        for nid, leaf in enumerate(self._leaves):
            if leaf is None:
                continue
            g = grads[nid]
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64)


def _active() -> GradTape | None:
    return _ACTIVE_TAPE


def _emit(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    tape = _ACTIVE_TAPE
    if tape is not None:
        tape._record(out, parents, backward)
    return out


def _broadcast_check(a_shape, b_shape) -> tuple[int, ...]:
    """Allow only broadcasts whose result equals one operand's shape."""
    try:
        out = np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise DimensionError(f"shapes {a_shape} and {b_shape} do not broadcast")
    if out != tuple(a_shape) and out != tuple(b_shape):
        raise DimensionError(
            f"mutual broadcast of {a_shape} and {b_shape} is outside the supported trailing-axis patterns"
        )
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after a broadcasted forward op."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a.shape, b.shape)
    ash, bsh = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _emit(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a.shape, b.shape)
    ash, bsh = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _emit(a.data - b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit(ad * bd, (a, b), backward)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient routes to ``a``."""
    _broadcast_check(a.shape, b.shape)
    take_a = a.data >= b.data

    def backward(g):
        return (
            _unbroadcast(np.where(take_a, g, 0.0), a.shape),
            _unbroadcast(np.where(take_a, 0.0, g), b.shape),
        )

    return _emit(np.maximum(a.data, b.data), (a, b), backward)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul batch extents incompatible: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), bd.shape)
        return ga, gb

    return _emit(out, (a, b), backward)


def transpose_last2(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise DimensionError(f"transpose_last2 needs >=2-d operand, got {a.shape}")
    return _emit(a.data.swapaxes(-1, -2), (a,), lambda g: (g.swapaxes(-1, -2),))


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        return _emit(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.ndim

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _emit(a.data.sum(axis=ax), (a,), backward)


def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis % a.ndim]
    return mul(tsum(a, axis), Tensor(1.0 / n))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractError("concat of zero tensors")
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        outs = []
        for i in range(len(sizes)):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(g[tuple(idx)])
        return tuple(outs)

    return _emit(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward)


def stack(tensors: list[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractError("stack of zero tensors")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def backward(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _emit(out, tuple(tensors), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    ax = axis % a.ndim
    if start < 0 or start + length > a.shape[ax]:
        raise DimensionError(f"narrow [{start}:{start+length}] out of range for axis {ax} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, start + length)
    idx = tuple(idx)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=np.float64)
        full[idx] = g
        return (full,)

    return _emit(a.data[idx].copy(), (a,), backward)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------


def sigmoid(a: Tensor) -> Tensor:
    # two-branch form avoids exp overflow for large |x|
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _emit(y, (a,), lambda g: (g * y,))


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    """x for x > 0, alpha*(exp(x)-1) for x <= 0."""
    if alpha <= 0:
        raise ContractError(f"elu alpha must be positive, got {alpha}")
    pos = a.data > 0
    y = np.where(pos, a.data, alpha * (np.exp(np.minimum(a.data, 0.0)) - 1.0))

    def backward(g):
        return (np.where(pos, g, g * (y + alpha)),)

    return _emit(y, (a,), backward)


def softmax(a: Tensor, axis: int, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax along ``axis``.

    ``mask`` is a boolean array broadcastable to ``a``; False positions get
    zero weight and zero gradient. The -inf substitution happens inside the
    op so no tensor buffer ever holds a non-finite value.
    """
    ax = axis % a.ndim
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=ax).all():
            raise ContractError("softmax mask leaves an empty row")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=ax, keepdims=True)
        return ((g - dot) * y,)

    return _emit(y, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis, then affine."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm gain/bias must have shape ({d},), got {gain.shape}/{bias.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = gain.data * xhat + bias.data

    def backward(g):
        dgain = _unbroadcast(g * xhat, gain.shape)
        dbias = _unbroadcast(g, bias.shape)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        return dx, dgain, dbias

    return _emit(y, (a, gain, bias), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate is zero."""
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    keep = (rng.random(a.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return _emit(a.data * keep, (a,), lambda g: (g * keep,))


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup; the gradient accumulates into the selected rows only."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError(f"embedding indices must be integers, got dtype {idx.dtype}")
    card = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= card):
        bad = int(idx.max() if idx.max() >= card else idx.min())
        raise VocabularyError(f"embedding index {bad} outside vocabulary of size {card}")
    d = table.shape[1]

    def backward(g):
        gt = np.zeros(table.shape, dtype=np.float64)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, d))
        return (gt,)

    return _emit(table.data[idx], (table,), backward)


# ---------------------------------------------------------------------------
# Gradient checking oracle
# ---------------------------------------------------------------------------


def backward(tape: GradTape, loss: Tensor) -> None:
    tape.backward(loss)


def check_gradient(f, x: Tensor, step: float = 1e-5, floor: float = 1e-6) -> float:
    """Max relative error between tape gradients of ``f`` and central differences.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic. The
    relative-error denominator is max(|analytic|, |numeric|, floor). The floor
    masks coordinates whose magnitude sits below central-difference resolution:
    cancellation noise in (f(x+h) - f(x-h)) / 2h is about eps * |f| / h, so
    gradients much smaller than that are only comparable in absolute terms.
    """
    if step <= 0:
        raise ContractError(f"step must be positive, got {step}")
    if floor <= 0:
        raise ContractError(f"floor must be positive, got {floor}")
    with GradTape() as tape:
        y = f(x)
    if y.data.shape != ():
        raise ContractError("check_gradient target must be scalar-valued")
    tape.backward(y)
    analytic = x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x).item()
        flat[i] = orig - step
        lo = f(x).item()
        flat[i] = orig
        nflat[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
