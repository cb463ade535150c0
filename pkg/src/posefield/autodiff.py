"""Reverse-mode automatic differentiation over dense numpy tensors.

A Tape records operations in forward order (hence already topologically
sorted); backward() walks the records in reverse and accumulates vector-
Jacobian products into every tensor that requires gradients.  One tape
serves one optimization step and is confined to a single thread; pure
forward evaluation without an active tape is thread-safe.

Only the operations the field networks and losses need are provided, all
float64.  Elementwise ops follow numpy broadcasting; the backward pass
sums gradients back to the operand shapes.
"""

from __future__ import annotations

import numpy as np

from .geometry import svd3


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NotScalarOutput(ValueError):
    """backward() was asked to differentiate a non-scalar output."""


_TAPE_STACK: list["Tape"] = []


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


class Tape:
    """Ordered record of differentiable operations.

    Records are appended in forward evaluation order, so every operation's
    inputs precede it; node ids are assigned on first participation, which
    keeps the id sequence topologically sorted as well.
    """

    def __init__(self):
        self.records = []  # (op name, input ids, output id, inputs, output, backward fn)
        self._ids: dict[int, int] = {}
        self._next_id = 0

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def _node_id(self, tensor: Tensor) -> int:
        key = id(tensor)
        if key not in self._ids:
            self._ids[key] = self._next_id
            self._next_id += 1
        return self._ids[key]

    def record(self, name, inputs, output, backward_fn):
        in_ids = tuple(self._node_id(t) for t in inputs)
        out_id = self._node_id(output)
        self.records.append((name, in_ids, out_id, inputs, output, backward_fn))


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(name, inputs, out_values, backward_fn) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_values, requires_grad=needs)
    if needs:
        tape.record(name, inputs, out, backward_fn)
    return out


def backward(tape: Tape, output: Tensor):
    """Accumulate d(output)/d(leaf) into .grad of every requires_grad tensor.

    The output must be scalar (a single value).  Gradients add onto any
    existing .grad contents so independent tapes can be summed.
    """
    if output.values.size != 1:
        raise NotScalarOutput(f"expected scalar output, got shape {output.values.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.values)}
    for name, _in_ids, _out_id, inputs, out, backward_fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        contribs = backward_fn(g)
        for t, c in zip(inputs, contribs):
            if c is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + c
            else:
                grads[key] = c
    alive = {id(output): output}
    for _, _, _, inputs, out, _ in tape.records:
        alive[id(out)] = out
        for t in inputs:
            alive[id(t)] = t
    for key, g in grads.items():
        t = alive.get(key)
        if t is None or not t.requires_grad:
            continue
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b, name):
    try:
        np.broadcast_shapes(a.values.shape, b.values.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"{name}: cannot broadcast {a.values.shape} with {b.values.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _record(
        "add", (a, b), a.values + b.values,
        lambda g: (_unbroadcast(g, a.values.shape), _unbroadcast(g, b.values.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _record(
        "sub", (a, b), a.values - b.values,
        lambda g: (_unbroadcast(g, a.values.shape), _unbroadcast(-g, b.values.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.values, b.values
    return _record(
        "mul", (a, b), av * bv,
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    av, bv = a.values, b.values
    return _record(
        "div", (a, b), av / bv,
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * av / (bv * bv), bv.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", (a,), -a.values, lambda g: (-g,))


# ---------------------------------------------------------------------------
# matrix products


def matmul(a, b) -> Tensor:
    """Matrix product: (m,k)@(k,n) or (m,k)@(k,)."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim not in (1, 2) or av.shape[1] != bv.shape[0]:
        raise ShapeMismatch(f"matmul: {av.shape} @ {bv.shape}")
    if bv.ndim == 2:
        back = lambda g: (g @ bv.T, av.T @ g)
    else:
        back = lambda g: (np.outer(g, bv), av.T @ g)
    return _record("matmul", (a, b), av @ bv, back)


def bmm(a, b) -> Tensor:
    """Batched matrix product: (N,m,k)@(N,k,n)."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim != 3 or bv.ndim != 3 or av.shape[0] != bv.shape[0] or av.shape[2] != bv.shape[1]:
        raise ShapeMismatch(f"bmm: {av.shape} @ {bv.shape}")
    return _record(
        "bmm", (a, b), av @ bv,
        lambda g: (g @ bv.swapaxes(-1, -2), av.swapaxes(-1, -2) @ g),
    )


def transpose_last2(a) -> Tensor:
    a = as_tensor(a)
    if a.values.ndim < 2:
        raise ShapeMismatch("transpose_last2 needs ndim >= 2")
    return _record(
        "transpose_last2", (a,), a.values.swapaxes(-1, -2).copy(),
        lambda g: (g.swapaxes(-1, -2),),
    )


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0.0
    return _record("relu", (a,), np.where(mask, a.values, 0.0), lambda g: (g * mask,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    out = np.logaddexp(0.0, av)
    sig = _expit(av)
    return _record("softplus", (a,), out, lambda g: (g * sig,))


def _expit(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _expit(a.values)
    return _record("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    return _record("sin", (a,), np.sin(av), lambda g: (g * np.cos(av),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    return _record("cos", (a,), np.cos(av), lambda g: (-g * np.sin(av),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    ev = np.exp(a.values)
    return _record("exp", (a,), ev, lambda g: (g * ev,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    return _record("log", (a,), np.log(av), lambda g: (g / av,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    sv = np.sqrt(a.values)
    return _record("sqrt", (a,), sv, lambda g: (g * 0.5 / sv,))


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    return _record("square", (a,), av * av, lambda g: (2.0 * g * av,))


def absval(a) -> Tensor:
    """Elementwise |x|; subgradient at 0 is 0 (standard l1 convention)."""
    a = as_tensor(a)
    sgn = np.sign(a.values)
    return _record("abs", (a,), np.abs(a.values), lambda g: (g * sgn,))


# ---------------------------------------------------------------------------
# reductions


def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    av = a.values

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, av.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, av.shape).copy(),)

    return _record("sum", (a,), av.sum(axis=axis, keepdims=keepdims), back)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.values.size if axis is None else a.values.shape[axis]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def norm_l1(a) -> Tensor:
    """Scalar sum of absolute values."""
    return tensor_sum(absval(a))


def norm_l2_sq(a) -> Tensor:
    """Scalar sum of squares."""
    return tensor_sum(square(a))


def softmax_with_temperature(a, temperature) -> Tensor:
    """softmax(x / temperature) along the last axis, numerically shifted."""
    a = as_tensor(a)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = a.values / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((y * (g - dot)) / temperature,)

    return _record("softmax_t", (a,), y, back)


def cumsum(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    return _record(
        "cumsum", (a,), np.cumsum(a.values, axis=axis),
        lambda g: (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),),
    )


# ---------------------------------------------------------------------------
# structure


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.values.shape
    return _record("reshape", (a,), a.values.reshape(shape), lambda g: (g.reshape(old),))


def concat(tensors, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.values.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.values for t in ts], axis=axis)

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", tuple(ts), out, back)


def take(a, indices, axis=0) -> Tensor:
    """Gather along an axis; backward scatter-adds into the source."""
    a = as_tensor(a)
    idx = np.asarray(indices)
    av = a.values

    def back(g):
        out = np.zeros_like(av)
        if axis == 0:
            np.add.at(out, idx, g)
        else:
            # moveaxis returns a view, so scatter-add lands in `out`.
            np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _record("take", (a,), np.take(av, idx, axis=axis), back)


def where_mask(mask, a, b) -> Tensor:
    """Select a where mask else b; the mask is a constant boolean array."""
    a, b = as_tensor(a), as_tensor(b)
    m = np.asarray(mask, dtype=bool)
    out = np.where(m, a.values, b.values)
    return _record(
        "where", (a, b), out,
        lambda g: (
            _unbroadcast(np.where(m, g, 0.0), a.values.shape),
            _unbroadcast(np.where(m, 0.0, g), b.values.shape),
        ),
    )


def cross3(a, b) -> Tensor:
    """Rowwise cross product of (N, 3) arrays."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if av.shape != bv.shape or av.shape[-1] != 3:
        raise ShapeMismatch(f"cross3: {av.shape} x {bv.shape}")
    return _record(
        "cross3", (a, b), np.cross(av, bv),
        lambda g: (np.cross(bv, g), np.cross(g, av)),
    )


def apply_bone_rigid(rot, trans, points) -> Tensor:
    """Apply B rigid transforms to N points at once: out[n,b] = R_b p_n + t_b."""
    rot, trans, points = as_tensor(rot), as_tensor(trans), as_tensor(points)
    rv, tv, pv = rot.values, trans.values, points.values
    if rv.ndim != 3 or rv.shape[1:] != (3, 3) or tv.shape != (rv.shape[0], 3) or pv.ndim != 2 or pv.shape[1] != 3:
        raise ShapeMismatch(f"apply_bone_rigid: R{rv.shape} t{tv.shape} p{pv.shape}")
    out = np.einsum("bij,nj->nbi", rv, pv) + tv[None, :, :]

    def back(g):
        return (
            np.einsum("nbi,nj->bij", g, pv),
            g.sum(axis=0),
            np.einsum("bij,nbi->nj", rv, g),
        )

    return _record("apply_bone_rigid", (rot, trans, points), out, back)


def mix_bones(weights, values) -> Tensor:
    """Blend per-bone candidates: out[n] = sum_b w[n,b] v[n,b,:]."""
    weights, values = as_tensor(weights), as_tensor(values)
    wv, vv = weights.values, values.values
    if wv.ndim != 2 or vv.ndim != 3 or vv.shape[:2] != wv.shape:
        raise ShapeMismatch(f"mix_bones: w{wv.shape} v{vv.shape}")
    out = np.einsum("nb,nbi->ni", wv, vv)

    def back(g):
        return (np.einsum("ni,nbi->nb", g, vv), np.einsum("nb,ni->nbi", wv, g))

    return _record("mix_bones", (weights, values), out, back)


def svd3_diff(m) -> Tensor:
    """Singular values of a 3x3 matrix, differentiable w.r.t. the matrix.

    Returns the descending singular values; the factors are attached to
    the result as `.factors` for callers that need U or V (those are not
    part of the differentiable path).  d(sigma_i)/dM = u_i v_i^T, which
    stays well defined when singular values coincide, so no safeguarding
    factors are required for the losses built on log singular values.
    """
    m = as_tensor(m)
    if m.values.shape != (3, 3):
        raise ShapeMismatch(f"svd3_diff expects 3x3, got {m.values.shape}")
    f = svd3(m.values)
    u, v = f.u, f.v

    def back(g):
        return ((u * g[None, :]) @ v.T,)

    out = _record("svd3", (m,), f.sigma, back)
    out.factors = f
    return out
