"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` records every operation applied to its :class:`Var` nodes in
creation order, which is already a topological order.  ``Tape.backward``
walks the record once in reverse and accumulates vector-Jacobian products.

Tensors are plain ``numpy.ndarray`` objects of dtype float64; :func:`as_tensor`
is the validating constructor.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, ContractError, DimensionError, NumericError

SOFTPLUS_SATURATION = 30.0


def as_tensor(value, name="tensor"):
    """Return ``value`` as a contiguous float64 array, rejecting NaN/Inf."""
    arr = np.array(value, dtype=np.float64, order="C")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


class TapeMonitor:
    """Process-wide accounting of activations held by open tapes.

    Used by the trainer's memory tests: ``peak_bytes`` is the largest total of
    saved activation bytes simultaneously held by open tapes since the last
    :meth:`reset`.
    """

    live_tapes = 0
    live_bytes = 0
    peak_tapes = 0
    peak_bytes = 0

    @classmethod
    def reset(cls):
        cls.peak_tapes = cls.live_tapes
        cls.peak_bytes = cls.live_bytes

    @classmethod
    def _grow(cls, nbytes):
        cls.live_bytes += nbytes
        cls.peak_bytes = max(cls.peak_bytes, cls.live_bytes)

    @classmethod
    def _open(cls):
        cls.live_tapes += 1
        cls.peak_tapes = max(cls.peak_tapes, cls.live_tapes)

    @classmethod
    def _close(cls, nbytes):
        cls.live_tapes -= 1
        cls.live_bytes -= nbytes


class Var:
    """A node on a tape: a value plus the recipe for its input gradients."""

    __slots__ = ("tape", "value", "parents", "backward_fn", "requires_grad", "index")

    __array_priority__ = 100.0

    def __init__(self, tape, value, parents=(), backward_fn=None, requires_grad=False):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.index = -1

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def _lift(self, other):
        return other if isinstance(other, Var) else self.tape.const(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __rmatmul__(self, other):
        return matmul(self._lift(other), self)

    def __getitem__(self, key):
        return getitem(self, key)


class Tape:
    """Append-only record of operations; single-threaded, one per pass."""

    def __init__(self):
        self.nodes = []
        self.nbytes = 0
        self.closed = False
        TapeMonitor._open()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        """Release every saved activation."""
        if not self.closed:
            TapeMonitor._close(self.nbytes)
            self.nodes = []
            self.nbytes = 0
            self.closed = True

    def _append(self, node):
        if self.closed:
            raise ContractError("tape is closed")
        node.index = len(self.nodes)
        self.nodes.append(node)
        self.nbytes += node.value.nbytes
        TapeMonitor._grow(node.value.nbytes)
        return node

    def var(self, value, requires_grad=True):
        """A differentiable leaf."""
        return self._append(Var(self, as_tensor(value), requires_grad=requires_grad))

    def const(self, value):
        return self._append(Var(self, np.asarray(value, dtype=np.float64)))

    def record(self, value, parents, backward_fn):
        requires = any(p.requires_grad for p in parents)
        return self._append(
            Var(self, value, parents, backward_fn if requires else None, requires)
        )

    def backward(self, root, seed=None):
        """Accumulate d(root)/d(node) for every node; returns a list by node index.

        ``root`` must be scalar unless an explicit ``seed`` cotangent of the
        same shape is given (vector-Jacobian product mode).
        """
        if root.tape is not self:
            raise ContractError("root belongs to a different tape")
        if seed is None:
            if root.value.size != 1 or root.value.ndim != 0:
                raise ContractError(
                    f"backpropagate needs a scalar root, got shape {root.value.shape}"
                )
            seed = np.ones((), dtype=np.float64)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != root.value.shape:
                raise DimensionError("seed shape does not match root")
        grads = [None] * (root.index + 1)
        grads[root.index] = seed
        for node in reversed(self.nodes[: root.index + 1]):
            g = grads[node.index]
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads[parent.index]
                grads[parent.index] = pg if prev is None else prev + pg
        return grads

    def gradient(self, root, wrt, seed=None):
        """Gradients of ``root`` w.r.t. each leaf in ``wrt`` (zeros if unused)."""
        grads = self.backward(root, seed)
        out = []
        for leaf in wrt:
            g = grads[leaf.index] if leaf.index < len(grads) else None
            out.append(np.zeros_like(leaf.value) if g is None else np.asarray(g, dtype=np.float64))
        return out


def backpropagate(tape, root, wrt):
    """Gradient of a scalar ``root`` w.r.t. the leaves ``wrt``."""
    return tape.gradient(root, wrt)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise DimensionError(
            f"{op}: operands of shape {a.value.shape} and {b.value.shape} do not conform"
        ) from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    _check_broadcast("add", a, b)
    sa, sb = a.value.shape, b.value.shape
    return a.tape.record(
        a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b):
    _check_broadcast("sub", a, b)
    sa, sb = a.value.shape, b.value.shape
    return a.tape.record(
        a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b):
    _check_broadcast("mul", a, b)
    av, bv = a.value, b.value
    return a.tape.record(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b):
    _check_broadcast("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return a.tape.record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def neg(a):
    return a.tape.record(-a.value, (a,), lambda g: (-g,))


def square(a):
    av = a.value
    return a.tape.record(av * av, (a,), lambda g: (2.0 * g * av,))


def log(a):
    av = a.value
    if np.any(av <= 0):
        raise NumericError("log of non-positive value")
    return a.tape.record(np.log(av), (a,), lambda g: (g / av,))


def xlogx(a):
    """Elementwise x*log(x), the negative-entropy integrand."""
    av = a.value
    if np.any(av <= 0):
        raise NumericError("x log x needs strictly positive entries")
    lg = np.log(av)
    return a.tape.record(av * lg, (a,), lambda g: (g * (lg + 1.0),))


def softplus_array(z, temperature=1.0):
    """(1/beta) log(1 + exp(beta z)) computed without overflow."""
    bz = temperature * np.asarray(z, dtype=np.float64)
    big = bz > SOFTPLUS_SATURATION
    out = np.empty_like(bz)
    out[big] = bz[big] + np.log1p(np.exp(-bz[big]))
    out[~big] = np.log1p(np.exp(bz[~big]))
    return out / temperature


def op_softplus(x, temperature=1.0):
    if not temperature > 0:
        raise ConfigurationError(f"softplus temperature must be positive, got {temperature}")
    xv = x.value
    return x.tape.record(
        softplus_array(xv, temperature), (x,), lambda g: (g * expit(temperature * xv),)
    )


def softmax_array(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_vjp(y, g):
    """Vector-Jacobian product of softmax along the last axis, given its output y."""
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def op_softmax(x):
    if x.value.ndim == 0 or x.value.shape[-1] < 1:
        raise DimensionError("softmax needs a last dimension of size >= 1")
    y = softmax_array(x.value)
    return x.tape.record(y, (x,), lambda g: (softmax_vjp(y, g),))


# ------------------------------------------------------------------ structure


def reshape(a, shape):
    old = a.value.shape
    return a.tape.record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, key):
    shape = a.value.shape

    basic = all(isinstance(k, (slice, int, type(Ellipsis))) for k in
                (key if isinstance(key, tuple) else (key,)))

    def back(g):
        out = np.zeros(shape)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return a.tape.record(np.array(a.value[key]), (a,), back)


def concat(parts, axis=-1):
    tape = parts[0].tape
    sizes = [p.value.shape[axis] for p in parts]
    try:
        value = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    splits = np.cumsum(sizes)[:-1]
    return tape.record(value, tuple(parts), lambda g: tuple(np.split(g, splits, axis=axis)))


def reduce_sum(a, axis=None):
    shape = a.value.shape
    value = np.asarray(a.value.sum(axis=axis))

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape.record(value, (a,), back)


def op_reduce(a, kind="sum"):
    """Reduce by ``sum``/``mean`` over all axes or ``spatial-average-pool`` over the last two."""
    if kind == "sum":
        return reduce_sum(a)
    if kind == "mean":
        return reduce_sum(a) * (1.0 / a.value.size)
    if kind == "spatial-average-pool":
        if a.value.ndim < 2:
            raise DimensionError("spatial-average-pool needs two trailing spatial axes")
        h, w = a.value.shape[-2:]
        return reduce_sum(a, axis=(-2, -1)) * (1.0 / (h * w))
    raise ConfigurationError(f"unknown reduction kind {kind!r}")


def matmul(a, b):
    av, bv = a.value, b.value
    try:
        out = av @ bv
    except ValueError:
        raise DimensionError(f"matmul: shapes {av.shape} and {bv.shape} do not conform") from None

    def back(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return a.tape.record(np.asarray(out), (a, b), back)


def op_linear(x, weight, bias):
    """weight @ x + bias, applied to the last axis of ``x``."""
    n = x.value.shape[-1]
    if weight.value.ndim != 2 or weight.value.shape[1] != n:
        raise DimensionError(
            f"linear: input has {n} features but weight has shape {weight.value.shape}"
        )
    if bias.value.shape != (weight.value.shape[0],):
        raise DimensionError(
            f"linear: bias shape {bias.value.shape} does not match weight rows {weight.value.shape[0]}"
        )
    xv, wv = x.value, weight.value
    out = xv @ wv.T + bias.value

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xv.reshape(-1, n)
        return (g @ wv, g2.T @ x2, g2.sum(axis=0))

    return x.tape.record(out, (x, weight, bias), back)


# ---------------------------------------------------------------- convolution


def _offsets(xp, k, h, w):
    """Yield (i, j, window) with window the (c, h*w) patch of ``xp`` at kernel offset (i, j)."""
    c = xp.shape[0]
    for i in range(k):
        for j in range(k):
            yield i, j, xp[:, i : i + h, j : j + w].reshape(c, h * w)


def conv2d_array(x, kernels, bias=None):
    """Same-size zero-padded stride-1 cross-correlation, no autodiff.

    One (c_out x c_in) @ (c_in x hw) product per kernel offset; cheaper than
    materializing the full im2col matrix at these sizes.
    """
    c_out, _, k, _ = kernels.shape
    _, h, w = x.shape
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    taps = np.ascontiguousarray(kernels.transpose(2, 3, 0, 1))
    out = np.zeros((c_out, h * w))
    for i, j, win in _offsets(xp, k, h, w):
        out += taps[i, j] @ win
    out = out.reshape(c_out, h, w)
    if bias is not None:
        out += bias[:, None, None]
    return out


def op_conv2d(x, kernels, bias):
    """Cross-correlate a (c_in, h, w) image with (c_out, c_in, k, k) kernels.

    Zero padding of (k-1)/2 keeps the output (c_out, h, w).
    """
    xv, kv = x.value, kernels.value
    if kv.ndim != 4 or kv.shape[2] != kv.shape[3]:
        raise DimensionError(f"conv2d: kernels must be (c_out, c_in, k, k), got {kv.shape}")
    k = kv.shape[-1]
    if k % 2 == 0:
        raise ConfigurationError(f"conv2d: kernel size must be odd, got {k}")
    if xv.ndim != 3 or xv.shape[0] != kv.shape[1]:
        raise DimensionError(
            f"conv2d: input shape {xv.shape} does not match kernel input channels {kv.shape[1]}"
        )
    if bias.value.shape != (kv.shape[0],):
        raise DimensionError(f"conv2d: bias shape {bias.value.shape} != ({kv.shape[0]},)")
    c_out, c_in = kv.shape[:2]
    _, h, w = xv.shape
    p = (k - 1) // 2
    xp = np.pad(xv, ((0, 0), (p, p), (p, p)))
    out = conv2d_array(xv, kv, bias.value)

    def back(g):
        gx = gk = None
        g2 = g.reshape(c_out, h * w)
        if x.requires_grad:
            taps = np.ascontiguousarray(kv.transpose(2, 3, 1, 0))
            gxp = np.zeros((c_in, h + 2 * p, w + 2 * p))
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + h, j : j + w] += (taps[i, j] @ g2).reshape(c_in, h, w)
            gx = gxp[:, p : p + h, p : p + w]
        if kernels.requires_grad:
            gk = np.empty((k, k, c_out, c_in))
            for i, j, win in _offsets(xp, k, h, w):
                gk[i, j] = g2 @ win.T
            gk = np.ascontiguousarray(gk.transpose(2, 3, 0, 1))
        return gx, gk, g.sum(axis=(1, 2))

    return x.tape.record(out, (x, kernels, bias), back)


# ------------------------------------------------------------------- oracles


def fd_gradient(f, y, step=1e-5):
    """Central finite-difference gradient of a scalar function of an array."""
    y = np.array(y, dtype=np.float64)
    grad = np.zeros_like(y)
    flat = y.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(y)
        flat[i] = orig - step
        fm = f(y)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(a, b):
    """||a - b|| / max(||a||, ||b||), 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)
