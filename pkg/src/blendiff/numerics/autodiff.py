"""A small reverse-mode automatic differentiation engine over numpy arrays.

Each :class:`Var` stores its value, the parents it was computed from, and a
closure mapping the upstream gradient to one gradient per parent.  Graphs are
built eagerly by the operator functions below and differentiated with
:func:`backward`.
"""

import numpy as np

from ..errors import NonScalarLoss


class Var:
    __slots__ = ("value", "grad", "parents", "_backward", "requires_grad", "name")

    def __init__(self, value, parents=(), backward=None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self._backward = backward
        self.requires_grad = requires_grad
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.value.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def param(value, name=None):
    """A leaf that accumulates a gradient."""
    return Var(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def const(value):
    return value if isinstance(value, Var) else Var(value)


def _make(value, parents, backward):
    if any(p.requires_grad for p in parents):
        return Var(value, parents, backward, requires_grad=True)
    return Var(value)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = const(a), const(b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = const(a), const(b)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    return _make(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b):
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    out = av / bv
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def neg(a):
    return _make(-a.value, (a,), lambda g: (-g,))


def power(a, exponent):
    av = a.value
    e = float(exponent)
    return _make(av**e, (a,), lambda g: (g * e * av ** (e - 1.0),))


def square(a):
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * g * av,))


def vabs(a):
    # sign(0) = 0 gives the zero subgradient at the kink.
    av = a.value
    return _make(np.abs(av), (a,), lambda g: (g * np.sign(av),))


def exp(a):
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    av = a.value
    return _make(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a):
    out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def tanh(a):
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    av = a.value
    return _make(np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0),))


def silu(a):
    av = a.value
    s = 0.5 * (1.0 + np.tanh(0.5 * av))
    return _make(av * s, (a,), lambda g: (g * (s + av * s * (1.0 - s)),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """tanh approximation of GELU."""
    x = a.value
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), back)


# --------------------------------------------------------------------------
# reductions and shape manipulation


def vsum(a, axis=None, keepdims=False):
    shape = a.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(out, (a,), back)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return vsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape):
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, i, j):
    return _make(np.swapaxes(a.value, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a, idx):
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.value[idx], (a,), back)


def concat(items, axis=-1):
    items = [const(v) for v in items]
    sizes = [v.shape[axis] for v in items]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([v.value for v in items], axis=axis)
    return _make(out, tuple(items), lambda g: tuple(np.split(g, splits, axis=axis)))


def broadcast_to(a, shape):
    old = a.shape
    return _make(np.broadcast_to(a.value, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),))


def upsample(a, factor, axis=-2):
    """Nearest-neighbour repetition along ``axis``."""
    out = np.repeat(a.value, factor, axis=axis)

    def back(g):
        ax = axis % g.ndim
        shape = g.shape[:ax] + (g.shape[ax] // factor, factor) + g.shape[ax + 1:]
        return (g.reshape(shape).sum(axis=ax + 1),)

    return _make(out, (a,), back)


# --------------------------------------------------------------------------
# linear algebra and network primitives


def matmul(a, b):
    a, b = const(a), const(b)
    av, bv = a.value, b.value

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make(av @ bv, (a, b), back)


def softmax(a, axis=-1):
    """Softmax that gives exactly zero weight to ``-inf`` logits."""
    x = a.value
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), back)


def conv1d(x, w, b=None):
    """'Same'-padded 1D convolution over the second-to-last axis.

    ``x`` is ``(..., N, C_in)``, ``w`` is ``(k, C_in, C_out)`` and ``b`` is
    ``(C_out,)``.  Zero padding of ``(k-1)//2`` frames on the left and
    ``k//2`` on the right keeps the length at ``N``.
    """
    x, w = const(x), const(w)
    xv, wv = x.value, w.value
    k, cin, cout = wv.shape
    n = xv.shape[-2]
    left, right = (k - 1) // 2, k // 2
    pad = [(0, 0)] * (xv.ndim - 2) + [(left, right), (0, 0)]
    xp = np.pad(xv, pad)
    cols = np.stack([xp[..., j:j + n, :] for j in range(k)], axis=-2)
    cols = cols.reshape(xv.shape[:-1] + (k * cin,))
    wmat = wv.reshape(k * cin, cout)
    out = cols @ wmat
    parents = (x, w)
    if b is not None:
        b = const(b)
        out = out + b.value
        parents = (x, w, b)

    def back(g):
        dcols = (g @ wmat.T).reshape(xv.shape[:-1] + (k, cin))
        dxp = np.zeros(xp.shape)
        for j in range(k):
            dxp[..., j:j + n, :] += dcols[..., j, :]
        dx = dxp[..., left:left + n, :]
        dw = (cols.reshape(-1, k * cin).T @ g.reshape(-1, cout)).reshape(k, cin, cout)
        if b is None:
            return dx, dw
        return dx, dw, g.reshape(-1, cout).sum(axis=0)

    return _make(out, parents, back)


def linear(x, w, b=None):
    out = matmul(x, w)
    return out if b is None else out + b


def layer_norm(x, gain=None, bias=None, eps=1e-5):
    mu = mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = mean(square(xc), axis=-1, keepdims=True)
    out = xc / sqrt(var + eps)
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out


def group_norm(x, groups, gain=None, bias=None, eps=1e-5):
    """Group normalization of ``(B, N, C)`` activations over time and channel groups."""
    bsz, n, c = x.shape
    xg = reshape(x, (bsz, n, groups, c // groups))
    mu = mean(xg, axis=(1, 3), keepdims=True)
    xc = xg - mu
    var = mean(square(xc), axis=(1, 3), keepdims=True)
    out = reshape(xc / sqrt(var + eps), (bsz, n, c))
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out


# --------------------------------------------------------------------------


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate ``d loss / d node`` into ``.grad`` of every node upstream of ``loss``."""
    if loss.value.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node.parents, grads):
            if not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64)
            else:
                parent.grad = parent.grad + g
        if node.parents:
            # interior nodes release their buffers once propagated
            node.grad = None


def gradients(loss, leaves):
    """Gradients of ``loss`` with respect to ``leaves`` (zeros where unreached)."""
    for leaf in leaves:
        leaf.grad = None
    backward(loss)
    return [leaf.grad if leaf.grad is not None else np.zeros(leaf.shape) for leaf in leaves]
