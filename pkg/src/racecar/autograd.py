"""Minimal reverse-mode differentiation over numpy arrays.

Only the handful of primitives the networks here need are provided. A
:class:`Var` records its parents and a vector-Jacobian product; calling
:func:`grad` walks the graph in reverse creation order. Parameter leaves wrap
the network's own arrays (no copy), so forward and reverse passes built from
the same leaves are differentiated as one tied-weight graph.
"""
import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_counter = itertools.count()


class Var:
    __slots__ = ("value", "parents", "vjp", "order", "name", "requires")

    def __init__(self, value, parents=(), vjp=None, name=None, requires=True):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.order = next(_counter)
        self.name = name
        self.requires = requires

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name!r})"


def leaf(value, name=None, requires=True):
    """Graph input. ``requires=False`` marks data whose gradient is never wanted."""
    return Var(value, name=name, requires=requires)


def _needs(v):
    return v.__class__ is Var and v.requires


def const(value):
    return value.value if isinstance(value, Var) else value


def detach(x):
    return Var(const(x), requires=False)


def _node(value, parents, vjp):
    parents = tuple(parents)
    if not any(p.__class__ is Var and p.requires for p in parents):
        return Var(value, parents, None, requires=False)
    return Var(value, parents, vjp)


def grad(output, wrt, seed=None):
    """Gradients of ``output`` with respect to each Var in ``wrt``.

    ``seed`` is the upstream gradient (defaults to 1 for scalars). Inputs
    that do not influence ``output`` get zero arrays.
    """
    if seed is None:
        seed = np.ones_like(output.value)
    # Vars hash by identity, so they key the bookkeeping dicts directly
    seen = {output}
    stack = [output]
    nodes = []
    while stack:
        v = stack.pop()
        if v.vjp is not None:
            nodes.append(v)
        for p in v.parents:
            if p.__class__ is Var and p.requires and p not in seen:
                seen.add(p)
                stack.append(p)
    nodes.sort(key=_order, reverse=True)
    grads = {output: seed}
    for v in nodes:
        g = grads.get(v)
        if g is None:
            continue
        for p, pg in zip(v.parents, v.vjp(g)):
            if pg is None or p.__class__ is not Var:
                continue
            prev = grads.get(p)
            grads[p] = pg if prev is None else prev + pg
    return [grads[w] if w in grads else np.zeros_like(w.value) for w in wrt]


def _order(v):
    return v.order


# ---------------------------------------------------------------- elementwise


def add(a, b):
    av, bv = const(a), const(b)
    out = av + bv

    def vjp(g):
        return _unbroadcast(g, np.shape(av)), _unbroadcast(g, np.shape(bv))

    return _node(out, (a, b), vjp)


def sub(a, b):
    av, bv = const(a), const(b)
    out = av - bv

    def vjp(g):
        return _unbroadcast(g, np.shape(av)), -_unbroadcast(g, np.shape(bv))

    return _node(out, (a, b), vjp)


def scale(a, c):
    return _node(const(a) * c, (a,), lambda g: (g * c,))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def reshape(a, shape):
    av = const(a)
    old = av.shape
    return _node(av.reshape(shape), (a,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------- activations


def relu(a):
    av = const(a)
    mask = av > 0
    return _node(av * mask, (a,), lambda g: (g * mask,))


def lrelu(a, slope=0.2):
    av = const(a)
    factor = np.where(av > 0, 1.0, slope)
    return _node(av * factor, (a,), lambda g: (g * factor,))


def tanh(a):
    out = np.tanh(const(a))
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * const(a)))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


ACTIVATIONS = {
    "relu": relu,
    "lrelu": lrelu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "none": lambda a: a,
}


# ---------------------------------------------------------------- dense


def dense(x, w, b=None):
    """``x @ w.T + b`` for a batch ``x`` of shape (N, in) and ``w`` of shape (out, in)."""
    xv, wv = const(x), const(w)
    out = xv @ wv.T
    if b is not None:
        out = out + const(b)

    def vjp(g):
        gb = g.sum(axis=0) if b is not None else None
        return (g @ wv if _needs(x) else None), g.T @ xv, gb

    return _node(out, (x, w, b), vjp)


def dense_transpose(y, w, b=None):
    """Reverse of :func:`dense`: ``(y - b) @ w`` (i.e. ``M^T (y - b)`` per sample)."""
    yv, wv = const(y), const(w)
    centered = yv - const(b) if b is not None else yv
    out = centered @ wv

    def vjp(g):
        gy = g @ wv.T
        gb = -gy.sum(axis=0) if b is not None else None
        return gy, centered.T @ g, gb

    return _node(out, (y, w, b), vjp)


# ---------------------------------------------------------------- convolution
# Images are (N, H, W, C); kernels are (k, k, C_in, C_out).


def _same_pads(size, k, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def _im2col(x, k, stride):
    n, h, w, c = x.shape
    ho, pt, pb = _same_pads(h, k, stride)
    wo, pl, pr = _same_pads(w, k, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    # win: (n, ho, wo, c, k, k) -> (n*ho*wo, k*k*c) ordered (ky, kx, c)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
    return cols, (ho, wo, pt, pl, xp.shape)


def _col2im(cols, x_shape, k, stride):
    n, h, w, c = x_shape
    ho, pt, pb = _same_pads(h, k, stride)
    wo, pl, pr = _same_pads(w, k, stride)
    xp = np.zeros((n, h + pt + pb, w + pl + pr, c))
    patches = cols.reshape(n, ho, wo, k, k, c)
    for ky in range(k):
        for kx in range(k):
            xp[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride, :] += patches[:, :, :, ky, kx, :]
    return xp[:, pt : pt + h, pl : pl + w, :]


def conv2d(x, w, b=None, stride=1):
    xv, wv = const(x), const(w)
    k, _, cin, cout = wv.shape
    cols, (ho, wo, _, _, _) = _im2col(xv, k, stride)
    wm = wv.reshape(k * k * cin, cout)
    out = (cols @ wm).reshape(xv.shape[0], ho, wo, cout)
    if b is not None:
        out = out + const(b)

    def vjp(g):
        gf = g.reshape(-1, cout)
        gx = _col2im(gf @ wm.T, xv.shape, k, stride)
        gw = (cols.T @ gf).reshape(wv.shape)
        gb = gf.sum(axis=0) if b is not None else None
        return gx, gw, gb

    return _node(out, (x, w, b), vjp)


def conv2d_transpose(y, w, x_shape, b=None, stride=1):
    """Adjoint of :func:`conv2d` applied to ``y - b``; output has spatial shape ``x_shape``."""
    yv, wv = const(y), const(w)
    k, _, cin, cout = wv.shape
    centered = yv - const(b) if b is not None else yv
    gf = centered.reshape(-1, cout)
    wm = wv.reshape(k * k * cin, cout)
    full_shape = (yv.shape[0],) + tuple(x_shape)
    out = _col2im(gf @ wm.T, full_shape, k, stride)

    def vjp(g):
        cols, _ = _im2col(g, k, stride)
        gy = (cols @ wm).reshape(yv.shape)
        gw = (cols.T @ gf).reshape(wv.shape)
        gb = -gy.reshape(-1, cout).sum(axis=0) if b is not None else None
        return gy, gw, gb

    return _node(out, (y, w, b), vjp)


# ---------------------------------------------------------------- pooling


def maxpool2(x):
    xv = const(x)
    n, h, w, c = xv.shape
    blocks = xv.reshape(n, h // 2, 2, w // 2, 2, c)
    out = blocks.max(axis=(2, 4))
    mask = blocks == out[:, :, None, :, None, :]
    # ties: route the gradient to the first maximal element only
    flat = mask.transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    first = np.zeros_like(flat)
    idx = flat.argmax(axis=-1)
    np.put_along_axis(first, idx[..., None], True, axis=-1)
    mask = first.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)

    def vjp(g):
        return ((mask * g[:, :, None, :, None, :]).reshape(xv.shape),)

    return _node(out, (x,), vjp)


def upsample2(x):
    xv = const(x)
    out = xv.repeat(2, axis=1).repeat(2, axis=2)

    def vjp(g):
        n, h, w, c = xv.shape
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _node(out, (x,), vjp)


def avgpool2(x):
    xv = const(x)
    n, h, w, c = xv.shape
    out = xv.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def vjp(g):
        return (0.25 * g.repeat(2, axis=1).repeat(2, axis=2),)

    return _node(out, (x,), vjp)


# ---------------------------------------------------------------- batch norm


def batchnorm_train(x, gamma, beta, eps=1e-5):
    """Normalize with batch statistics over all axes but the last.

    Returns the output Var plus the (constant) batch mean and variance so the
    caller can update running averages.
    """
    xv = const(x)
    axes = tuple(range(xv.ndim - 1))
    count = xv.size // xv.shape[-1]
    mean = xv.mean(axis=axes)
    var = xv.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mean) * inv
    gv = const(gamma)
    out = xhat * gv + const(beta)

    def vjp(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gv
        gx = inv / count * (count * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
        return gx, gg, gb

    return _node(out, (x, gamma, beta), vjp), mean, var


def batchnorm_eval(x, gamma, beta, mean, var, eps=1e-5):
    xv = const(x)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mean) * inv
    gv = const(gamma)
    out = xhat * gv + const(beta)
    axes = tuple(range(xv.ndim - 1))

    def vjp(g):
        return g * gv * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _node(out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------- reductions


def sum_squares(a):
    av = const(a)
    return _node(np.asarray(np.sum(av * av)), (a,), lambda g: (2.0 * g * av,))


def sq_diff_mean(a, b):
    """Batch mean of the per-sample squared L2 distance between ``a`` and ``b``."""
    av, bv = const(a), const(b)
    diff = av - bv
    n = av.shape[0]
    out = np.asarray(np.sum(diff * diff) / n)

    def vjp(g):
        ga = (2.0 / n) * g * diff
        return ga, -ga

    return _node(out, (a, b), vjp)


def total(*terms):
    """Sum of scalar Vars and/or floats."""
    value = np.asarray(sum(float(const(t)) for t in terms))
    return _node(value, terms, lambda g: tuple(g for _ in terms))


def softmax_cross_entropy(logits, labels):
    z = const(logits)
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    out = np.asarray(-logp[np.arange(n), labels].mean())

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _node(out, (logits,), vjp)
