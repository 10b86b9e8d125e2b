"""Dense tensors with reverse-mode automatic differentiation.

A small numpy-backed tape: every operation returns a new ``Tensor`` that
remembers its parents and a vector-Jacobian closure.  ``backward`` walks the
graph in reverse topological order and *accumulates* into ``.grad`` (it never
overwrites, so repeated calls add up until grads are cleared).

Conventions kept deliberately strict so oracle comparisons stay unambiguous:

* row-major data, explicit shapes;
* no implicit broadcasting -- elementwise binary ops require identical shapes
  or a plain python scalar; use :func:`expand` when you want broadcasting;
* both operands of a binary op must share the dtype (float32 or float64);
* relu/abs subgradient at 0 is 0.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float64

_ALLOWED_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: shapes do not conform: " + " vs ".join(str(s) for s in self.shapes))


class Tensor:
    """A dense array plus optional gradient tracking.

    Parameters
    ----------
    data : array-like
        Row-major values; copied into a float32/float64 ndarray.
    requires_grad : bool
        Track operations on this tensor so ``backward`` can reach it.
    dtype : numpy dtype, optional
        float32 or float64; defaults to the data's float kind or
        ``DEFAULT_DTYPE`` for non-float input.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _ALLOWED_DTYPES else DEFAULT_DTYPE
        if dtype not in _ALLOWED_DTYPES:
            raise TypeError(f"unsupported dtype {dtype}; use float32 or float64")
        self.data = np.array(arr, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._op = "leaf"

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() needs a one-element tensor, got shape {self.shape}")

    def numpy(self):
        """A copy of the values as an ndarray."""
        return self.data.copy()

    def detach(self):
        """Same values, no graph attached."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._vjp = None
        t._op = "detach"
        return t

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self._op})"

    # -- operator sugar --------------------------------------------------------

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

    def __pow__(self, k):
        return power(self, k)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_const(x, like):
    return Tensor(np.full((), float(x)), dtype=like.dtype)


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager: ops inside build no tape (inference mode)."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


def _make(data, parents, vjp, op):
    """Wrap an op result; attaches the tape node only when a parent is tracked."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    tracked = _GRAD_ENABLED[0] and any(p.requires_grad for p in parents)
    out.requires_grad = tracked
    out._parents = parents if tracked else ()
    out._vjp = vjp if tracked else None
    return out


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype} (cast explicitly)")


def _is_scalar(x):
    return isinstance(x, (int, float, np.integer, np.floating))


# -- elementwise arithmetic ------------------------------------------------------


def add(a, b):
    if _is_scalar(b):
        s = float(b)
        return _make(a.data + np.asarray(s, a.dtype), (a,), lambda g: (g,), "add")
    if _is_scalar(a):
        return add(b, a)
    _check_same("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    if _is_scalar(b):
        return add(a, -float(b))
    if _is_scalar(a):
        return add(neg(b), float(a))
    _check_same("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    if _is_scalar(b):
        s = np.asarray(float(b), a.dtype)
        return _make(a.data * s, (a,), lambda g: (g * s,), "mul")
    if _is_scalar(a):
        return mul(b, a)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b):
    if _is_scalar(b):
        return mul(a, 1.0 / float(b))
    if _is_scalar(a):
        a = _as_const(a, b)
        s = a.data
        bd = b.data
        return _make(s / bd, (b,), lambda g: (-g * s / (bd * bd),), "div")
    _check_same("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, k):
    if not _is_scalar(k):
        raise TypeError("power: exponent must be a plain scalar")
    k = float(k)
    ad = a.data
    out = ad ** k
    return _make(out, (a,), lambda g: (g * k * ad ** (k - 1.0),), "power")


# -- elementwise nonlinearities ----------------------------------------------


def relu(a):
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def absolute(a):
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def silu(a):
    ad_ = a.data
    sig = 1.0 / (1.0 + np.exp(-ad_))
    return _make(ad_ * sig, (a,), lambda g: (g * (sig * (1.0 + ad_ * (1.0 - sig))),), "silu")


def tanh(a):
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def exp(a):
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a):
    r = np.sqrt(a.data)
    return _make(r, (a,), lambda g: (g / (2.0 * r),), "sqrt")


def clamp(a, lo, hi):
    ad = a.data
    mask = (ad >= lo) & (ad <= hi)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * mask,), "clamp")


# -- reductions/reshaping ----------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(np.asarray(g), shape).astype(a.dtype, copy=False),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape),)

    return _make(np.asarray(out, a.dtype), (a,), vjp, "sum")


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        n = a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    shape = tuple(shape)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def expand(a, shape):
    """Explicit broadcast of ``a`` to ``shape`` (gradient sums the new axes)."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("expand", a.shape, shape)
    old = a.shape
    lead = len(shape) - len(old)
    summed_axes = tuple(range(lead)) + tuple(
        lead + i for i, (so, sn) in enumerate(zip(old, shape[lead:])) if so == 1 and sn != 1
    )

    def vjp(g):
        gg = g.sum(axis=summed_axes, keepdims=False) if summed_axes else g
        return (gg.reshape(old),)

    return _make(np.asarray(out, order="C"), (a,), vjp, "expand")


def narrow(a, axis, start, length):
    """Contiguous slice ``[start, start+length)`` along one axis."""
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError("narrow", a.shape, (axis, start, length))
    idx = tuple(slice(None) if d != axis else slice(start, start + length) for d in range(a.ndim))
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make(np.asarray(a.data[idx], order="C"), (a,), vjp, "narrow")


def gather_rows(table, indices):
    """Row lookup ``table[indices]`` (embedding); gradient scatter-adds."""
    indices = np.asarray(indices, dtype=np.int64)
    shape = table.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, indices, g)
        return (full,)

    return _make(np.asarray(table.data[indices], order="C"), (table,), vjp, "gather_rows")


# -- linear algebra --------------------------------------------------------------


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if a.dtype != b.dtype:
        raise TypeError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        if ga.ndim > a.ndim:  # a was 2D against a batched b
            ga = ga.sum(axis=tuple(range(ga.ndim - a.ndim)))
        if gb.ndim > b.ndim:
            gb = gb.sum(axis=tuple(range(gb.ndim - b.ndim)))
        return (ga, gb)

    return _make(out, (a, b), vjp, "matmul")


def softmax(a, axis=-1):
    ad = a.data
    m = np.max(ad, axis=axis, keepdims=True)
    e = np.exp(ad - m)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        dot = np.sum(g * s, axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _make(s, (a,), vjp, "softmax")


NORM_EPS = 1e-12


def l2_norm(a, axis=-1, keepdims=False):
    """sqrt(sum(x^2) + eps) along an axis; the eps guard keeps gradients finite."""
    ad = a.data
    n = np.sqrt(np.sum(ad * ad, axis=axis, keepdims=True) + NORM_EPS)
    out = n if keepdims else np.squeeze(n, axis=axis)

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (gg * ad / n,)

    return _make(np.asarray(out, order="C"), (a,), vjp, "l2_norm")


def cosine_similarity(a, b, axis=-1):
    """cos(a, b) along ``axis`` with the shared norm guard epsilon."""
    _check_same("cosine_similarity", a, b)
    ad, bd = a.data, b.data
    na = np.sqrt(np.sum(ad * ad, axis=axis, keepdims=True) + NORM_EPS)
    nb = np.sqrt(np.sum(bd * bd, axis=axis, keepdims=True) + NORM_EPS)
    dot = np.sum(ad * bd, axis=axis, keepdims=True)
    cos = dot / (na * nb)

    def vjp(g):
        gg = np.expand_dims(g, axis)
        ga = gg * (bd / (na * nb) - cos * ad / (na * na))
        gb = gg * (ad / (na * nb) - cos * bd / (nb * nb))
        return (ga, gb)

    return _make(np.asarray(np.squeeze(cos, axis=axis), order="C"), (a, b), vjp, "cosine_similarity")


# -- structured ops (conv / resampling / norms / rope) --------------------------


def conv2d(x, w, bias=None, stride=1, padding=0):
    """2D convolution; NHWC activations, OIHW kernel, zero padding.

    ``bias`` is per-output-channel and optional.  The kernel must fit inside
    the padded input.  Internally an im2col GEMM; channels-last keeps the
    patch gather and the backward scatter cache-friendly.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d", x.shape, w.shape)
    b, h, wdt, c_in = x.shape
    c_out, c_in_w, kh, kw = w.shape
    if c_in != c_in_w:
        raise ShapeError("conv2d", x.shape, w.shape)
    hp, wp = h + 2 * padding, wdt + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError("conv2d (kernel larger than padded input)", (hp, wp), (kh, kw))
    if x.dtype != w.dtype:
        raise TypeError(f"conv2d: dtype mismatch {x.dtype} vs {w.dtype}")
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    cols = np.empty((b, h_out, w_out, kh, kw, c_in), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride, :]
    cols = cols.reshape(b * h_out * w_out, kh * kw * c_in)
    wmat = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0).reshape(kh * kw * c_in, c_out))
    out2 = cols @ wmat
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError("conv2d bias", bias.shape, (c_out,))
        out2 += bias.data
    out = out2.reshape(b, h_out, w_out, c_out)

    parents = (x, w) if bias is None else (x, w, bias)

    def vjp(g):
        g2 = g.reshape(b * h_out * w_out, c_out)
        gw = (cols.T @ g2).reshape(kh, kw, c_in, c_out).transpose(3, 2, 0, 1)
        gcols = (g2 @ wmat.T).reshape(b, h_out, w_out, kh, kw, c_in)
        gxp = np.zeros((b, hp, wp, c_in), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, padding : padding + h, padding : padding + wdt, :] if padding else gxp
        if bias is None:
            return (gx, gw)
        return (gx, gw, g2.sum(axis=0))

    return _make(out, parents, vjp, "conv2d")


def upsample_nearest(x, factor):
    """Nearest-neighbour upsampling of an NHWC tensor by an integer factor."""
    if x.ndim != 4:
        raise ShapeError("upsample_nearest", x.shape)
    f = int(factor)
    b, h, w, c = x.shape
    out = x.data.repeat(f, axis=1).repeat(f, axis=2)

    def vjp(g):
        return (g.reshape(b, h, f, w, f, c).sum(axis=(2, 4)),)

    return _make(out, (x,), vjp, "upsample_nearest")


def group_norm(x, gamma, beta, groups, eps=1e-5):
    """GroupNorm over an NHWC tensor; per-channel affine."""
    b, h, w, c = x.shape
    if c % groups:
        raise ShapeError("group_norm (channels not divisible by groups)", x.shape, (groups,))
    xg = x.data.reshape(b, h, w, groups, c // groups)
    mu = xg.mean(axis=(1, 2, 4), keepdims=True)
    var = xg.var(axis=(1, 2, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(b, h, w, c)
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gxhat = (g * gamma.data).reshape(b, h, w, groups, c // groups)
        xh = xhat.reshape(b, h, w, groups, c // groups)
        m1 = gxhat.mean(axis=(1, 2, 4), keepdims=True)
        m2 = (gxhat * xh).mean(axis=(1, 2, 4), keepdims=True)
        gx = ((gxhat - m1 - xh * m2) * inv).reshape(b, h, w, c)
        ggamma = (g * xhat).sum(axis=(0, 1, 2))
        gbeta = g.sum(axis=(0, 1, 2))
        return (gx, ggamma, gbeta)

    return _make(out, (x, gamma, beta), vjp, "group_norm")


def rms_norm(x, gain, eps=1e-6):
    """x / rms(x) * gain over the last axis."""
    d = x.shape[-1]
    if gain.shape != (d,):
        raise ShapeError("rms_norm", x.shape, gain.shape)
    xd = x.data
    r = np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xhat = xd / r
    out = xhat * gain.data

    def vjp(g):
        gg = g * gain.data
        m = np.mean(gg * xhat, axis=-1, keepdims=True)
        gx = (gg - xhat * m) / r
        axes = tuple(range(x.ndim - 1))
        return (gx, (g * xhat).sum(axis=axes))

    return _make(out, (x, gain), vjp, "rms_norm")


def rope_apply(x, cos, sin):
    """Rotate adjacent channel pairs of ``x`` by precomputed angles.

    ``x`` has shape (..., T, D) with D even; ``cos``/``sin`` have shape
    (T, D//2), one angle per pair.  The gradient is the inverse rotation.
    """
    if x.shape[-1] % 2:
        raise ShapeError("rope_apply (odd channel count)", x.shape)
    xe = x.data[..., 0::2]
    xo = x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def vjp(g):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return _make(out, (x,), vjp, "rope_apply")


# -- backward pass -------------------------------------------------------------


def _topo_order(root):
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return topo


def _own(pg, g):
    """Give ``pg`` its own buffer when it aliases the upstream gradient ``g``.

    Every vjp either returns fresh arrays or cheap views of ``g`` (reshape,
    transpose, broadcast, identity pass-through); only the latter must be
    copied before they become accumulation buffers.
    """
    if pg is g or not pg.flags.writeable:
        return pg.copy()
    base = pg.base
    while base is not None:
        if base is g or (g.base is not None and base is g.base):
            return pg.copy()
        base = base.base if isinstance(base, np.ndarray) else None
    return pg


def grad_table(root, targets):
    """Gradients of a scalar ``root`` w.r.t. ``targets``, without touching ``.grad``.

    Returns a list of ndarrays (zeros when a target is unreachable).  Useful
    for gradient probes that must not pollute accumulated training gradients.
    Only the part of the graph between ``root`` and the targets is walked.
    """
    if root.size != 1:
        raise ValueError(f"grad_table needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return [np.zeros_like(t.data) for t in targets]

    topo = _topo_order(root)
    target_ids = {id(t) for t in targets}
    needed = set()
    for node in topo:  # parents precede children, so one pass suffices
        if id(node) in target_ids or any(id(p) in needed or id(p) in target_ids for p in node._parents):
            needed.add(id(node))

    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None or node._vjp is None or id(node) not in needed:
            continue
        for p, pg in zip(node._parents, node._vjp(g)):
            if not p.requires_grad or pg is None:
                continue
            if id(p) not in needed and id(p) not in target_ids:
                continue
            acc = grads.get(id(p))
            if acc is None:
                grads[id(p)] = _own(pg, g).astype(p.dtype, copy=False)
            else:
                acc += pg
    return [grads.get(id(t), np.zeros_like(t.data)) for t in targets]


def backward(root):
    """Accumulate d(root)/d(leaf) into ``.grad`` of every tracked leaf tensor.

    ``root`` must be a one-element tensor produced by tracked ops.  Repeated
    calls keep adding into ``.grad`` until grads are cleared; gradients of
    intermediate results are transient and not stored.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward: root does not require grad (no tracked inputs)")

    topo = _topo_order(root)
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is not None:
            for p, pg in zip(node._parents, node._vjp(g)):
                if not p.requires_grad or pg is None:
                    continue
                acc = grads.get(id(p))
                if acc is None:
                    grads[id(p)] = _own(pg, g).astype(p.dtype, copy=False)
                else:
                    acc += pg
        else:
            # leaves accumulate; intermediate gradients stay transient
            if node.grad is None:
                node.grad = g if g.flags.owndata and g.flags.writeable else g.copy()
            else:
                node.grad += g
