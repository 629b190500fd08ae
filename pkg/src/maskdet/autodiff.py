"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every operation of one forward pass in creation
order; ``Tape.backward`` replays the records in reverse, accumulating
gradients into each participating :class:`Tensor` exactly once per record.
Reverse creation order is a valid topological order because a tensor can
only be consumed after it was created.

All values are float64.  The module-level helpers (``exp``, ``sum``,
``conv2d``, ...) dispatch on input type: Tensor arguments build tape
records, plain numpy arrays evaluate the identical forward arithmetic with
nothing recorded.  Loss and network code written against these helpers
therefore runs both as differentiable graph and as a pure forward pass.

Distinct tapes may be used concurrently from distinct threads; a single
tape must not be shared across threads.
"""

from __future__ import annotations

import threading

import numpy as np

_ACTIVE = threading.local()


def _active_tape():
    return getattr(_ACTIVE, "tape", None)


def tape_active() -> bool:
    """True when a Tape is currently recording on this thread."""
    return _active_tape() is not None


class Tape:
    """Append-only record of one forward pass, replayed backward."""

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a Tape is already active on this thread")
        _ACTIVE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.tape = None
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, root: "Tensor") -> None:
        """Seed d(root)/d(root)=1 and visit records in reverse order once."""
        if root.data.shape != ():
            raise ValueError(
                f"backward root must be scalar, got shape {root.data.shape}"
            )
        root.grad = np.array(1.0)
        for node in reversed(self._nodes):
            if node.grad is not None:
                node._backward(node.grad)


class Tensor:
    """A float64 numpy array with an accumulated gradient buffer."""

    # Keep numpy from absorbing Tensor operands into object arrays; binary
    # ops with an ndarray on the left then fall through to our r-methods.
    __array_ufunc__ = None

    __slots__ = ("data", "grad", "_backward")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # -- arithmetic ---------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            def bw(g, a=self, b=other):
                _accum(a, g)
                _accum(b, g)
            return _node(self.data + _raw(other), bw)

        def bw(g, a=self):
            _accum(a, g)
        return _node(self.data + _raw(other), bw)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            def bw(g, a=self, b=other):
                _accum(a, g * b.data)
                _accum(b, g * a.data)
            return _node(self.data * other.data, bw)

        oa = np.asarray(other, dtype=np.float64)

        def bw(g, a=self, c=oa):
            _accum(a, g * c)
        return _node(self.data * oa, bw)

    __rmul__ = __mul__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            def bw(g, a=self, b=other):
                _accum(a, g)
                _accum(b, -g)
            return _node(self.data - other.data, bw)

        def bw(g, a=self):
            _accum(a, g)
        return _node(self.data - np.asarray(other, dtype=np.float64), bw)

    def __rsub__(self, other):
        def bw(g, a=self):
            _accum(a, -g)
        return _node(np.asarray(other, dtype=np.float64) - self.data, bw)

    def __neg__(self):
        def bw(g, a=self):
            _accum(a, -g)
        return _node(-self.data, bw)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            def bw(g, a=self, b=other):
                _accum(a, g / b.data)
                _accum(b, -g * a.data / (b.data * b.data))
            return _node(self.data / other.data, bw)

        oa = np.asarray(other, dtype=np.float64)

        def bw(g, a=self, c=oa):
            _accum(a, g / c)
        return _node(self.data / oa, bw)

    def __rtruediv__(self, other):
        oa = np.asarray(other, dtype=np.float64)

        def bw(g, a=self, c=oa):
            _accum(a, -g * c / (a.data * a.data))
        return _node(oa / self.data, bw)

    def __pow__(self, exponent):
        e = float(exponent)

        def bw(g, a=self, e=e):
            _accum(a, g * e * a.data ** (e - 1.0))
        return _node(self.data ** e, bw)

    # -- elementwise nonlinearities ------------------------------------

    def exp(self):
        out = np.exp(self.data)

        def bw(g, a=self, o=out):
            _accum(a, g * o)
        return _node(out, bw)

    def log(self):
        def bw(g, a=self):
            _accum(a, g / a.data)
        return _node(np.log(self.data), bw)

    def sqrt(self):
        out = np.sqrt(self.data)

        def bw(g, a=self, o=out):
            _accum(a, g * 0.5 / o)
        return _node(out, bw)

    def abs(self):
        def bw(g, a=self):
            _accum(a, g * np.sign(a.data))
        return _node(np.abs(self.data), bw)

    def relu(self):
        def bw(g, a=self):
            _accum(a, g * (a.data > 0.0))
        return _node(np.maximum(self.data, 0.0), bw)

    def sigmoid(self):
        out = _sigmoid(self.data)

        def bw(g, a=self, o=out):
            _accum(a, g * o * (1.0 - o))
        return _node(out, bw)

    def softplus(self):
        def bw(g, a=self):
            _accum(a, g * _sigmoid(a.data))
        return _node(np.logaddexp(0.0, self.data), bw)

    def clip(self, lo, hi):
        inside = (self.data > lo) & (self.data < hi)

        def bw(g, a=self, m=inside):
            _accum(a, g * m)
        return _node(np.clip(self.data, lo, hi), bw)

    # -- reductions and structure ---------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g, a=self, axis=axis, keepdims=keepdims):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape))
        return _node(out, bw)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[ax] for ax in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def __getitem__(self, idx):
        def bw(g, a=self, idx=idx):
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            _accum(a, buf, exact=True)
        return _node(self.data[idx], bw)


def _raw(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _node(data, backward) -> Tensor:
    tape = _active_tape()
    if tape is None:
        raise RuntimeError("Tensor operations require an active Tape")
    t = Tensor(data)
    t._backward = backward
    tape._nodes.append(t)
    return t


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _accum(t, g, exact=False):
    if not isinstance(t, Tensor):
        return
    if not exact:
        g = _unbroadcast(np.asarray(g), t.data.shape)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _sigmoid(x):
    # evaluated branch-wise so large |x| never overflows exp
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# dispatch helpers: Tensor -> tape op, ndarray/scalar -> plain numpy
# ---------------------------------------------------------------------------

def value(x):
    """Forward value of x as a numpy array (or python float passthrough)."""
    return x.data if isinstance(x, Tensor) else x


def exp(x):
    return x.exp() if isinstance(x, Tensor) else np.exp(x)


def log(x):
    return x.log() if isinstance(x, Tensor) else np.log(x)


def sqrt(x):
    return x.sqrt() if isinstance(x, Tensor) else np.sqrt(x)


def absolute(x):
    return x.abs() if isinstance(x, Tensor) else np.abs(x)


def relu(x):
    return x.relu() if isinstance(x, Tensor) else np.maximum(x, 0.0)


def sigmoid(x):
    return x.sigmoid() if isinstance(x, Tensor) else _sigmoid(np.asarray(x, dtype=np.float64))


def softplus(x):
    return x.softplus() if isinstance(x, Tensor) else np.logaddexp(0.0, x)


def clip(x, lo, hi):
    return x.clip(lo, hi) if isinstance(x, Tensor) else np.clip(x, lo, hi)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors np.sum for dispatch
    if isinstance(x, Tensor):
        return x.sum(axis=axis, keepdims=keepdims)
    return np.sum(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    if isinstance(x, Tensor):
        return x.mean(axis=axis, keepdims=keepdims)
    return np.mean(x, axis=axis, keepdims=keepdims)


def flip_cols(x):
    """Mirror along the second (column) axis; self-inverse."""
    if isinstance(x, Tensor):
        def bw(g, a=x):
            _accum(a, g[:, ::-1])
        return _node(x.data[:, ::-1].copy(), bw)
    return x[:, ::-1].copy()


def concat(parts, axis):
    if any(isinstance(p, Tensor) for p in parts):
        datas = [_raw(p) for p in parts]
        sizes = [d.shape[axis] for d in datas]

        def bw(g, parts=parts, sizes=sizes, axis=axis):
            start = 0
            for p, n in zip(parts, sizes):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, start + n)
                _accum(p, g[tuple(sl)])
                start += n
        return _node(np.concatenate(datas, axis=axis), bw)
    return np.concatenate(parts, axis=axis)


def dense(x, w, b):
    """Vector-matrix affine map: x (n,) @ w (n,m) + b (m,)."""
    if isinstance(x, Tensor) or isinstance(w, Tensor) or isinstance(b, Tensor):
        xa, wa = _raw(x), _raw(w)

        def bw(g, x=x, w=w, b=b, xa=xa, wa=wa):
            _accum(x, wa @ g)
            _accum(w, np.outer(xa, g))
            _accum(b, g)
        return _node(xa @ wa + _raw(b), bw)
    return x @ w + b


def global_avg_pool(x):
    """(H, W, C) -> (C,) spatial mean per channel."""
    if isinstance(x, Tensor):
        h, w, _ = x.data.shape

        def bw(g, a=x, n=float(h * w)):
            _accum(a, np.broadcast_to(g / n, a.data.shape))
        return _node(x.data.mean(axis=(0, 1)), bw)
    return x.mean(axis=(0, 1))


def global_max_pool(x):
    """(H, W, C) -> (C,) spatial max per channel; grad routes to argmax."""
    if isinstance(x, Tensor):
        h, w, c = x.data.shape
        flat = x.data.reshape(-1, c)
        am = flat.argmax(axis=0)

        def bw(g, a=x, am=am, w=w, c=c):
            buf = np.zeros_like(a.data)
            buf[am // w, am % w, np.arange(c)] = g
            _accum(a, buf, exact=True)
        return _node(flat.max(axis=0), bw)
    return x.max(axis=(0, 1))


def channel_mean(x):
    """(H, W, C) -> (H, W, 1) mean over channels."""
    if isinstance(x, Tensor):
        return x.mean(axis=2, keepdims=True)
    return x.mean(axis=2, keepdims=True)


def channel_max(x):
    """(H, W, C) -> (H, W, 1) max over channels; grad routes to argmax."""
    if isinstance(x, Tensor):
        am = x.data.argmax(axis=2)

        def bw(g, a=x, am=am):
            buf = np.zeros_like(a.data)
            np.put_along_axis(buf, am[:, :, None], g, axis=2)
            _accum(a, buf, exact=True)
        return _node(x.data.max(axis=2, keepdims=True), bw)
    return x.max(axis=2, keepdims=True)


# ---------------------------------------------------------------------------
# 2-d convolution (HWC layout, square kernel, zero "same" padding)
# ---------------------------------------------------------------------------

def _conv_forward(x, w, b, stride):
    kh, kw, cin, cout = w.shape
    if kh != kw:
        raise ValueError(f"square kernels only, got {kh}x{kw}")
    if x.ndim != 3 or x.shape[2] != cin:
        raise ValueError(
            f"input shape {x.shape} incompatible with kernel {w.shape}"
        )
    p = (kh - 1) // 2
    xp = np.pad(x, ((p, p), (p, p), (0, 0))) if p else x
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    windows = windows[::stride, ::stride]            # (H', W', Cin, kh, kw)
    out = np.tensordot(windows, w, axes=([2, 3, 4], [2, 0, 1]))
    if b is not None:
        out = out + b
    return np.ascontiguousarray(out), xp


def _conv_backward(g, xp, w, stride, x_shape, need_dx):
    kh, kw, cin, cout = w.shape
    hh, ww = g.shape[:2]
    p = (kh - 1) // 2
    db = g.sum(axis=(0, 1))
    dw = np.empty_like(w)
    dxp = np.zeros_like(xp) if need_dx else None
    for a in range(kh):
        ra = slice(a, a + stride * (hh - 1) + 1, stride)
        for b_ in range(kw):
            cb = slice(b_, b_ + stride * (ww - 1) + 1, stride)
            dw[a, b_] = np.tensordot(xp[ra, cb], g, axes=([0, 1], [0, 1]))
            if need_dx:
                dxp[ra, cb] += np.tensordot(g, w[a, b_], axes=([2], [1]))
    dx = None
    if need_dx:
        dx = dxp[p:p + x_shape[0], p:p + x_shape[1]] if p else dxp
    return dx, dw, db


def conv2d(x, w, b=None, stride=1):
    """2-d cross-correlation, zero-padded to `same` spatial support.

    x: (H, W, Cin); w: (k, k, Cin, Cout); b: (Cout,) or None.
    Output spatial dims are ceil(H/stride) x ceil(W/stride) for odd k.
    """
    tensorish = any(isinstance(t, Tensor) for t in (x, w, b))
    xa, wa = _raw(x), _raw(w)
    ba = None if b is None else _raw(b)
    out, xp = _conv_forward(xa, wa, ba, stride)
    if not tensorish:
        return out

    def bw(g, x=x, w=w, b=b, xp=xp, wa=wa, stride=stride, xs=xa.shape):
        dx, dw, db = _conv_backward(
            g, xp, wa, stride, xs, need_dx=isinstance(x, Tensor)
        )
        if dx is not None:
            _accum(x, dx, exact=True)
        _accum(w, dw, exact=True)
        if b is not None:
            _accum(b, db, exact=True)
    return _node(out, bw)
