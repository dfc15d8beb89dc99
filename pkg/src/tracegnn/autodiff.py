"""A small tape-free reverse-mode autodiff engine over float64 numpy arrays.

Each :class:`Var` remembers its parents and a closure that pushes the
incoming gradient to them. :func:`backward` visits nodes in reverse creation
order, so gradient accumulation is deterministic.

The row-wise kernels (MLP, GRU cell, GRU scan) are fused ops with hand-written
backward passes. They evaluate on the *distinct* input rows, sorted by their
byte content, and scatter the results back. BLAS rounding depends on where a
row sits in the batch; presenting the same canonical batch regardless of how
entities are numbered makes the forward pass exactly equivariant under
relabeling. ``segment_sum`` likewise adds each segment's rows in content order.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

from .errors import GraphNotScalar, ShapeMismatch

_counter = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Evaluate without recording backward closures."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "order")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.order = next(_counter)
        if _grad_enabled and parents and any(p.requires_grad for p in parents):
            self.parents = parents
            self.backward_fn = backward_fn
            self.requires_grad = True
        else:
            self.parents = ()
            self.backward_fn = None
            self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def param(value) -> Var:
    """A leaf that collects gradients."""
    return Var(np.array(value, dtype=np.float64), requires_grad=True)


def const(value) -> Var:
    return value if isinstance(value, Var) else Var(value)


def _accum(var, g):
    if not var.requires_grad:
        return
    if var.grad is None:
        var.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        var.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Var) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on."""
    if loss.value.size != 1:
        raise GraphNotScalar(f"backward needs a scalar, got shape {loss.value.shape}")
    nodes, seen, stack = [], set(), [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node.parents)
    nodes.sort(key=lambda n: n.order, reverse=True)
    for node in nodes:
        node.grad = None if node.backward_fn is not None else node.grad
    loss.grad = np.ones_like(loss.value)
    for node in nodes:
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


# ------------------------------------------------------------ elementwise

def add(a, b):
    a, b = const(a), const(b)
    out = Var(a.value + b.value, (a, b), None)
    out.backward_fn = lambda g: (_accum(a, _unbroadcast(g, a.shape)), _accum(b, _unbroadcast(g, b.shape)))
    return out


def sub(a, b):
    a, b = const(a), const(b)
    out = Var(a.value - b.value, (a, b), None)
    out.backward_fn = lambda g: (_accum(a, _unbroadcast(g, a.shape)), _accum(b, _unbroadcast(-g, b.shape)))
    return out


def mul(a, b):
    a, b = const(a), const(b)
    out = Var(a.value * b.value, (a, b), None)
    out.backward_fn = lambda g: (_accum(a, _unbroadcast(g * b.value, a.shape)),
                                 _accum(b, _unbroadcast(g * a.value, b.shape)))
    return out


def matmul(a, b):
    a, b = const(a), const(b)
    if a.value.shape[-1] != b.value.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    out = Var(a.value @ b.value, (a, b), None)
    out.backward_fn = lambda g: (_accum(a, g @ b.value.T), _accum(b, a.value.T @ g))
    return out


def sigmoid_np(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def log(a):
    a = const(a)
    out = Var(np.log(a.value), (a,), None)
    out.backward_fn = lambda g: _accum(a, g / a.value)
    return out


def log_ratio(a, ref):
    """ln(a / ref) for a constant ``ref``; exact when a is an exact multiple."""
    a, ref = const(a), np.asarray(ref, dtype=np.float64)
    out = Var(np.log(a.value / ref), (a,), None)
    out.backward_fn = lambda g: _accum(a, g / a.value)
    return out


def softplus(a):
    a = const(a)
    out = Var(np.logaddexp(0.0, a.value), (a,), None)
    out.backward_fn = lambda g: _accum(a, g * sigmoid_np(a.value))
    return out


def square(a):
    a = const(a)
    out = Var(a.value * a.value, (a,), None)
    out.backward_fn = lambda g: _accum(a, 2.0 * g * a.value)
    return out


def total(a):
    a = const(a)
    out = Var(np.sum(a.value), (a,), None)
    out.backward_fn = lambda g: _accum(a, np.broadcast_to(g, a.shape))
    return out


def mean(a):
    a = const(a)
    n = a.value.size
    out = Var(np.sum(a.value) / n, (a,), None)
    out.backward_fn = lambda g: _accum(a, np.broadcast_to(g / n, a.shape))
    return out


# ------------------------------------------------------------ structural

def concat(parts, axis=-1):
    parts = [const(p) for p in parts]
    out = Var(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), None)
    bounds = np.cumsum([0] + [p.value.shape[axis] for p in parts])

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                _accum(p, np.take(g, np.arange(lo, hi), axis=axis))
    out.backward_fn = bw
    return out


def take_rows(a, idx):
    """``a[idx]`` along the first axis (repeats allowed)."""
    a = const(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = Var(a.value[idx], (a,), None)

    def bw(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        _accum(a, full)
    out.backward_fn = bw
    return out


def put_rows(a, idx, rows):
    """Copy of ``a`` with ``a[idx] = rows`` (``idx`` without repeats)."""
    a, rows = const(a), const(rows)
    idx = np.asarray(idx, dtype=np.intp)
    value = a.value.copy()
    value[idx] = rows.value
    out = Var(value, (a, rows), None)

    def bw(g):
        if a.requires_grad:
            ga = g.copy()
            ga[idx] = 0.0
            _accum(a, ga)
        _accum(rows, g[idx])
    out.backward_fn = bw
    return out


def assemble_rows(n, width, parts):
    """Stack ``(idx, rows)`` parts into an ``(n, width)`` matrix; unset rows are 0."""
    parts = [(np.asarray(i, dtype=np.intp), const(r)) for i, r in parts]
    value = np.zeros((n, width))
    for i, r in parts:
        value[i] = r.value
    out = Var(value, tuple(r for _, r in parts), None)

    def bw(g):
        for i, r in parts:
            _accum(r, g[i])
    out.backward_fn = bw
    return out


def _row_keys(m):
    m = np.ascontiguousarray(m)
    return m.view(np.dtype((np.void, m.dtype.itemsize * m.shape[1]))).ravel()


def canonical_rows(m):
    """Distinct rows of a 2-D array in byte-content order, and the inverse map.

    ``uniq[inv] == m`` exactly. The order depends only on the multiset of rows.
    """
    m = np.ascontiguousarray(m, dtype=np.float64)
    if m.shape[0] == 0:
        return m, np.zeros(0, dtype=np.intp)
    keys = _row_keys(m)
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    first = np.empty(len(sk), dtype=bool)
    first[0] = True
    first[1:] = sk[1:] != sk[:-1]
    inv = np.empty(len(m), dtype=np.intp)
    inv[order] = np.cumsum(first) - 1
    return m[order[first]], inv


def segment_sum(a, segments, n):
    """Sum rows of ``a`` into ``n`` segments; each segment adds its rows in content order."""
    a = const(a)
    seg = np.asarray(segments, dtype=np.intp)
    width = a.value.shape[1]
    value = np.zeros((n, width))
    if len(seg):
        order = np.argsort(_row_keys(a.value), kind="stable")
        order = order[np.argsort(seg[order], kind="stable")]
        s = seg[order]
        starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
        value[s[starts]] = np.add.reduceat(a.value[order], starts, axis=0)
    out = Var(value, (a,), None)
    out.backward_fn = lambda g: _accum(a, g[seg])
    return out


# ------------------------------------------------------------ fused kernels

def _check_cols(x, n, what):
    if x.shape[-1] != n:
        raise ShapeMismatch(f"{what}: expected width {n}, got {x.shape[-1]}")


def mlp(x, layers):
    """Affine layers with tanh between them; the last layer is linear.

    ``layers`` is a sequence of ``(W, b)`` pairs of Vars, ``W`` shaped (in, out).
    """
    x = const(x)
    layers = [(const(W), const(b)) for W, b in layers]
    if x.value.ndim != 2:
        raise ShapeMismatch(f"mlp input must be 2-D, got {x.shape}")
    _check_cols(x.value, layers[0][0].value.shape[0], "mlp input")
    uniq, inv = canonical_rows(x.value)
    acts = [uniq]
    a = uniq
    for k, (W, b) in enumerate(layers):
        if W.value.shape[0] != a.shape[1] or b.value.shape != (W.value.shape[1],):
            raise ShapeMismatch(f"mlp layer {k}: W {W.shape}, b {b.shape}, input width {a.shape[1]}")
        a = a @ W.value + b.value
        if k < len(layers) - 1:
            a = np.tanh(a)
        acts.append(a)
    parents = (x,) + tuple(v for pair in layers for v in pair)
    out = Var(a[inv], parents, None)

    def bw(g):
        full = [act[inv] for act in acts]
        for k in range(len(layers) - 1, -1, -1):
            W, b = layers[k]
            if k < len(layers) - 1:
                g = g * (1.0 - full[k + 1] * full[k + 1])
            _accum(W, full[k].T @ g)
            _accum(b, g.sum(axis=0))
            g = g @ W.value.T
        _accum(x, g)
    out.backward_fn = bw
    return out


def _split_gru(W, b, n_in, hidden):
    if W.value.shape != (n_in + hidden, 3 * hidden) or b.value.shape != (3 * hidden,):
        raise ShapeMismatch(
            f"GRU weights {W.shape}/{b.shape} do not fit input {n_in}, state {hidden}")


def gru_cell(x, h, W, b):
    """One GRU step over a batch of rows.

    z = sigmoid([x,h] W_z + b_z), r = sigmoid([x,h] W_r + b_r),
    c = tanh([x, r*h] W_c + b_c), h' = (1 - z) h + z c.
    ``W`` is (in + H, 3H) with column blocks [z | r | c].
    """
    x, h, W, b = const(x), const(h), const(W), const(b)
    if x.value.ndim != 2 or h.value.ndim != 2 or x.value.shape[0] != h.value.shape[0]:
        raise ShapeMismatch(f"gru_cell batch mismatch: x {x.shape}, h {h.shape}")
    n_in, H = x.value.shape[1], h.value.shape[1]
    _split_gru(W, b, n_in, H)
    uniq, inv = canonical_rows(np.concatenate([x.value, h.value], axis=1))
    xu, hu = uniq[:, :n_in], uniq[:, n_in:]
    Wv, bv = W.value, b.value
    zr = sigmoid_np(uniq @ Wv[:, :2 * H] + bv[:2 * H])
    z, r = zr[:, :H], zr[:, H:]
    xrh = np.concatenate([xu, r * hu], axis=1)
    c = np.tanh(xrh @ Wv[:, 2 * H:] + bv[2 * H:])
    hn = (1.0 - z) * hu + z * c
    out = Var(hn[inv], (x, h, W, b), None)

    def bw(g):
        zi, ri, ci, hi = z[inv], r[inv], c[inv], h.value
        xh = np.concatenate([x.value, hi], axis=1)
        dz = g * (ci - hi)
        dac = g * zi * (1.0 - ci * ci)
        dh = g * (1.0 - zi)
        dxrh = dac @ Wv[:, 2 * H:].T
        drh = dxrh[:, n_in:]
        dar = drh * hi * ri * (1.0 - ri)
        dh += drh * ri
        daz = dz * zi * (1.0 - zi)
        dazr = np.concatenate([daz, dar], axis=1)
        dxh = dazr @ Wv[:, :2 * H].T
        dW = np.empty_like(Wv)
        dW[:, :2 * H] = xh.T @ dazr
        dW[:, 2 * H:] = np.concatenate([x.value, ri * hi], axis=1).T @ dac
        _accum(W, dW)
        _accum(b, np.concatenate([dazr.sum(axis=0), dac.sum(axis=0)]))
        _accum(x, dxh[:, :n_in] + dxrh[:, :n_in])
        _accum(h, dh + dxh[:, n_in:])
    out.backward_fn = bw
    return out


def gru_scan(xs, h0, W, b):
    """Run a GRU over time. ``xs`` is (T, B, in), ``h0`` is (B, H); returns (T, B, H).

    The batch is used as given (callers canonicalize it); the input projection
    for all steps is computed in one product, then the recurrence loops over T.
    """
    xs, h0, W, b = const(xs), const(h0), const(W), const(b)
    if xs.value.ndim != 3 or xs.value.shape[0] == 0:
        raise ShapeMismatch(f"gru_scan input must be (T>0, B, in), got {xs.shape}")
    T, B, n_in = xs.value.shape
    H = h0.value.shape[1]
    if h0.value.shape[0] != B:
        raise ShapeMismatch(f"gru_scan: h0 batch {h0.shape[0]} != {B}")
    _split_gru(W, b, n_in, H)
    Wv = W.value
    Wx, Whzr, Whc = Wv[:n_in], Wv[n_in:, :2 * H], Wv[n_in:, 2 * H:]
    gx = (xs.value.reshape(T * B, n_in) @ Wx + b.value).reshape(T, B, 3 * H)
    hs = np.empty((T + 1, B, H))
    zs = np.empty((T, B, H))
    rs = np.empty((T, B, H))
    cs = np.empty((T, B, H))
    h = hs[0] = h0.value
    for t in range(T):
        zr = sigmoid_np(gx[t, :, :2 * H] + h @ Whzr)
        z, r = zr[:, :H], zr[:, H:]
        c = np.tanh(gx[t, :, 2 * H:] + (r * h) @ Whc)
        h = (1.0 - z) * h + z * c
        zs[t], rs[t], cs[t], hs[t + 1] = z, r, c, h
    out = Var(hs[1:].copy(), (xs, h0, W, b), None)

    def bw(gys):
        da = np.empty((T, B, 3 * H))
        carry = np.zeros((B, H))
        WhzrT, WhcT = Whzr.T, Whc.T
        for t in range(T - 1, -1, -1):
            dh = gys[t] + carry
            z, r, c, hp = zs[t], rs[t], cs[t], hs[t]
            dac = dh * z * (1.0 - c * c)
            drh = dac @ WhcT
            dazr = da[t, :, :2 * H]
            dazr[:, :H] = dh * (c - hp) * z * (1.0 - z)
            dazr[:, H:] = drh * hp * r * (1.0 - r)
            da[t, :, 2 * H:] = dac
            carry = dh * (1.0 - z) + drh * r + dazr @ WhzrT
        flat = da.reshape(T * B, 3 * H)
        dW = np.empty_like(Wv)
        dW[:n_in] = xs.value.reshape(T * B, n_in).T @ flat
        dW[n_in:, :2 * H] = hs[:-1].reshape(T * B, H).T @ flat[:, :2 * H]
        dW[n_in:, 2 * H:] = (rs * hs[:-1]).reshape(T * B, H).T @ flat[:, 2 * H:]
        _accum(W, dW)
        _accum(b, flat.sum(axis=0))
        if xs.requires_grad:
            _accum(xs, (flat @ Wx.T).reshape(T, B, n_in))
        _accum(h0, carry)
    out.backward_fn = bw
    return out


def last_step(seq):
    """(T, B, H) -> (B, H), the final time step."""
    seq = const(seq)
    out = Var(seq.value[-1], (seq,), None)

    def bw(g):
        full = np.zeros_like(seq.value)
        full[-1] = g
        _accum(seq, full)
    out.backward_fn = bw
    return out
