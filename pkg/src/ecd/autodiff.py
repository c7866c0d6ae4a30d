"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations the pipeline needs are implemented; each op records a
closure that accumulates gradients into its parents. Gradients are checked
against central finite differences in the test suite.
"""
from __future__ import annotations

import numpy as np

from . import ops


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without gradient requires a scalar")
            grad = np.ones_like(self.data)
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        self._accumulate(grad)
        for t in reversed(topo):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = _wrap(other)
        out = _node(self.data + other.data, (self, other))

        def bw(g):
            _acc(self, _unbroadcast(g, self.shape))
            _acc(other, _unbroadcast(g, other.shape))

        out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _node(-self.data, (self,))
        out._backward = lambda g: _acc(self, -g)
        return out

    def __sub__(self, other):
        return self + (-_wrap(other))

    def __rsub__(self, other):
        return _wrap(other) + (-self)

    def __mul__(self, other):
        other = _wrap(other)
        out = _node(self.data * other.data, (self, other))

        def bw(g):
            _acc(self, _unbroadcast(g * other.data, self.shape))
            _acc(other, _unbroadcast(g * self.data, other.shape))

        out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self * (1.0 / float(scalar))

    def __matmul__(self, other):
        other = _wrap(other)
        out = _node(self.data @ other.data, (self, other))

        def bw(g):
            a, b = self.data, other.data
            if a.ndim == 1 or b.ndim == 1:
                raise NotImplementedError("1-D matmul operands")
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            _acc(self, _unbroadcast(ga, self.shape))
            _acc(other, _unbroadcast(gb, other.shape))

        out._backward = bw
        return out

    def __getitem__(self, idx):
        out = _node(self.data[idx], (self,))

        def bw(g):
            # basic slicing only (no index duplication), so += is exact
            full = np.zeros_like(self.data)
            full[idx] += g
            _acc(self, full)

        out._backward = bw
        return out

    def reshape(self, *shape):
        out = _node(self.data.reshape(*shape), (self,))
        out._backward = lambda g: _acc(self, g.reshape(self.shape))
        return out

    def transpose(self, *axes):
        inv = np.argsort(axes)
        out = _node(self.data.transpose(*axes), (self,))
        out._backward = lambda g: _acc(self, g.transpose(*inv))
        return out

    def sum(self, axis=None, keepdims=False):
        out = _node(self.data.sum(axis=axis, keepdims=keepdims), (self,))

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _acc(self, np.broadcast_to(g, self.shape))

        out._backward = bw
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / n


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


_grad_enabled = True


class no_grad:
    """Context manager that suppresses graph construction (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _node(data, parents):
    if not _grad_enabled:
        return Tensor(data)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
    return out


def _acc(t, g):
    if t.requires_grad or t._parents:
        t._accumulate(g)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- nonlinearities ----------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = _node(np.maximum(x.data, 0.0), (x,))
    out._backward = lambda g: _acc(x, g * (x.data > 0))
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = ops.sigmoid(x.data)
    out = _node(s, (x,))
    out._backward = lambda g: _acc(x, g * s * (1.0 - s))
    return out


def softmax_lastaxis(x: Tensor) -> Tensor:
    s = ops.softmax_rows(x.data)
    out = _node(s, (x,))

    def bw(g):
        dot = np.sum(g * s, axis=-1, keepdims=True)
        _acc(x, (g - dot) * s)

    out._backward = bw
    return out


def concat(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _acc(t, piece)

    out._backward = bw
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the mask comes from the caller-supplied generator."""
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.data.dtype) / keep
    out = _node(x.data * mask, (x,))
    out._backward = lambda g: _acc(x, g * mask)
    return out


# -- spatial ops -------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None, padding) -> Tensor:
    """Differentiable counterpart of ops.conv2d on a (d, H, W) map, or a
    batched (B, d, H, W) stack sharing the same kernel."""
    o, i, kh, kw = kernel.shape
    if padding == "same":
        padding = ((kh - 1) // 2, (kw - 1) // 2)
    ph, pw = padding
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    if x.ndim == 4:
        bsz, d, h, w = x.shape
        cols, oh, ow = ops._im2col_b(x.data, kh, kw, ph, pw)  # (B, d*kh*kw, L)
        y = kernel.data.reshape(o, -1) @ cols  # (B, o, L)
        if bias is not None:
            y = y + bias.data[:, None]
        out = _node(np.ascontiguousarray(y.reshape(bsz, o, oh, ow)), parents)

        def bw(g):
            gflat = g.reshape(bsz, o, -1)
            _acc(kernel, np.einsum("bol,bkl->ok", gflat, cols, optimize=True).reshape(kernel.shape))
            if bias is not None:
                _acc(bias, gflat.sum(axis=(0, 2)))
            gcols = kernel.data.reshape(o, -1).T @ gflat
            _acc(x, ops._col2im_b(gcols, d, h, w, kh, kw, ph, pw))

        out._backward = bw
        return out

    d, h, w = x.shape
    cols, oh, ow = ops._im2col(x.data, kh, kw, ph, pw)
    y = kernel.data.reshape(o, -1) @ cols
    if bias is not None:
        y = y + bias.data[:, None]
    out = _node(np.ascontiguousarray(y.reshape(o, oh, ow)), parents)

    def bw(g):
        gflat = g.reshape(o, -1)
        _acc(kernel, (gflat @ cols.T).reshape(kernel.shape))
        if bias is not None:
            _acc(bias, gflat.sum(axis=1))
        gcols = kernel.data.reshape(o, -1).T @ gflat
        _acc(x, ops._col2im(gcols, d, h, w, kh, kw, ph, pw))

    out._backward = bw
    return out


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    h, w = x.shape[-2], x.shape[-1]
    ah = ops.bilinear_matrix(h, factor, dtype=x.data.dtype)
    aw = ops.bilinear_matrix(w, factor, dtype=x.data.dtype)
    y = np.einsum("ih,...hw,jw->...ij", ah, x.data, aw, optimize=True)
    out = _node(y, (x,))

    def bw(g):
        _acc(x, np.einsum("ih,...ij,jw->...hw", ah, g, aw, optimize=True))

    out._backward = bw
    return out


def l2_normalize_channels(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Per-position unit normalization on a (d, H, W) map (or batched
    (B, d, H, W)); zero positions stay zero and pass no gradient."""
    axis = x.ndim - 3
    norms = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    live = norms >= eps
    safe = np.where(live, norms, 1.0)
    y = np.where(live, x.data / safe, 0.0)
    out = _node(y, (x,))

    def bw(g):
        proj = np.sum(g * y, axis=axis, keepdims=True)
        _acc(x, np.where(live, (g - y * proj) / safe, 0.0))

    out._backward = bw
    return out


def gather_blocks(refs: Tensor, indices, ph: int, pw: int) -> Tensor:
    """Assemble pseudo-aligned views by copying (ph, pw) blocks out of a
    (B, K, d, H, W) reference stack.

    `indices` is an int array (B, n, n, 3) of (ref, top, left) per grid cell;
    the output is (B, d, n*ph, n*pw). Gradients scatter-add back into `refs`;
    the indices themselves receive none (hard selection).
    """
    idx = np.asarray(indices)
    b, k, d, _, _ = refs.shape
    n = idx.shape[1]
    data = np.empty((b, d, n * ph, n * pw), dtype=refs.data.dtype)
    for bi in range(b):
        for r in range(n):
            for c in range(n):
                kk, top, left = idx[bi, r, c]
                data[bi, :, r * ph : (r + 1) * ph, c * pw : (c + 1) * pw] = refs.data[
                    bi, kk, :, top : top + ph, left : left + pw
                ]
    out = _node(data, (refs,))

    def bw(g):
        full = np.zeros_like(refs.data)
        for bi in range(b):
            for r in range(n):
                for c in range(n):
                    kk, top, left = idx[bi, r, c]
                    full[bi, kk, :, top : top + ph, left : left + pw] += g[
                        bi, :, r * ph : (r + 1) * ph, c * pw : (c + 1) * pw
                    ]
        _acc(refs, full)

    out._backward = bw
    return out
