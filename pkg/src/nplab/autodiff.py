"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array and, when gradients are enabled,
remembers how it was produced.  ``backward`` replays the recorded graph in
reverse topological order (node ids strictly increase as operations are
recorded, so sorting by id gives a valid order) and accumulates vector-
Jacobian products.  All arithmetic is float64.

Broadcasting is supported over leading axes (and numpy-style size-1 axes);
gradients are summed back to the operand's shape.
"""

from __future__ import annotations

import itertools
import os
import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "set_finite_checks",
    "backward",
    "grad_check",
    "add", "sub", "mul", "div", "neg",
    "matmul", "tsum", "tmean",
    "exp", "log", "relu", "softplus",
    "conv1d", "conv_transpose1d", "conv2d", "conv_transpose2d",
    "concat", "reshape", "transpose", "broadcast_to",
    "gaussian_loglik",
    "save_checkpoint", "load_checkpoint",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""


_state = threading.local()

# NaN/Inf introduced by an op on finite inputs is a bug in the caller's
# numerics; checking every output is expensive, so it is opt-in.
_FINITE_CHECKS = os.environ.get("NPLAB_CHECK_FINITE", "") not in ("", "0")


def set_finite_checks(enabled: bool) -> None:
    """Enable or disable per-operation NaN/Inf output assertions."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Context in which no graph records are appended."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """Dense float64 array participating in the differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_id", "_parents", "_vjp", "_op")

    _ids = itertools.count()

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None, _op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._id = next(Tensor._ids)
        self._parents = _parents
        self._vjp = _vjp
        self._op = _op

    # -- basic properties ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op})"

    # -- operators --------------------------------------------------------

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

    def __getitem__(self, idx):
        return _getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def parameter(data, rng=None, shape=None) -> Tensor:
    """A leaf tensor that receives gradients."""
    if data is None:
        data = rng.standard_normal(shape)
    return Tensor(data, requires_grad=True)


# -- graph construction ----------------------------------------------------


def _track(*tensors) -> bool:
    return _grad_enabled() and any(
        isinstance(t, Tensor) and (t.requires_grad or t._parents) for t in tensors
    )


def _make(data, op, parents, vjp) -> Tensor:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: non-finite values in result")
    if vjp is not None:
        return Tensor(data, _parents=parents, _vjp=vjp, _op=op)
    return Tensor(data, _op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` over the axes that broadcasting introduced or stretched."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor, params=None) -> dict:
    """Accumulate dLoss/dt for every reachable node; return grads of `params`.

    `loss` must be scalar.  Parameters not reachable from `loss` map to zero
    arrays of their own shape.  Gradients are also stored on ``p.grad`` for
    every requires-grad leaf encountered.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")

    # Reachable subgraph; creation ids increase along the recording order, so
    # descending id order is a reverse topological order.
    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen.add(t._id)
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._id, reverse=True)

    grads = {loss._id: np.ones_like(loss.data)}
    for t in nodes:
        g = grads.pop(t._id, None)
        if g is None:
            continue
        if t.requires_grad and not t._parents:
            t.grad = g if t.grad is None else t.grad + g
        if t._vjp is None:
            continue
        for parent, pg in zip(t._parents, t._vjp(g)):
            if pg is None:
                continue
            acc = grads.get(parent._id)
            grads[parent._id] = pg if acc is None else acc + pg

    out = {}
    if params is not None:
        for p in params:
            out[p._id] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


def grad_check(f, params, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` is a nullary callable returning a scalar Tensor of the parameters.
    The error for each coordinate is |analytic - fd| / max(1, |analytic|).
    """
    for p in params:
        p.grad = None
    loss = f()
    backward(loss, params)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.ravel()
            aflat = a.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                fd = (up - down) / (2.0 * eps)
                err = abs(aflat[i] - fd) / max(1.0, abs(aflat[i]))
                worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst


# -- elementwise and reduction ops ------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data
    vjp = None
    if _track(a, b):
        ash, bsh = a.shape, b.shape
        vjp = lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh))
    return _make(data, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data
    vjp = None
    if _track(a, b):
        ash, bsh = a.shape, b.shape
        vjp = lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh))
    return _make(data, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data
    vjp = None
    if _track(a, b):
        ad, bd, ash, bsh = a.data, b.data, a.shape, b.shape
        vjp = lambda g: (_unbroadcast(g * bd, ash), _unbroadcast(g * ad, bsh))
    return _make(data, "mul", (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data
    vjp = None
    if _track(a, b):
        ad, bd, ash, bsh = a.data, b.data, a.shape, b.shape
        vjp = lambda g: (
            _unbroadcast(g / bd, ash),
            _unbroadcast(-g * ad / (bd * bd), bsh),
        )
    return _make(data, "div", (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    vjp = (lambda g: (-g,)) if _track(a) else None
    return _make(-a.data, "neg", (a,), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)
    vjp = (lambda g: (g * data,)) if _track(a) else None
    return _make(data, "exp", (a,), vjp)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)
    vjp = (lambda g: (g / a.data,)) if _track(a) else None
    return _make(data, "log", (a,), vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)
    vjp = None
    if _track(a):
        mask = a.data > 0.0
        vjp = lambda g: (g * mask,)
    return _make(data, "relu", (a,), vjp)


def softplus(a) -> Tensor:
    """log(1 + e^x), computed stably for large |x|."""
    a = as_tensor(a)
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    vjp = None
    if _track(a):
        sig = 1.0 / (1.0 + np.exp(-x))
        vjp = lambda g: (g * sig,)
    return _make(data, "softplus", (a,), vjp)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    vjp = None
    if _track(a):
        ash = a.shape

        def vjp(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            return (np.broadcast_to(gg, ash).copy(),)

    return _make(data, "sum", (a,), vjp)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    vjp = None
    if _track(a):
        ash = a.shape
        n = a.data.size if axis is None else a.shape[axis]

        def vjp(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            return (np.broadcast_to(gg, ash) / n,)

    return _make(data, "mean", (a,), vjp)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError(f"matmul: operands must have ndim >= 1, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions mismatch for shapes {a.shape} and {b.shape}")
    data = a.data @ b.data
    vjp = None
    if _track(a, b):
        ad, bd, ash, bsh = a.data, b.data, a.shape, b.shape

        def vjp(g):
            if bd.ndim == 1:
                # (..., n, k) @ (k,) -> (..., n)
                ga = g[..., None] * bd
                gb = np.tensordot(ad, g, axes=(tuple(range(ad.ndim - 1)), tuple(range(g.ndim))))
                return _unbroadcast(ga, ash), gb
            if ad.ndim == 1:
                # (k,) @ (..., k, m) -> (..., m)
                ga = np.einsum("...m,...km->k", g, bd)
                gb = ad[:, None] * np.expand_dims(g, -2)
                return ga, _unbroadcast(gb, bsh)
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ash)
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bsh)
            return ga, gb

    return _make(data, "matmul", (a, b), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)
    vjp = None
    if _track(a):
        ash = a.shape
        vjp = lambda g: (g.reshape(ash),)
    return _make(data, "reshape", (a,), vjp)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    data = a.data.transpose(axes)
    vjp = None
    if _track(a):
        inv = None if axes is None else np.argsort(axes)
        vjp = lambda g: (g.transpose(inv),)
    return _make(data, "transpose", (a,), vjp)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    data = np.broadcast_to(a.data, shape)
    vjp = None
    if _track(a):
        ash = a.shape
        vjp = lambda g: (_unbroadcast(g, ash),)
    return _make(data.copy(), "broadcast_to", (a,), vjp)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    vjp = None
    if _track(*tensors):
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        vjp = lambda g: tuple(np.split(g, splits, axis=axis))
    return _make(data, "concat", tuple(tensors), vjp)


def _getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    data = a.data[idx]
    vjp = None
    if _track(a):
        ash = a.shape

        def vjp(g):
            out = np.zeros(ash)
            np.add.at(out, idx, g)
            return (out,)

    return _make(data, "slice", (a,), vjp)


# -- convolutions ------------------------------------------------------------


def _windows1d(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Strided view (B, C, Lo, k) of sliding windows of a padded signal."""
    b, c, lp = x.shape
    lo = (lp - k) // stride + 1
    s0, s1, s2 = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (b, c, lo, k), (s0, s1, s2 * stride, s2), writeable=False
    )


def _scatter1d(dcols: np.ndarray, lp: int, stride: int) -> np.ndarray:
    """Adjoint of `_windows1d`: scatter-add window grads into the padded signal."""
    b, c, lo, k = dcols.shape
    out = np.zeros((b, c, lp))
    for j in range(k):
        out[:, :, j : j + stride * lo : stride] += dcols[:, :, :, j]
    return out


def conv1d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """True convolution of (B, Cin, L) with kernels (Cout, Cin, K), zero padded.

    The kernel is flipped along its spatial axis (so conv1d([1,0,0,0],
    [1,2,3], pad=1) = [2,3,0,0]), matching the mathematical convention.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: expected x (B, Cin, L) and w (Cout, Cin, K), got {x.shape} and {w.shape}")
    k = w.shape[2]
    wf = np.ascontiguousarray(w.data[:, :, ::-1])
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    if xp.shape[2] < k:
        raise ShapeError(f"conv1d: padded length {xp.shape[2]} shorter than kernel {k} (x {x.shape}, w {w.shape})")
    cols = _windows1d(xp, k, stride)
    out = np.tensordot(cols, wf, axes=((1, 3), (1, 2)))  # (B, Lo, Cout)
    out = np.ascontiguousarray(out.transpose(0, 2, 1))
    vjp = None
    if _track(x, w):
        lx, lp = x.shape[2], xp.shape[2]

        def vjp(g):
            gw = np.tensordot(g, cols, axes=((0, 2), (0, 2)))[:, :, ::-1]  # (Cout, Cin, K)
            dcols = np.einsum("bol,oik->bilk", g, wf, optimize=True)
            dxp = _scatter1d(dcols, lp, stride)
            gx = dxp[:, :, padding : padding + lx] if padding else dxp
            return gx, np.ascontiguousarray(gw)

    return _make(out, "conv1d", (x, w), vjp)


def conv_transpose1d(x, w, stride: int = 1, padding: int = 0, output_padding: int = 0) -> Tensor:
    """Adjoint of `conv1d`: maps (B, C1, L) with kernels (C1, C2, K) to (B, C2, Lout).

    With output_padding 0 this is exactly the linear adjoint of
    ``conv1d(., w, stride, padding)`` for the matching input length.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose1d: expected x (B, C1, L) and w (C1, C2, K), got {x.shape} and {w.shape}")
    b, c1, l = x.shape
    _, c2, k = w.shape
    if output_padding >= max(stride, 1):
        raise ShapeError(f"conv_transpose1d: output_padding {output_padding} must be < stride {stride}")
    lout = (l - 1) * stride - 2 * padding + k + output_padding
    lp = lout + 2 * padding
    wf = np.ascontiguousarray(w.data[:, :, ::-1])
    dcols = np.einsum("bol,oik->bilk", x.data, wf, optimize=True)  # (B, C2, L, K)
    full = _scatter1d(dcols, lp, stride)
    out = full[:, :, padding : padding + lout] if padding else full
    vjp = None
    if _track(x, w):

        def vjp(g):
            gp = np.pad(g, ((0, 0), (0, 0), (padding, padding))) if padding else g
            gp = gp[:, :, : (l - 1) * stride + k]  # drop output_padding tail
            gcols = _windows1d(np.ascontiguousarray(gp), k, stride)  # (B, C2, L, K)
            gx = np.tensordot(gcols, wf, axes=((1, 3), (1, 2))).transpose(0, 2, 1)
            gw = np.einsum("bil,bjlk->ijk", x.data, gcols, optimize=True)[:, :, ::-1]
            return np.ascontiguousarray(gx), np.ascontiguousarray(gw)

    return _make(np.ascontiguousarray(out), "conv_transpose1d", (x, w), vjp)


def _windows2d(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    b, c, hp, wp = x.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (b, c, ho, wo, kh, kw), (s0, s1, s2 * stride, s3 * stride, s2, s3), writeable=False
    )


def _scatter2d(dcols: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    b, c, ho, wo, kh, kw = dcols.shape
    out = np.zeros((b, c, hp, wp))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, :, i, j]
    return out


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """True convolution of (B, Cin, H, W) with kernels (Cout, Cin, KH, KW).

    Kernels are flipped along both spatial axes, as in `conv1d`.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: expected x (B, Cin, H, W) and w (Cout, Cin, KH, KW), got {x.shape} and {w.shape}")
    kh, kw = w.shape[2], w.shape[3]
    wf = np.ascontiguousarray(w.data[:, :, ::-1, ::-1])
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad) if padding else x.data
    cols = _windows2d(xp, kh, kw, stride)
    out = np.tensordot(cols, wf, axes=((1, 4, 5), (1, 2, 3)))  # (B, Ho, Wo, Cout)
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))
    vjp = None
    if _track(x, w):
        hx, wx = x.shape[2], x.shape[3]
        hp, wp = xp.shape[2], xp.shape[3]

        def vjp(g):
            gw = np.tensordot(g, cols, axes=((0, 2, 3), (0, 2, 3)))[:, :, ::-1, ::-1]
            dcols = np.einsum("bohw,oikl->bihwkl", g, wf, optimize=True)
            dxp = _scatter2d(dcols, hp, wp, stride)
            gx = dxp[:, :, padding : padding + hx, padding : padding + wx] if padding else dxp
            return gx, np.ascontiguousarray(gw)

    return _make(out, "conv2d", (x, w), vjp)


def conv_transpose2d(x, w, stride: int = 1, padding: int = 0, output_padding: int = 0) -> Tensor:
    """Adjoint of `conv2d`: maps (B, C1, H, W) with kernels (C1, C2, KH, KW)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: expected x (B, C1, H, W) and w (C1, C2, KH, KW), got {x.shape} and {w.shape}")
    b, c1, h, wdt = x.shape
    _, c2, kh, kw = w.shape
    if output_padding >= max(stride, 1):
        raise ShapeError(f"conv_transpose2d: output_padding {output_padding} must be < stride {stride}")
    hout = (h - 1) * stride - 2 * padding + kh + output_padding
    wout = (wdt - 1) * stride - 2 * padding + kw + output_padding
    hp, wp = hout + 2 * padding, wout + 2 * padding
    wf = np.ascontiguousarray(w.data[:, :, ::-1, ::-1])
    dcols = np.einsum("bohw,oikl->bihwkl", x.data, wf, optimize=True)
    full = _scatter2d(dcols, hp, wp, stride)
    out = full[:, :, padding : padding + hout, padding : padding + wout] if padding else full
    vjp = None
    if _track(x, w):

        def vjp(g):
            pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
            gp = np.pad(g, pad) if padding else g
            gp = gp[:, :, : (h - 1) * stride + kh, : (wdt - 1) * stride + kw]
            gcols = _windows2d(np.ascontiguousarray(gp), kh, kw, stride)
            gx = np.tensordot(gcols, wf, axes=((1, 4, 5), (1, 2, 3)))
            gx = np.ascontiguousarray(np.moveaxis(gx, -1, 1))
            gw = np.einsum("bihw,bjhwkl->ijkl", x.data, gcols, optimize=True)[:, :, ::-1, ::-1]
            return gx, np.ascontiguousarray(gw)

    return _make(np.ascontiguousarray(out), "conv_transpose2d", (x, w), vjp)


# -- Gaussian log density -----------------------------------------------------

_LOG_2PI = float(np.log(2.0 * np.pi))


def gaussian_loglik(mean, cov, y) -> Tensor:
    """Log density of `y` under N(mean, cov), batched over leading axes.

    `mean` and `y` are (..., N), `cov` is (..., N, N) and must already include
    any observation-noise diagonal.  Returns shape (...,).  The backward pass
    uses the closed forms d/dm = q, d/dSigma = (q q^T - Sigma^-1)/2 with
    q = Sigma^-1 (y - m).
    """
    mean, cov, y = as_tensor(mean), as_tensor(cov), as_tensor(y)
    if mean.shape != y.shape or cov.shape != mean.shape + (mean.shape[-1],):
        raise ShapeError(f"gaussian_loglik: mean {mean.shape}, cov {cov.shape}, y {y.shape} do not conform")
    n = mean.shape[-1]
    try:
        chol = np.linalg.cholesky(cov.data)
    except np.linalg.LinAlgError as e:
        raise FloatingPointError(f"gaussian_loglik: covariance not positive definite: {e}") from e
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    r = y.data - mean.data
    q = np.linalg.solve(cov.data, r[..., None])[..., 0]
    quad = np.sum(r * q, axis=-1)
    out = -0.5 * (n * _LOG_2PI + logdet + quad)
    vjp = None
    if _track(mean, cov, y):
        inv = np.linalg.inv(cov.data)

        def vjp(g):
            gm = g[..., None] * q
            gc = g[..., None, None] * 0.5 * (q[..., :, None] * q[..., None, :] - inv)
            return gm, gc, -gm

    return _make(out, "gaussian_loglik", (mean, cov, y), vjp)


# -- checkpoints --------------------------------------------------------------

_CKPT_HEADER = "npcheckpoint v1"


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named arrays plus a key=value metadata block.

    Format: header line ``npcheckpoint v1``; ``@meta key=value`` lines; then
    per tensor ``@tensor <name> <dim0> <dim1> ...`` followed by one decimal
    float per line (shortest round-trip repr, so loading is bit exact).
    """
    lines = [_CKPT_HEADER]
    for key, value in (meta or {}).items():
        lines.append(f"@meta {key}={value}")
    for name, value in tensors.items():
        arr = as_array(value)
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"@tensor {name} {dims}".rstrip())
        lines.extend(repr(float(v)) for v in arr.ravel())
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    """Read a checkpoint; returns (tensors: dict[str, ndarray], meta: dict[str, str])."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _CKPT_HEADER:
        raise ValueError(f"{path}: not a {_CKPT_HEADER!r} file")
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    i = 1
    while i < len(lines):
        line = lines[i]
        if line.startswith("@meta "):
            key, _, value = line[len("@meta "):].partition("=")
            meta[key] = value
            i += 1
        elif line.startswith("@tensor "):
            parts = line.split()
            name, dims = parts[1], tuple(int(d) for d in parts[2:])
            count = int(np.prod(dims)) if dims else 1
            vals = np.array([float(v) for v in lines[i + 1 : i + 1 + count]])
            tensors[name] = vals.reshape(dims)
            i += 1 + count
        elif not line.strip():
            i += 1
        else:
            raise ValueError(f"{path}: unexpected line {i + 1}: {line[:40]!r}")
    return tensors, meta
