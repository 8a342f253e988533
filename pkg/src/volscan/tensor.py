"""Differentiable primitives with hand-written forward and backward passes.

Arrays are plain ``numpy.ndarray`` objects in channels-first layout. Every
spatial op accepts an optional leading batch axis: ``(C, H, W)`` or
``(N, C, H, W)`` for 2D, ``(C, D, H, W)`` or ``(N, C, D, H, W)`` for 3D.
Training runs in float32; float64 inputs are propagated unchanged, which is
what the gradient checker relies on.
"""

from __future__ import annotations

import zlib
from contextlib import contextmanager
from dataclasses import dataclass, field
from itertools import product
from math import prod

import numpy as np

from .errors import GradCheckError, ShapeError, UninitializedStatsError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
BCE_EPS = 1e-7

# upper bound on the im2col buffer, in bytes
_COLS_BUDGET = 64 * 2**20

# digests of piecewise-linear branch choices (ReLU masks, max positions),
# collected only inside ``activation_pattern()``
_pattern = None


@contextmanager
def activation_pattern():
    """Record which branch every ReLU/max op took during the enclosed calls."""
    global _pattern
    prev, _pattern = _pattern, []
    try:
        yield _pattern
    finally:
        _pattern = prev


def note_pattern(choice):
    if _pattern is not None:
        _pattern.append(zlib.crc32(np.ascontiguousarray(choice).tobytes()))


@dataclass
class ParamTensor:
    name: str
    value: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad[...] = 0

    def astype(self, dtype):
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)


@dataclass
class RunningStats:
    """Per-channel running mean/variance for batch norm (eval mode)."""

    mean: np.ndarray
    var: np.ndarray
    count: int = 0

    @classmethod
    def zeros(cls, channels, dtype=np.float32):
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype), 0)

    @property
    def initialized(self):
        return self.count > 0


# ---------------------------------------------------------------------------
# convolution

def _batched(x, spatial_rank):
    """Add a batch axis if ``x`` is a single sample. Returns (array, squeeze)."""
    if x.ndim == spatial_rank + 1:
        return x[None], True
    if x.ndim == spatial_rank + 2:
        return x, False
    raise ShapeError(f"expected rank {spatial_rank + 1} or {spatial_rank + 2} input, got shape {x.shape}")


def _offsets(rank):
    return list(product(range(3), repeat=rank))


def _im2col(x):
    """(N, C, *S) -> (C*K, N*prod(S)) with K = 3**len(S), same-padded."""
    n, c = x.shape[:2]
    spatial = x.shape[2:]
    rank = len(spatial)
    xp = np.pad(x, [(0, 0), (0, 0)] + [(1, 1)] * rank).swapaxes(0, 1)
    offs = _offsets(rank)
    cols = np.empty((c, len(offs), n) + spatial, dtype=x.dtype)
    for k, off in enumerate(offs):
        window = tuple(slice(o, o + s) for o, s in zip(off, spatial))
        cols[:, k] = xp[(slice(None), slice(None)) + window]
    return cols.reshape(c * len(offs), n * prod(spatial))


def _col2im(cols, n, c, spatial):
    rank = len(spatial)
    offs = _offsets(rank)
    cols = cols.reshape((c, len(offs), n) + spatial)
    padded = np.zeros((c, n) + tuple(s + 2 for s in spatial), dtype=cols.dtype)
    for k, off in enumerate(offs):
        window = tuple(slice(o, o + s) for o, s in zip(off, spatial))
        padded[(slice(None), slice(None)) + window] += cols[:, k]
    inner = tuple(slice(1, -1) for _ in spatial)
    return np.ascontiguousarray(padded[(slice(None), slice(None)) + inner].swapaxes(0, 1))


def _chunks(n, per_sample_bytes):
    step = max(1, _COLS_BUDGET // max(per_sample_bytes, 1))
    return [(i, min(i + step, n)) for i in range(0, n, step)]


def _check_conv(x, kernel, bias, rank):
    if kernel.ndim != rank + 2 or kernel.shape[2:] != (3,) * rank:
        raise ShapeError(f"kernel must have shape (C_out, C_in{', 3' * rank}), got {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"input shape {x.shape[1:]} has {x.shape[1]} channels but kernel shape "
                         f"{kernel.shape} expects C_in={kernel.shape[1]}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match kernel shape {kernel.shape}")


def _conv_forward(x, kernel, bias, rank):
    x, squeeze = _batched(x, rank)
    _check_conv(x, kernel, bias, rank)
    n, c = x.shape[:2]
    spatial = x.shape[2:]
    cout = kernel.shape[0]
    w2 = kernel.reshape(cout, -1)
    out = np.empty((n, cout) + spatial, dtype=np.result_type(x, kernel))
    per_sample = c * 3**rank * prod(spatial) * x.itemsize
    for a, b in _chunks(n, per_sample):
        y = w2 @ _im2col(x[a:b])
        out[a:b] = y.reshape((cout, b - a) + spatial).swapaxes(0, 1)
    if bias is not None:
        out += bias.reshape((1, cout) + (1,) * rank)
    return out[0] if squeeze else out


def _conv_backward(dout, x, kernel, rank, need_input_grad=True):
    x, squeeze = _batched(x, rank)
    dout = dout[None] if squeeze else dout
    n, c = x.shape[:2]
    spatial = x.shape[2:]
    cout = kernel.shape[0]
    if dout.shape != (n, cout) + spatial:
        raise ShapeError(f"upstream gradient shape {dout.shape} does not match output shape {(n, cout) + spatial}")
    w2 = kernel.reshape(cout, -1)
    dw = np.zeros_like(w2)
    dx = np.empty_like(x) if need_input_grad else None
    per_sample = c * 3**rank * prod(spatial) * x.itemsize
    for a, b in _chunks(n, per_sample):
        dy = np.ascontiguousarray(dout[a:b].swapaxes(0, 1)).reshape(cout, -1)
        dw += dy @ _im2col(x[a:b]).T
        if need_input_grad:
            dx[a:b] = _col2im(w2.T @ dy, b - a, c, spatial)
    db = dout.sum(axis=(0,) + tuple(range(2, 2 + rank)))
    if dx is not None and squeeze:
        dx = dx[0]
    return dx, dw.reshape(kernel.shape), db


def conv2d(x, kernel, bias=None):
    """3x3 same-padded, stride-1 convolution (cross-correlation)."""
    return _conv_forward(x, kernel, bias, 2)


def conv2d_backward(dout, x, kernel, need_input_grad=True):
    """Returns ``(dx, dkernel, dbias)``; ``dx`` is None if not requested."""
    return _conv_backward(dout, x, kernel, 2, need_input_grad)


def conv3d(x, kernel, bias=None):
    return _conv_forward(x, kernel, bias, 3)


def conv3d_backward(dout, x, kernel, need_input_grad=True):
    return _conv_backward(dout, x, kernel, 3, need_input_grad)


# ---------------------------------------------------------------------------
# pooling

def maxpool(x, window):
    """Non-overlapping max pooling over the trailing ``len(window)`` axes.

    Returns ``(out, argmax)``; ``argmax`` indexes the flattened window in
    row-major order and is needed by :func:`maxpool_backward`. Ties resolve
    to the first cell in scan order.
    """
    rank = len(window)
    lead = x.shape[:-rank]
    spatial = x.shape[-rank:]
    for s, w in zip(spatial, window):
        if s % w:
            raise ShapeError(f"pooling window {window} does not divide spatial shape {spatial}")
    shape = list(lead)
    for s, w in zip(spatial, window):
        shape += [s // w, w]
    v = x.reshape(shape)
    nl = len(lead)
    outer = [nl + 2 * i for i in range(rank)]
    inner = [nl + 2 * i + 1 for i in range(rank)]
    v = v.transpose(list(range(nl)) + outer + inner)
    v = v.reshape(v.shape[: nl + rank] + (-1,))
    arg = v.argmax(axis=-1)
    note_pattern(arg)
    out = np.take_along_axis(v, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool_backward(dout, arg, input_shape, window):
    rank = len(window)
    lead = input_shape[:-rank]
    nl = len(lead)
    k = prod(window)
    g = np.zeros(dout.shape + (k,), dtype=dout.dtype)
    np.put_along_axis(g, arg[..., None], dout[..., None], axis=-1)
    g = g.reshape(dout.shape + tuple(window))
    # interleave (outer_i, inner_i) back into the input layout
    order = list(range(nl))
    for i in range(rank):
        order += [nl + i, nl + rank + i]
    return g.transpose(order).reshape(input_shape)


def maxpool2d(x):
    """2x2 max pooling; odd spatial sizes raise :class:`ShapeError`."""
    return maxpool(x, (2, 2))


def maxpool2d_backward(dout, arg, input_shape):
    return maxpool_backward(dout, arg, input_shape, (2, 2))


# ---------------------------------------------------------------------------
# batch norm

def batchnorm(x, gamma, beta, stats: RunningStats, train: bool, eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel normalisation; the channel axis is 1 (or 0 for rank<=1 batches).

    In train mode batch statistics are used and ``stats`` is updated in place
    (the first update copies the batch statistics). Returns ``(out, cache)``.
    """
    axis = 1 if x.ndim > 1 else 0
    red = tuple(i for i in range(x.ndim) if i != axis)
    bshape = [1] * x.ndim
    bshape[axis] = -1
    if gamma.shape != (x.shape[axis],):
        raise ShapeError(f"gamma shape {gamma.shape} does not match channels of input {x.shape}")
    if train:
        mu = x.mean(axis=red)
        var = x.var(axis=red)
        m = x.size // x.shape[axis]
        unbiased = var * (m / (m - 1)) if m > 1 else var
        if stats.count == 0:
            stats.mean = mu.astype(stats.mean.dtype)
            stats.var = unbiased.astype(stats.var.dtype)
        else:
            dt = stats.mean.dtype
            stats.mean = (momentum * stats.mean + (1 - momentum) * mu).astype(dt)
            stats.var = (momentum * stats.var + (1 - momentum) * unbiased).astype(dt)
        stats.count += 1
    else:
        if not stats.initialized:
            raise UninitializedStatsError("batch norm evaluated in eval mode before any train-mode update")
        mu = stats.mean.astype(x.dtype)
        var = stats.var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    return out, (xhat, inv_std, gamma, train, axis, red, bshape)


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, train, axis, red, bshape = cache
    dgamma = (dout * xhat).sum(axis=red)
    dbeta = dout.sum(axis=red)
    dxhat = dout * gamma.reshape(bshape)
    if train:
        m = dout.size // dout.shape[axis]
        dx = (inv_std.reshape(bshape) / m) * (
            m * dxhat
            - dxhat.sum(axis=red).reshape(bshape)
            - xhat * (dxhat * xhat).sum(axis=red).reshape(bshape)
        )
    else:
        dx = dxhat * inv_std.reshape(bshape)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# dense and pointwise

def dense(x, weight, bias):
    """``x @ weight.T + bias`` for ``x`` of shape (F,) or (N, F)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"input has {x.shape[-1]} features but weight shape is {weight.shape}")
    return x @ weight.T + bias


def dense_backward(dout, x, weight):
    x2 = x.reshape(-1, weight.shape[1])
    d2 = dout.reshape(-1, weight.shape[0])
    return (d2 @ weight).reshape(x.shape), d2.T @ x2, d2.sum(axis=0)


def sigmoid(x):
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype if x.dtype.kind == "f" else np.float64)


def sigmoid_backward(dout, y):
    return dout * y * (1 - y)


def tanh(x):
    return np.tanh(x)


def tanh_backward(dout, y):
    return dout * (1 - y * y)


def relu(x):
    note_pattern(x > 0)
    return np.maximum(x, 0)


def relu_backward(dout, x):
    return dout * (x > 0)


def bce_loss(p, y, eps=BCE_EPS):
    """Binary cross-entropy on probabilities clamped to ``[eps, 1 - eps]``.

    Returns ``(loss, dloss/dp)``, both elementwise. The gradient is evaluated
    at the clamped probability.
    """
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1 - eps)
    y = np.asarray(y, dtype=np.float64)
    loss = -(y * np.log(p) + (1 - y) * np.log1p(-p))
    return loss, (p - y) / (p * (1 - p))


def bce_with_logits(z, y, eps=BCE_EPS):
    """BCE of ``sigmoid(z)``; the gradient with respect to ``z`` is ``p - y``."""
    p = sigmoid(np.asarray(z, dtype=np.float64))
    loss, _ = bce_loss(p, y, eps)
    return loss, p - np.asarray(y, dtype=np.float64)


# ---------------------------------------------------------------------------
# finite-difference verification

@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_name: str = ""
    worst_index: tuple = ()
    checked: int = 0
    skipped: int = 0
    errors: dict = field(default_factory=dict)


def grad_check(loss_fn, tensors, grads, seed=0, samples=32, h=1e-5, skip_kinks=True):
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` is a zero-argument callable returning a scalar; it must read
    the arrays in ``tensors`` (a name -> ndarray mapping), which are perturbed
    in place and restored. ``grads`` maps the same names to analytic
    gradients. ``samples`` coordinates are drawn per tensor (all of them if
    the tensor is smaller).

    With ``skip_kinks`` a coordinate whose +h or -h evaluation flips a ReLU
    or max-pool branch is skipped and replaced by another draw: across a
    kink the central difference is not a derivative estimate at all.
    """
    rng = np.random.default_rng(seed)
    result = GradCheckResult(0.0)
    if skip_kinks:
        with activation_pattern() as base:
            loss_fn()
    for name, arr in tensors.items():
        g = grads[name]
        if g.shape != arr.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != tensor shape {arr.shape}")
        n = arr.size
        want = min(n, samples)
        order = np.arange(n) if n <= samples else rng.permutation(n)
        worst = 0.0
        done = 0
        for flat in order:
            if done == want:
                break
            idx = np.unravel_index(flat, arr.shape)
            old = arr[idx]
            with activation_pattern() as plus:
                arr[idx] = old + h
                fp = float(loss_fn())
            with activation_pattern() as minus:
                arr[idx] = old - h
                fm = float(loss_fn())
            arr[idx] = old
            if skip_kinks and (plus != base or minus != base):
                result.skipped += 1
                continue
            numeric = (fp - fm) / (2 * h)
            analytic = float(g[idx])
            if not (np.isfinite(numeric) and np.isfinite(analytic)):
                raise GradCheckError(f"non-finite gradient for {name}{list(idx)}: "
                                     f"analytic={analytic}, numeric={numeric}", name, idx)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            if rel > worst:
                worst = rel
            if rel > result.max_rel_error:
                result.max_rel_error = rel
                result.worst_name = name
                result.worst_index = tuple(int(i) for i in idx)
            result.checked += 1
            done += 1
        result.errors[name] = worst
    return result
