"""Convolutional LSTM cell and a directional sequence layer over slices.

Gate equations (no peephole terms), with ``*`` a 3x3 same-padded
convolution::

    i = sigmoid(Wxi * x + Whi * h + bi)      f = sigmoid(Wxf * x + Whf * h + bf)
    g = tanh(Wxg * x + Whg * h + bg)         o = sigmoid(Wxo * x + Who * h + bo)
    c' = f . c + i . g                       h' = o . tanh(c')

The four gates are stored stacked along the output-channel axis in the
order i, f, g, o.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, EmptySequenceError, ShapeError
from .layers import Layer, uniform_init
from .tensor import ParamTensor

GATES = ("i", "f", "g", "o")
ASCENDING = "ascending"
DESCENDING = "descending"


@dataclass
class ConvLstmParams:
    wx: ParamTensor  # (4*C_out, C_in, 3, 3)
    wh: ParamTensor  # (4*C_out, C_out, 3, 3)
    b: ParamTensor   # (4*C_out,)

    @property
    def hidden(self):
        return self.wh.shape[1]

    @property
    def inputs(self):
        return self.wx.shape[1]

    def gate(self, name):
        """Views ``(Wx, Wh, b)`` of one gate's parameters."""
        k = GATES.index(name)
        c = self.hidden
        sl = slice(k * c, (k + 1) * c)
        return self.wx.value[sl], self.wh.value[sl], self.b.value[sl]

    def tensors(self):
        return [self.wx, self.wh, self.b]

    @classmethod
    def init(cls, name, cin, cout, rng, dtype=np.float32):
        # fan-in covers both the input and the recurrent kernel
        fan_in = (cin + cout) * 9
        b = np.zeros(4 * cout, dtype)
        b[cout:2 * cout] = 1.0
        return cls(
            ParamTensor(f"{name}.wx", uniform_init(rng, (4 * cout, cin, 3, 3), fan_in, dtype)),
            ParamTensor(f"{name}.wh", uniform_init(rng, (4 * cout, cout, 3, 3), fan_in, dtype)),
            ParamTensor(f"{name}.b", b),
        )


@dataclass
class CellState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, shape, dtype=np.float32):
        return cls(np.zeros(shape, dtype), np.zeros(shape, dtype))


def _gates(a, c):
    i = T.sigmoid(a[:, :c])
    f = T.sigmoid(a[:, c:2 * c])
    g = T.tanh(a[:, 2 * c:3 * c])
    o = T.sigmoid(a[:, 3 * c:])
    return i, f, g, o


def _advance(a, state, hidden):
    i, f, g, o = _gates(a, hidden)
    c_new = f * state.c + i * g
    tc = T.tanh(c_new)
    h_new = o * tc
    return CellState(h_new, c_new), (state.h, state.c, i, f, g, o, tc)


def _retreat(dh, dc, step_cache):
    """Backward through the gate arithmetic of one step.

    Returns the pre-activation gradient (stacked i, f, g, o) and dc_prev.
    """
    h_prev, c_prev, i, f, g, o, tc = step_cache
    dc = dc + dh * o * (1 - tc * tc)
    do = dh * tc
    da = np.concatenate([
        dc * g * i * (1 - i),
        dc * c_prev * f * (1 - f),
        dc * i * (1 - g * g),
        do * o * (1 - o),
    ], axis=1)
    return da, dc * f


def _check_step(x, state, params):
    if x.shape[1] != params.inputs:
        raise ShapeError(f"input gate kernels Wx{{i,f,g,o}} expect {params.inputs} channels, "
                         f"got input of shape {x.shape[1:]}")
    if state.h.shape[1] != params.hidden or state.h.shape[2:] != x.shape[2:]:
        raise ShapeError(f"recurrent gate kernels Wh{{i,f,g,o}} expect state of shape "
                         f"{(params.hidden,) + x.shape[2:]}, got {state.h.shape[1:]}")
    if state.c.shape != state.h.shape:
        raise ShapeError(f"cell state shape {state.c.shape} != hidden shape {state.h.shape}")


def convlstm_step(x, state: CellState, params: ConvLstmParams):
    """One cell update. ``x`` is (C_in, H, W) or (B, C_in, H, W).

    Returns ``(new_state, cache)``; pass the cache to
    :func:`convlstm_step_backward`.
    """
    single = x.ndim == 3
    if single:
        x = x[None]
        state = CellState(state.h[None], state.c[None])
    _check_step(x, state, params)
    a = T.conv2d(x, params.wx.value, params.b.value) + T.conv2d(state.h, params.wh.value)
    new, step_cache = _advance(a, state, params.hidden)
    cache = (x, step_cache, single)
    if single:
        new = CellState(new.h[0], new.c[0])
    return new, cache


def convlstm_step_backward(dh, dc, cache, params: ConvLstmParams):
    """Gradients of one step; accumulates into ``params`` and returns
    ``(dx, dh_prev, dc_prev)``."""
    x, step_cache, single = cache
    if single:
        dh, dc = dh[None], dc[None]
    da, dc_prev = _retreat(dh, dc, step_cache)
    dx, dwx, db = T.conv2d_backward(da, x, params.wx.value)
    dh_prev, dwh, _ = T.conv2d_backward(da, step_cache[0], params.wh.value)
    params.wx.grad += dwx
    params.wh.grad += dwh
    params.b.grad += db
    if single:
        return dx[0], dh_prev[0], dc_prev[0]
    return dx, dh_prev, dc_prev


class ConvLstm(Layer):
    """Runs a conv-LSTM over the slice axis of ``(B, D, C_in, H, W)`` input.

    ``output_mode="full"`` returns ``(B, D, C_out, H, W)`` hidden maps in the
    original slice order whatever the direction; ``"last"`` returns the
    ``(B, C_out, H, W)`` hidden state after the final processed slice. A
    descending pass is computed as an ascending pass over the reversed
    sequence, so the two are exact mirror images.
    """

    def __init__(self, cell: ConvLstmParams, direction=ASCENDING, output_mode="full"):
        if direction not in (ASCENDING, DESCENDING):
            raise ValueError(f"direction must be ascending or descending, got {direction!r}")
        if output_mode not in ("full", "last"):
            raise ValueError(f"output_mode must be full or last, got {output_mode!r}")
        self.cell = cell
        self.direction = direction
        self.output_mode = output_mode
        self._cache = None

    @classmethod
    def build(cls, name, cin, cout, rng, direction=ASCENDING, output_mode="full", dtype=np.float32):
        return cls(ConvLstmParams.init(name, cin, cout, rng, dtype), direction, output_mode)

    def params(self):
        return self.cell.tensors()

    def forward(self, seq, train=True, initial=None):
        if seq.ndim != 5:
            raise ShapeError(f"expected (B, D, C, H, W) sequence, got shape {seq.shape}")
        if seq.shape[1] == 0:
            raise EmptySequenceError("conv-LSTM sequence has no slices")
        if self.direction == DESCENDING:
            seq = seq[:, ::-1]
        out = self._run(np.ascontiguousarray(seq), initial)
        if self.output_mode == "full" and self.direction == DESCENDING:
            out = np.ascontiguousarray(out[:, ::-1])
        return out

    def _run(self, seq, initial):
        p = self.cell
        b, d, cin, hgt, wid = seq.shape
        c = p.hidden
        if cin != p.inputs:
            raise ShapeError(f"input gate kernels Wx{{i,f,g,o}} expect {p.inputs} channels, got sequence {seq.shape}")
        flat = seq.reshape(b * d, cin, hgt, wid)
        ax = T.conv2d(flat, p.wx.value, p.b.value).reshape(b, d, 4 * c, hgt, wid)
        state = initial if initial is not None else CellState.zeros((b, c, hgt, wid), seq.dtype)
        if initial is not None and (state.h.shape != (b, c, hgt, wid) or state.c.shape != state.h.shape):
            raise ShapeError(f"initial state shape {state.h.shape} does not match {(b, c, hgt, wid)}")
        steps = []
        hs = np.empty((b, d, c, hgt, wid), dtype=seq.dtype)
        for t in range(d):
            a = ax[:, t] + T.conv2d(state.h, p.wh.value)
            state, step_cache = _advance(a, state, c)
            steps.append(step_cache)
            hs[:, t] = state.h
        self._cache = (flat, steps, (b, d, cin, hgt, wid))
        return hs if self.output_mode == "full" else state.h

    def backward(self, dout, return_state_grad=False):
        if self._cache is None:
            raise ContractError("ConvLstm.backward called without cached forward intermediates")
        flat, steps, (b, d, cin, hgt, wid) = self._cache
        self._cache = None
        p = self.cell
        c = p.hidden
        if self.output_mode == "full":
            if self.direction == DESCENDING:
                dout = dout[:, ::-1]
            dhs = dout
        else:
            dhs = None
        dh = np.zeros((b, c, hgt, wid), dtype=flat.dtype)
        dc = np.zeros_like(dh)
        da_all = np.empty((b, d, 4 * c, hgt, wid), dtype=flat.dtype)
        for t in reversed(range(d)):
            if dhs is not None:
                dh = dh + dhs[:, t]
            elif t == d - 1:
                dh = dh + dout
            da, dc = _retreat(dh, dc, steps[t])
            da_all[:, t] = da
            dh, dwh, _ = T.conv2d_backward(da, steps[t][0], p.wh.value)
            p.wh.grad += dwh
        dx, dwx, db = T.conv2d_backward(da_all.reshape(b * d, 4 * c, hgt, wid), flat, p.wx.value)
        p.wx.grad += dwx
        p.b.grad += db
        dx = dx.reshape(b, d, cin, hgt, wid)
        if self.direction == DESCENDING:
            dx = np.ascontiguousarray(dx[:, ::-1])
        if return_state_grad:
            return dx, CellState(dh, dc)
        return dx


def convlstm_sequence(seq, params: ConvLstmParams, direction=ASCENDING, output_mode="full"):
    """Functional form of :class:`ConvLstm` for a single ``(D, C, H, W)`` or
    batched ``(B, D, C, H, W)`` sequence."""
    single = seq.ndim == 4
    layer = ConvLstm(params, direction, output_mode)
    out = layer.forward(seq[None] if single else seq)
    return out[0] if single else out
