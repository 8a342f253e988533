"""Finite-difference gradient suite (64-bit) over every differentiable op
and the full models.

Each case builds a small random problem, computes analytic gradients with
the hand-written backward passes and compares them with central
differences via :func:`volscan.tensor.grad_check`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .convlstm import ASCENDING, DESCENDING, CellState, ConvLstm, ConvLstmParams, convlstm_step, convlstm_step_backward
from .layers import MaxPool
from .models import bag_pool, bag_pool_backward, make_model
from .tensor import RunningStats

THRESHOLD = 1e-5
F64 = np.float64


@dataclass
class CaseResult:
    op: str
    max_rel_error: float
    worst: str
    checked: int
    skipped: int
    passed: bool


def _rng(seed, op):
    return np.random.default_rng([seed, sum(map(ord, op))])


def _weighted(out, rng):
    """A random linear functional of ``out`` so every output element matters."""
    w = rng.standard_normal(np.shape(out))
    return w, lambda o: float(np.sum(w * o))


def _conv(rank):
    def case(rng):
        spatial = (4, 5, 4) if rank == 3 else (6, 5)
        x = rng.standard_normal((2, 3) + spatial)
        k = rng.standard_normal((4, 3) + (3,) * rank) * 0.3
        b = rng.standard_normal(4)
        fwd = T.conv2d if rank == 2 else T.conv3d
        bwd = T.conv2d_backward if rank == 2 else T.conv3d_backward
        w, f = _weighted(fwd(x, k, b), rng)
        dx, dk, db = bwd(w, x, k)
        return (lambda: f(fwd(x, k, b))), {"x": x, "kernel": k, "bias": b}, {"x": dx, "kernel": dk, "bias": db}
    return case


def _maxpool(rank):
    def case(rng):
        shape = (2, 3, 4, 6) if rank == 2 else (2, 2, 4, 4, 6)
        # a shuffled grid keeps every window's max well separated
        x = rng.permutation(np.arange(np.prod(shape), dtype=F64)).reshape(shape) * 0.01
        layer = MaxPool((2,) * rank)
        w, f = _weighted(layer.forward(x, True), rng)
        dx = layer.backward(w)
        return (lambda: f(T.maxpool(x, (2,) * rank)[0])), {"x": x}, {"x": dx}
    return case


def _batchnorm(train):
    def case(rng):
        x = rng.standard_normal((4, 3, 5, 5)) * 2 + 1
        gamma = rng.standard_normal(3)
        beta = rng.standard_normal(3)
        stats = RunningStats(rng.standard_normal(3), rng.uniform(0.5, 2, 3), 1)
        w, _ = _weighted(x, rng)

        def fwd():
            s = RunningStats(stats.mean.copy(), stats.var.copy(), stats.count)
            return T.batchnorm(x, gamma, beta, s, train)

        out, cache = fwd()
        dx, dg, db = T.batchnorm_backward(w, cache)
        return (lambda: float(np.sum(w * fwd()[0]))), {"x": x, "gamma": gamma, "beta": beta}, \
            {"x": dx, "gamma": dg, "beta": db}
    return case


def _dense(rng):
    x = rng.standard_normal((3, 7))
    wt = rng.standard_normal((2, 7))
    b = rng.standard_normal(2)
    w, f = _weighted(T.dense(x, wt, b), rng)
    dx, dw, db = T.dense_backward(w, x, wt)
    return (lambda: f(T.dense(x, wt, b))), {"x": x, "weight": wt, "bias": b}, {"x": dx, "weight": dw, "bias": db}


def _relu(rng):
    x = rng.standard_normal(40)
    x[np.abs(x) < 0.05] += 0.1  # stay clear of the kink
    w, f = _weighted(x, rng)
    return (lambda: f(T.relu(x))), {"x": x}, {"x": T.relu_backward(w, x)}


def _sigmoid(rng):
    x = rng.standard_normal(16)
    w, f = _weighted(x, rng)
    return (lambda: f(T.sigmoid(x))), {"x": x}, {"x": T.sigmoid_backward(w, T.sigmoid(x))}


def _tanh(rng):
    x = rng.standard_normal(16)
    w, f = _weighted(x, rng)
    return (lambda: f(T.tanh(x))), {"x": x}, {"x": T.tanh_backward(w, T.tanh(x))}


def _bce(rng):
    p = rng.uniform(0.05, 0.95, 12)
    y = (rng.random(12) < 0.5).astype(F64)
    z = rng.standard_normal(12) * 2
    _, dp = T.bce_loss(p, y)
    _, dz = T.bce_with_logits(z, y)
    return (lambda: float(T.bce_loss(p, y)[0].sum() + T.bce_with_logits(z, y)[0].sum())), \
        {"p": p, "z": z}, {"p": dp, "z": dz}


def _lstm_params(rng, cin, cout):
    params = ConvLstmParams.init("cell", cin, cout, rng, F64)
    for p in params.tensors():
        p.value[...] = rng.standard_normal(p.shape) * 0.4
    return params


def _convlstm_step(rng):
    params = _lstm_params(rng, 2, 3)
    x = rng.standard_normal((2, 2, 4, 4))
    s0 = CellState(rng.standard_normal((2, 3, 4, 4)) * 0.5, rng.standard_normal((2, 3, 4, 4)) * 0.5)
    new, cache = convlstm_step(x, s0, params)
    wh, fh = _weighted(new.h, rng)
    wc, fc = _weighted(new.c, rng)
    dx, dh0, dc0 = convlstm_step_backward(wh, wc, cache, params)

    def loss():
        n, _ = convlstm_step(x, s0, params)
        return fh(n.h) + fc(n.c)

    tensors = {"x": x, "h0": s0.h, "c0": s0.c, **{p.name: p.value for p in params.tensors()}}
    grads = {"x": dx, "h0": dh0, "c0": dc0, **{p.name: p.grad for p in params.tensors()}}
    return loss, tensors, grads


def _convlstm_seq(direction, mode):
    def case(rng):
        params = _lstm_params(rng, 2, 3)
        layer = ConvLstm(params, direction, mode)
        seq = rng.standard_normal((2, 4, 2, 3, 3))
        w, f = _weighted(layer.forward(seq), rng)
        dx = layer.backward(w)
        tensors = {"seq": seq, **{p.name: p.value for p in params.tensors()}}
        grads = {"seq": dx, **{p.name: p.grad for p in params.tensors()}}
        return (lambda: f(ConvLstm(params, direction, mode).forward(seq))), tensors, grads
    return case


def _pool(mode):
    def case(rng):
        # moderate bags: with many confident instances the product gradient
        # underflows toward the FD noise floor
        p = rng.uniform(0.02, 0.7, (5, 6))
        w = rng.standard_normal(5)
        return (lambda: float(np.sum(w * bag_pool(p, mode)))), {"p": p}, {"p": bag_pool_backward(w, p, mode)}
    return case


def _model(kind, dims, train):
    def case(rng):
        model = make_model(kind, dims, seed=int(rng.integers(1 << 31))).astype(F64)
        x = rng.random((1,) + dims)
        y = np.array([1.0])
        # running statistics from a real batch keep eval-mode activations
        # at unit scale (random statistics shrink gradients into FD noise)
        model.forward(rng.random((4,) + dims), train=True)
        model.zero_grad()
        model.loss_and_grad(x, y, train)
        params = model.params()
        tensors = {p.name: p.value for p in params}
        grads = {p.name: p.grad for p in params}
        return (lambda: model.loss(x, y, train)), tensors, grads
    return case


# samples per tensor; model cases spread >= 100 coordinates over all tensors
CASES = {
    "conv2d": (_conv(2), 40),
    "conv3d": (_conv(3), 40),
    "maxpool2d": (_maxpool(2), 40),
    "maxpool3d": (_maxpool(3), 40),
    "batchnorm-train": (_batchnorm(True), 40),
    "batchnorm-eval": (_batchnorm(False), 40),
    "dense": (_dense, 40),
    "relu": (_relu, 40),
    "sigmoid": (_sigmoid, 40),
    "tanh": (_tanh, 40),
    "bce": (_bce, 40),
    "convlstm-step": (_convlstm_step, 40),
    "convlstm-ascending-full": (_convlstm_seq(ASCENDING, "full"), 30),
    "convlstm-descending-full": (_convlstm_seq(DESCENDING, "full"), 30),
    "convlstm-ascending-last": (_convlstm_seq(ASCENDING, "last"), 30),
    "convlstm-descending-last": (_convlstm_seq(DESCENDING, "last"), 30),
    "pool-max": (_pool("max"), 45),
    "pool-mean": (_pool("mean"), 45),
    "pool-product": (_pool("product"), 45),
    "model-convlstm": (_model("convlstm", (4, 16, 16), True), 4),
    "model-mil-product": (_model("mil-product", (4, 16, 16), False), 4),
    "model-cnn3d": (_model("cnn3d", (8, 16, 16), False), 5),
}


def run_case(op, seed=0, corrupt=False, threshold=THRESHOLD):
    """Run one registered case. ``corrupt`` perturbs the analytic gradient
    (a harness self-test: the case must then fail)."""
    build, samples = CASES[op]
    rng = _rng(seed, op)
    loss, tensors, grads = build(rng)
    if corrupt:
        grads = {k: g * 1.05 + 1e-3 for k, g in grads.items()}
    res = T.grad_check(loss, tensors, grads, seed=seed, samples=samples)
    worst = f"{res.worst_name}{list(res.worst_index)}" if res.worst_name else ""
    return CaseResult(op, res.max_rel_error, worst, res.checked, res.skipped,
                      res.max_rel_error < threshold and res.checked > 0)


def select(ops=None):
    if not ops:
        return list(CASES)
    unknown = [o for o in ops if o not in CASES and not any(k.startswith(o) for k in CASES)]
    if unknown:
        raise KeyError(f"unknown gradcheck op(s): {', '.join(unknown)}; known: {', '.join(CASES)}")
    return [k for k in CASES if any(k == o or k.startswith(o) for o in ops)]


def run_suite(ops=None, seed=0, corrupt=(), threshold=THRESHOLD):
    return [run_case(op, seed, op in set(corrupt), threshold) for op in select(ops)]
