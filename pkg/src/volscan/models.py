"""The three volume classifiers and the MIL bag poolings.

All models take a batch of volumes shaped ``(B, D, H, W)`` and produce one
probability per volume. Slice-wise 2D layers see the batch flattened to
``(B*D, C, H, W)``.

Architectures (``f1..f4`` are the per-unit filter counts):

* ``convlstm`` -- four units of [conv-BN-ReLU, conv-BN-ReLU, 2x2 max-pool]
  applied per slice, each followed by a conv-LSTM running ascending,
  descending, ascending, descending. Units 1-3 pass on the full hidden
  sequence, unit 4 its last hidden state, then dense + sigmoid.
  Default filters 32, 32, 64, 64.
* ``mil-{max,mean,product}`` -- the same trunk with each conv-LSTM replaced
  by one more conv-BN-ReLU, a shared dense + sigmoid per slice, and a bag
  pooling. Default filters 64, 64, 128, 128.
* ``cnn3d`` -- four blocks of three [conv3d-BN-ReLU] and a max-pool
  (2x2x2 in blocks 1-3, spatial-only 1x2x2 in block 4, odd depth cropped),
  flattened straight into dense + sigmoid. Default filters 36, 36, 72, 72.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .convlstm import ASCENDING, DESCENDING, ConvLstm
from .errors import ConfigError, ShapeError
from .layers import BatchNorm, Dense, MaxPool, Sequential, conv_block
from .rand import rng_for

MODEL_KINDS = ("convlstm", "mil-max", "mil-mean", "mil-product", "cnn3d")
DIRECTIONS = (ASCENDING, DESCENDING, ASCENDING, DESCENDING)
DEFAULT_FILTERS = {
    "convlstm": (32, 32, 64, 64),
    "mil": (64, 64, 128, 128),
    "cnn3d": (36, 36, 72, 72),
}
# Display names and the row order of the comparison table
DISPLAY_NAMES = {
    "mil-max": "MIL - Max Pooling",
    "mil-mean": "MIL - Mean Pooling",
    "mil-product": "MIL - Product Pooling",
    "cnn3d": "3D CNN",
    "convlstm": "Conv-LSTM",
}
TABLE_ORDER = ("mil-max", "mil-mean", "mil-product", "cnn3d", "convlstm")
REFERENCE_PARAMS = {"convlstm": 901_793, "mil-max": 1_011_393, "mil-mean": 1_011_393,
                "mil-product": 1_011_393, "cnn3d": 958_213}
CLINICAL_DIMS = (35, 128, 128)
POOLS = 4


def _family(kind):
    return "mil" if kind.startswith("mil-") else kind


@dataclass(frozen=True)
class ModelConfig:
    kind: str
    input_dims: tuple
    filters: tuple = ()
    seed: int = 0
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {', '.join(MODEL_KINDS)}")
        object.__setattr__(self, "input_dims", tuple(int(v) for v in self.input_dims))
        if not self.filters:
            object.__setattr__(self, "filters", DEFAULT_FILTERS[_family(self.kind)])
        object.__setattr__(self, "filters", tuple(int(v) for v in self.filters))
        self.validate()

    @property
    def pooling(self):
        return self.kind.split("-", 1)[1] if self.kind.startswith("mil-") else None

    @property
    def kernels(self):
        """The base filter count (the "kernels" column of the comparison table)."""
        return self.filters[0]

    def validate(self):
        if len(self.input_dims) != 3 or min(self.input_dims) < 1:
            raise ConfigError(f"input_dims must be three positive integers (D, H, W), got {self.input_dims}")
        if len(self.filters) != POOLS or min(self.filters) < 1:
            raise ConfigError(f"filters must be {POOLS} positive integers, got {self.filters}")
        d, h, w = self.input_dims
        step = 2**POOLS
        if h % step or w % step:
            raise ConfigError(f"H and W must be divisible by {step} (four 2x2 pools), got {h}x{w}")
        if self.kind == "cnn3d" and d // 8 < 1:
            raise ConfigError(f"cnn3d pools depth three times and needs D >= 8, got D={d}")

    def to_block(self):
        """Textual ``key=value`` lines used in checkpoints."""
        return (f"model={self.kind}\nfilters={','.join(map(str, self.filters))}\n"
                f"input_dims={','.join(map(str, self.input_dims))}\nseed={self.seed}\n")

    @classmethod
    def from_block(cls, text):
        kv = {}
        for line in text.splitlines():
            if line.strip():
                key, _, value = line.partition("=")
                kv[key.strip()] = value.strip()
        missing = {"model", "filters", "input_dims", "seed"} - kv.keys()
        if missing:
            raise ConfigError(f"config block is missing {sorted(missing)}")
        return cls(kv["model"], tuple(int(v) for v in kv["input_dims"].split(",")),
                   tuple(int(v) for v in kv["filters"].split(",")), int(kv["seed"]))


# ---------------------------------------------------------------------------
# bag pooling (operates on the last axis)

def _check_bag(p):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 0 or p.shape[-1] == 0:
        raise ShapeError("bag pooling needs at least one instance")
    return p


def pool_max(p):
    p = _check_bag(p)
    T.note_pattern(p.argmax(axis=-1))
    return p.max(axis=-1)


def pool_mean(p):
    p = _check_bag(p)
    # sorted summation keeps the result bitwise permutation-invariant;
    # clipping to [min, max] removes rounding overshoot
    mean = np.sort(p, axis=-1).sum(axis=-1) / p.shape[-1]
    return np.clip(mean, p.min(axis=-1), p.max(axis=-1))


def pool_product(p):
    """Noisy-OR ``1 - prod(1 - p_i)``, evaluated in log space."""
    p = _check_bag(p)
    with np.errstate(divide="ignore"):
        logs = np.log1p(-p)
    out = -np.expm1(np.sort(logs, axis=-1).sum(axis=-1))
    return np.maximum(out, p.max(axis=-1))


def bag_pool(p, mode):
    return {"max": pool_max, "mean": pool_mean, "product": pool_product}[mode](p)


def bag_pool_backward(dout, p, mode):
    """Gradient of the pooled value with respect to each instance probability."""
    p = _check_bag(p)
    dout = np.asarray(dout, dtype=np.float64)[..., None]
    n = p.shape[-1]
    if mode == "max":
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, p.argmax(axis=-1)[..., None], 1.0, axis=-1)
        return dout * onehot
    if mode == "mean":
        return np.broadcast_to(dout / n, p.shape).copy()
    if mode == "product":
        # d/dp_i = prod_{j != i} (1 - p_j), via exclusive prefix/suffix products
        q = 1 - p
        ones = np.ones(p.shape[:-1] + (1,))
        prefix = np.concatenate([ones, np.cumprod(q, axis=-1)[..., :-1]], axis=-1)
        suffix = np.concatenate([np.cumprod(q[..., ::-1], axis=-1)[..., -2::-1], ones], axis=-1)
        return dout * prefix * suffix
    raise ValueError(f"unknown pooling {mode!r}")


# ---------------------------------------------------------------------------
# models

class Model:
    """Shared plumbing: parameter/statistics registry, loss, prediction."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.dtype = np.float32
        self._logits = None

    def _skip_input_grad(self):
        self.modules()[0].layers[0].input_grad = False

    @property
    def kind(self):
        return self.config.kind

    def modules(self):
        raise NotImplementedError

    def params(self):
        return [p for m in self.modules() for p in m.params()]

    def stats(self):
        return [s for m in self.modules() for s in m.stats()]

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def astype(self, dtype):
        for p in self.params():
            p.astype(dtype)
        for _, s in self.stats():
            s.mean = s.mean.astype(dtype)
            s.var = s.var.astype(dtype)
        self.dtype = dtype
        return self

    def _check_input(self, x):
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != self.config.input_dims:
            raise ShapeError(f"{self.kind} expects volumes of shape (B,) + {self.config.input_dims}, got {x.shape}")
        return x.astype(self.dtype, copy=False)

    def forward(self, x, train=False):
        """Probability per volume, shape (B,), float64."""
        raise NotImplementedError

    def loss_backward(self, y):
        """Mean BCE of the last forward pass; accumulates parameter grads."""
        raise NotImplementedError

    def loss(self, x, y, train=True):
        """Mean BCE without touching gradients."""
        p = self.forward(x, train)
        self._logits = None
        return float(T.bce_loss(p, np.asarray(y, dtype=np.float64).reshape(-1))[0].mean())

    def loss_and_grad(self, x, y, train=True):
        self.forward(x, train)
        return self.loss_backward(y)

    def predict(self, volumes):
        """Eval-mode probabilities, one volume at a time so that each score is
        independent of batch composition and order."""
        volumes = np.asarray(volumes)
        if volumes.ndim == 3:
            volumes = volumes[None]
        return np.array([self.forward(v[None], train=False)[0] for v in volumes])


class _LogitHead(Model):
    """Models whose output is ``sigmoid(dense(features))``."""

    def loss_backward(self, y):
        if self._logits is None:
            raise ShapeError("loss_backward called before forward")
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        loss, dz = T.bce_with_logits(self._logits, y)
        self._logits = None
        self._backward((dz / len(y)).astype(self.dtype))
        return float(loss.mean())


class ConvLstmScanner(_LogitHead):
    def __init__(self, config: ModelConfig):
        super().__init__(config)
        rng = rng_for(config.seed, "init")
        d, h, w = config.input_dims
        self.trunks, self.lstms = [], []
        cin = 1
        for k, (f, direction) in enumerate(zip(config.filters, DIRECTIONS), start=1):
            self.trunks.append(Sequential(
                conv_block(f"unit{k}.conv1", cin, f, rng) + conv_block(f"unit{k}.conv2", f, f, rng) + [MaxPool()]))
            mode = "last" if k == POOLS else "full"
            self.lstms.append(ConvLstm.build(f"unit{k}.lstm", f, f, rng, direction, mode))
            cin = f
        self.feature_shape = (config.filters[-1], h // 2**POOLS, w // 2**POOLS)
        self.head = Dense("head", int(np.prod(self.feature_shape)), rng)
        self._skip_input_grad()

    def modules(self):
        out = []
        for trunk, lstm in zip(self.trunks, self.lstms):
            out += [trunk, lstm]
        return out + [self.head]

    def forward(self, x, train=False):
        x = self._check_input(x)
        b, d = x.shape[:2]
        self._b, self._d = b, d
        a = x.reshape(b * d, 1, *x.shape[2:])
        for trunk, lstm in zip(self.trunks, self.lstms):
            a = trunk.forward(a, train)
            seq = lstm.forward(a.reshape(b, d, *a.shape[1:]), train)
            a = seq.reshape(b * d, *seq.shape[2:]) if lstm.output_mode == "full" else seq
        z = self.head.forward(a.reshape(b, -1), train)[:, 0]
        self._logits = z.astype(np.float64)
        return T.sigmoid(self._logits)

    def _backward(self, dz):
        b, d = self._b, self._d
        g = self.head.backward(dz[:, None]).reshape((b,) + self.feature_shape)
        for trunk, lstm in zip(reversed(self.trunks), reversed(self.lstms)):
            if lstm.output_mode == "full":
                g = g.reshape(b, d, *g.shape[1:])
            g = lstm.backward(g)
            g = trunk.backward(g.reshape(b * d, *g.shape[2:]))
        return g


class MilCnn(Model):
    def __init__(self, config: ModelConfig):
        super().__init__(config)
        rng = rng_for(config.seed, "init")
        d, h, w = config.input_dims
        self.units = []
        cin = 1
        for k, f in enumerate(config.filters, start=1):
            self.units.append(Sequential(
                conv_block(f"unit{k}.conv1", cin, f, rng) + conv_block(f"unit{k}.conv2", f, f, rng)
                + [MaxPool()] + conv_block(f"unit{k}.conv3", f, f, rng)))
            cin = f
        self.feature_shape = (config.filters[-1], h // 2**POOLS, w // 2**POOLS)
        self.head = Dense("head", int(np.prod(self.feature_shape)), rng)
        self._skip_input_grad()
        self.slice_probs = None

    def modules(self):
        return self.units + [self.head]

    def forward(self, x, train=False):
        x = self._check_input(x)
        b, d = x.shape[:2]
        a = x.reshape(b * d, 1, *x.shape[2:])
        for unit in self.units:
            a = unit.forward(a, train)
        z = self.head.forward(a.reshape(b * d, -1), train)[:, 0]
        self._logits = z.reshape(b, d).astype(np.float64)
        self.slice_probs = T.sigmoid(self._logits)
        self._bag = bag_pool(self.slice_probs, self.config.pooling)
        return self._bag

    def loss_backward(self, y):
        if self._logits is None:
            raise ShapeError("loss_backward called before forward")
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        loss, dbag = T.bce_loss(self._bag, y)
        dp = bag_pool_backward(dbag / len(y), self.slice_probs, self.config.pooling)
        dz = dp * self.slice_probs * (1 - self.slice_probs)
        self._logits = None
        self._backward(dz.reshape(-1).astype(self.dtype))
        return float(loss.mean())

    def _backward(self, dz):
        g = self.head.backward(dz[:, None]).reshape((len(dz),) + self.feature_shape)
        for unit in reversed(self.units):
            g = unit.backward(g)
        return g


class Cnn3d(_LogitHead):
    def __init__(self, config: ModelConfig):
        super().__init__(config)
        rng = rng_for(config.seed, "init")
        d, h, w = config.input_dims
        self.blocks = []
        cin = 1
        for k, f in enumerate(config.filters, start=1):
            window = (2, 2, 2) if k < POOLS else (1, 2, 2)
            self.blocks.append(Sequential(
                conv_block(f"block{k}.conv1", cin, f, rng, rank=3)
                + conv_block(f"block{k}.conv2", f, f, rng, rank=3)
                + conv_block(f"block{k}.conv3", f, f, rng, rank=3)
                + [MaxPool(window, crop=True)]))
            cin = f
        depth = d
        for _ in range(POOLS - 1):
            depth //= 2
        self.feature_shape = (config.filters[-1], depth, h // 2**POOLS, w // 2**POOLS)
        self.head = Dense("head", int(np.prod(self.feature_shape)), rng)
        self._skip_input_grad()

    def modules(self):
        return self.blocks + [self.head]

    def forward(self, x, train=False):
        x = self._check_input(x)
        a = x[:, None]
        for block in self.blocks:
            a = block.forward(a, train)
        z = self.head.forward(a.reshape(len(a), -1), train)[:, 0]
        self._logits = z.astype(np.float64)
        return T.sigmoid(self._logits)

    def _backward(self, dz):
        g = self.head.backward(dz[:, None]).reshape((len(dz),) + self.feature_shape)
        for block in reversed(self.blocks):
            g = block.backward(g)
        return g


def build_model(config: ModelConfig) -> Model:
    if config.kind == "convlstm":
        return ConvLstmScanner(config)
    if config.kind == "cnn3d":
        return Cnn3d(config)
    return MilCnn(config)


def make_model(kind, input_dims, filters=(), seed=0) -> Model:
    return build_model(ModelConfig(kind, tuple(input_dims), tuple(filters), seed))


def count_parameters(model) -> int:
    """Trainable scalars, BN gamma/beta included, running statistics excluded."""
    return int(sum(p.size for p in model.params()))


def parameter_breakdown(model):
    return [(p.name, p.shape, p.size) for p in model.params()]


def keras_style_count(model) -> int:
    """Count as Keras reports "Total params": BN running mean/var included."""
    extra = sum(2 * s.mean.size for _, s in model.stats())
    return count_parameters(model) + extra
