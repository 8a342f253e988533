"""VSCK checkpoint files.

Layout (all integers little-endian)::

    b"VSCK" | u16 version=1 | u32 len | config block (UTF-8 key=value lines)
    u32 n | n x (u16 len, name, u8 rank, rank x u32 dim) | u64 count | count x f32
    -- the same manifest+buffer encoding again for batch-norm running stats --

Parameters appear in declaration order. Each batch norm contributes three
stats entries: ``<bn>.running_mean``, ``<bn>.running_var`` and the scalar
``<bn>.num_batches``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import (BadMagicError, ConfigError, ManifestMismatchError, TruncatedError,
                     UnknownArchitectureError, VersionError)
from .fileio import atomic_write_bytes
from .models import MODEL_KINDS, ModelConfig, build_model

MAGIC = b"VSCK"
VERSION = 1
F32 = np.dtype("<f4")


def _stat_arrays(model):
    out = []
    for name, s in model.stats():
        out.append((f"{name}.running_mean", s.mean))
        out.append((f"{name}.running_var", s.var))
        out.append((f"{name}.num_batches", np.array(float(s.count))))
    return out


def _encode_section(entries):
    parts = [struct.pack("<I", len(entries))]
    total = 0
    for name, arr in entries:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        total += arr.size
    parts.append(struct.pack("<Q", total))
    parts.extend(np.ascontiguousarray(arr, dtype=F32).tobytes() for _, arr in entries)
    return b"".join(parts)


def checkpoint_bytes(model) -> bytes:
    block = model.config.to_block().encode("utf-8")
    params = [(p.name, p.value) for p in model.params()]
    return (MAGIC + struct.pack("<HI", VERSION, len(block)) + block
            + _encode_section(params) + _encode_section(_stat_arrays(model)))


def save_checkpoint(model, path):
    atomic_write_bytes(path, checkpoint_bytes(model))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedError(f"checkpoint truncated while reading {what}: need {n} bytes at offset "
                                 f"{self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _decode_section(r, label):
    (n,) = r.unpack("<I", f"{label} entry count")
    manifest = []
    for _ in range(n):
        (ln,) = r.unpack("<H", f"{label} name length")
        name = r.take(ln, f"{label} name").decode("utf-8")
        (rank,) = r.unpack("<B", f"{label} rank")
        dims = r.unpack(f"<{rank}I", f"{label} dims of {name}")
        manifest.append((name, tuple(dims)))
    (count,) = r.unpack("<Q", f"{label} float count")
    declared = sum(int(np.prod(d)) for _, d in manifest)
    if count != declared:
        raise TruncatedError(f"{label}: buffer declares {count} floats but manifest shapes need {declared}")
    flat = np.frombuffer(r.take(4 * count, f"{label} buffer"), dtype=F32)
    arrays, off = [], 0
    for name, dims in manifest:
        size = int(np.prod(dims))
        arrays.append((name, flat[off:off + size].reshape(dims).astype(np.float32)))
        off += size
    return arrays


def parse_checkpoint(data: bytes):
    """Decode into ``(config, params, stats)`` without building a model."""
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"not a VSCK checkpoint (magic {magic!r})")
    version, block_len = r.unpack("<HI", "header")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    block = r.take(block_len, "config block").decode("utf-8")
    kind = next((ln.split("=", 1)[1].strip() for ln in block.splitlines() if ln.startswith("model=")), None)
    if kind not in MODEL_KINDS:
        raise UnknownArchitectureError(f"unknown architecture {kind!r} in checkpoint")
    try:
        config = ModelConfig.from_block(block)
    except (ConfigError, ValueError) as exc:
        raise UnknownArchitectureError(f"invalid config block: {exc}") from exc
    params = _decode_section(r, "parameters")
    stats = _decode_section(r, "batch-norm stats")
    if r.pos != len(data):
        raise TruncatedError(f"{len(data) - r.pos} trailing bytes after checkpoint payload")
    return config, params, stats


def _manifest(entries):
    return [(name, tuple(arr.shape)) for name, arr in entries]


def load_into(model, params, stats):
    """Copy decoded arrays into ``model``; the manifests must match exactly."""
    want = _manifest([(p.name, p.value) for p in model.params()])
    if _manifest(params) != want:
        raise ManifestMismatchError(_diff("parameter", _manifest(params), want))
    want_stats = _manifest(_stat_arrays(model))
    if _manifest(stats) != want_stats:
        raise ManifestMismatchError(_diff("batch-norm stats", _manifest(stats), want_stats))
    for p, (_, arr) in zip(model.params(), params):
        p.value = arr.astype(p.value.dtype)
        p.grad = np.zeros_like(p.value)
    it = iter(stats)
    for _, s in model.stats():
        s.mean = next(it)[1].astype(s.mean.dtype)
        s.var = next(it)[1].astype(s.var.dtype)
        s.count = int(next(it)[1])
    return model


def _diff(label, got, want):
    for i, (g, w) in enumerate(zip(got, want)):
        if g != w:
            return f"{label} manifest mismatch at entry {i}: checkpoint has {g}, model expects {w}"
    return f"{label} manifest has {len(got)} entries, model expects {len(want)}"


def load_checkpoint(path, expected: ModelConfig | None = None):
    """Rebuild the model stored at ``path``.

    With ``expected`` the stored architecture must match it (kind, filters,
    input dims); otherwise :class:`ManifestMismatchError` is raised.
    """
    config, params, stats = parse_checkpoint(Path(path).read_bytes())
    target = config
    if expected is not None:
        if (expected.kind, expected.filters, expected.input_dims) != (config.kind, config.filters, config.input_dims):
            raise ManifestMismatchError(
                f"checkpoint holds {config.kind} filters={config.filters} dims={config.input_dims}, "
                f"expected {expected.kind} filters={expected.filters} dims={expected.input_dims}")
        target = expected
    return load_into(build_model(target), params, stats)
