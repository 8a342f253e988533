"""Synthetic CT-like volumes, resizing, patient-level splits and file I/O.

Each volume is a smooth random background plus noise. Positive volumes
additionally carry one to three dark ellipsoidal lesions confined to a
contiguous run of ``round(lesion_frac * D)`` slices. Every sample draws
from its own counter-based stream keyed by ``(seed, sample index)``, so
any sample can be regenerated alone and in any order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DimOverflowError, BadMagicError, FormatError, ShapeError, SpecError, SplitError, TruncatedError, VersionError
from .fileio import atomic_write_bytes, read_csv, write_csv

SPLITS = ("train", "val", "test")
VOLB_MAGIC = b"VOLB"
VOLB_VERSION = 1
_VOLB_HEADER = struct.Struct("<4sHIII")
_MAX_VOXELS = 2**31  # refuse to allocate absurd volumes from a corrupt header
MANIFEST_HEADER = ("volume_path", "patient_id", "label", "split")


@dataclass
class VolumeSample:
    voxels: np.ndarray
    patient_id: str
    label: int
    split: str
    mask: np.ndarray | None = None
    index: int = 0


@dataclass(frozen=True)
class GenSpec:
    """``counts`` maps split -> (positives, negatives), in volumes."""

    counts: dict = field(default_factory=lambda: {"train": (20, 20), "val": (5, 5), "test": (10, 10)})
    dims: tuple = (16, 32, 32)
    lesion_frac: float = 0.25
    contrast: float = 0.4
    noise: float = 0.05
    seed: int = 0
    volumes_per_patient: int = 1

    def validate(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise SpecError(f"dims must be three positive integers, got {self.dims}")
        for split, pair in self.counts.items():
            if split not in SPLITS:
                raise SpecError(f"unknown split {split!r}")
            if len(pair) != 2 or min(pair) < 0:
                raise SpecError(f"counts for {split} must be two non-negative integers, got {pair}")
        if self.total == 0:
            raise SpecError("spec asks for zero volumes")
        if not 0 < self.lesion_frac <= 1:
            raise SpecError(f"lesion fraction must be in (0, 1], got {self.lesion_frac}")
        if self.lesion_slices < 1:
            raise SpecError(f"lesion fraction {self.lesion_frac} x depth {self.dims[0]} covers less than one slice")
        if not 0 < self.contrast <= 1:
            raise SpecError(f"contrast must be in (0, 1], got {self.contrast}")
        if self.noise < 0:
            raise SpecError(f"noise must be >= 0, got {self.noise}")
        if self.volumes_per_patient < 1:
            raise SpecError("volumes_per_patient must be >= 1")
        for split, pair in self.counts.items():
            if any(n % self.volumes_per_patient for n in pair):
                raise SpecError(f"{split} counts {pair} are not multiples of volumes_per_patient")
        return self

    @property
    def total(self):
        return sum(sum(pair) for pair in self.counts.values())

    @property
    def lesion_slices(self):
        return int(np.floor(self.lesion_frac * self.dims[0] + 0.5))

    @classmethod
    def from_totals(cls, n_pos, n_neg, fractions=(0.6, 0.2, 0.2), **kw):
        pos = allocate(n_pos, fractions)
        neg = allocate(n_neg, fractions)
        return cls(counts={s: (int(p), int(n)) for s, p, n in zip(SPLITS, pos, neg)}, **kw)


def allocate(n, fractions):
    """Split ``n`` items by ``fractions`` with largest-remainder rounding."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.min() < 0 or abs(fractions.sum() - 1) > 1e-9:
        raise SplitError(f"fractions must be non-negative and sum to 1, got {tuple(fractions)}")
    raw = fractions * n
    out = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - out), kind="stable")[: n - out.sum()]:
        out[i] += 1
    return out


# ---------------------------------------------------------------------------
# generation

def _stream(seed, index, part):
    """Counter-based generator for one sample; ``part`` separates the
    background draw from the lesion draw."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index), part])))


def background(spec: GenSpec, index: int) -> np.ndarray:
    """The lesion-free volume for sample ``index`` (float32 in [0, 1])."""
    d, h, w = spec.dims
    rng = _stream(spec.seed, index, 0)
    field_ = ndimage.gaussian_filter(rng.standard_normal((d, h, w)), sigma=(1.0, h / 8, w / 8), mode="wrap")
    field_ /= max(field_.std(), 1e-12)
    v = 0.7 + 0.05 * field_ + spec.noise * rng.standard_normal((d, h, w))
    return np.clip(v, 0, 1).astype(np.float32)


def lesion_mask(spec: GenSpec, index: int) -> np.ndarray:
    """Boolean mask of 1-3 ellipsoids inside a contiguous slice span of
    exactly ``spec.lesion_slices`` slices."""
    d, h, w = spec.dims
    span = spec.lesion_slices
    rng = _stream(spec.seed, index, 1)
    z0 = int(rng.integers(0, d - span + 1))
    zc = z0 + (span - 1) / 2
    z, y, x = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    mask = np.zeros((d, h, w), bool)
    for k in range(int(rng.integers(1, 4))):
        ry = rng.uniform(0.1, 0.2) * h + 0.5
        rx = rng.uniform(0.1, 0.2) * w + 0.5
        yc = int(rng.integers(int(ry), max(int(ry) + 1, h - int(ry))))
        xc = int(rng.integers(int(rx), max(int(rx) + 1, w - int(rx))))
        # the first lesion spans the whole run (semi-axis span/2 about its
        # centre leaves every run slice with voxels); extras sit inside it
        cz, rz = (zc, span / 2) if k == 0 else (rng.uniform(z0, z0 + span - 1), rng.uniform(0.5, span / 2 + 0.5))
        mask |= ((z - cz) / rz) ** 2 + ((y - yc) / ry) ** 2 + ((x - xc) / rx) ** 2 <= 1
    mask[:z0] = False
    mask[z0 + span:] = False
    return mask


def make_sample(spec: GenSpec, index: int, label: int):
    v = background(spec, index)
    if label:
        mask = lesion_mask(spec, index)
        v = np.where(mask, np.clip(v - np.float32(spec.contrast), 0, 1), v).astype(np.float32)
    else:
        mask = np.zeros(spec.dims, bool)
    return v, mask


def generate_dataset(spec: GenSpec):
    """All samples of ``spec``, split by construction (patient-atomic)."""
    spec.validate()
    k = spec.volumes_per_patient
    samples = []
    index = 0
    patient = 0
    for split in SPLITS:
        pos, neg = spec.counts.get(split, (0, 0))
        for label, n in ((1, pos), (0, neg)):
            for _ in range(n // k):
                pid = f"P{patient:05d}"
                patient += 1
                for _ in range(k):
                    v, mask = make_sample(spec, index, label)
                    samples.append(VolumeSample(v, pid, label, split, mask, index))
                    index += 1
    return samples


# ---------------------------------------------------------------------------
# resizing and splitting

def resize_volume(v, target):
    """Trilinear resize with corner-aligned sampling (first and last voxel
    centres map onto each other)."""
    v = np.asarray(v)
    target = tuple(int(t) for t in target)
    if v.ndim != 3 or len(target) != 3:
        raise ShapeError(f"resize needs a 3D volume and a 3D target, got {v.shape} -> {target}")
    if min(target) < 1 or min(v.shape) < 1:
        raise ShapeError(f"all dims must be >= 1, got {v.shape} -> {target}")
    if target == v.shape:
        return v.copy()
    factors = [t / s for t, s in zip(target, v.shape)]
    out = ndimage.zoom(v.astype(np.float64), factors, order=1, mode="nearest", grid_mode=False)
    if out.shape != target:  # guard against rounding in the output-shape computation
        raise ShapeError(f"resize produced {out.shape}, expected {target}")
    return np.clip(out, v.min(), v.max()).astype(v.dtype)


def split_by_patient(patients, fractions=(0.6, 0.2, 0.2), seed=0):
    """Assign patients to train/val/test.

    ``patients`` maps patient id -> label. Classes are shuffled separately
    and interleaved by rank, then cut into contiguous blocks sized by
    largest-remainder rounding, which keeps each split's class balance
    close to the global one. Returns patient id -> split.
    """
    fractions = tuple(fractions)
    if len(fractions) != 3:
        raise SplitError("fractions must give train, val, test")
    rng = np.random.default_rng([int(seed), 0x5B117])
    ranked = []
    for label in sorted(set(patients.values())):
        ids = sorted(p for p, lab in patients.items() if lab == label)
        ids = [ids[i] for i in rng.permutation(len(ids))]
        ranked += [((i + 0.5) / len(ids), label, pid) for i, pid in enumerate(ids)]
    ranked.sort(key=lambda t: (t[0], t[1]))
    sizes = allocate(len(ranked), fractions)
    assignment = {}
    start = 0
    for split, size, frac in zip(SPLITS, sizes, fractions):
        block = ranked[start:start + size]
        start += size
        if frac > 0 and {lab for _, lab, _ in block} != set(patients.values()):
            raise SplitError(f"split {split!r} received no patients of some class "
                             f"({len(block)} patients in total)")
        for _, _, pid in block:
            assignment[pid] = split
    return assignment


# ---------------------------------------------------------------------------
# VOLB volume files

def volume_bytes(v) -> bytes:
    v = np.asarray(v)
    if v.ndim != 3:
        raise ShapeError(f"volumes are 3D, got shape {v.shape}")
    if max(v.shape) > 0xFFFFFFFF:
        raise DimOverflowError(f"dimension exceeds u32: {v.shape}")
    return _VOLB_HEADER.pack(VOLB_MAGIC, VOLB_VERSION, *v.shape) + np.ascontiguousarray(v, dtype="<f4").tobytes()


def write_volume(path, v):
    atomic_write_bytes(path, volume_bytes(v))


def parse_volume(data: bytes) -> np.ndarray:
    if len(data) < 4 or data[:4] != VOLB_MAGIC:
        raise BadMagicError(f"not a VOLB file (magic {bytes(data[:4])!r})")
    if len(data) < _VOLB_HEADER.size:
        raise TruncatedError(f"VOLB header truncated ({len(data)} bytes)")
    _, version, d, h, w = _VOLB_HEADER.unpack_from(data)
    if version != VOLB_VERSION:
        raise VersionError(f"unsupported VOLB version {version}")
    n = d * h * w
    if n > _MAX_VOXELS:
        raise DimOverflowError(f"header declares {d}x{h}x{w} voxels, above the {_MAX_VOXELS} limit")
    body = len(data) - _VOLB_HEADER.size
    if body != 4 * n:
        raise TruncatedError(f"VOLB {d}x{h}x{w} needs {4 * n} data bytes, file has {body}")
    return np.frombuffer(data, dtype="<f4", offset=_VOLB_HEADER.size).reshape(d, h, w).astype(np.float32)


def read_volume(path) -> np.ndarray:
    return parse_volume(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# datasets on disk

def write_dataset(samples, out_dir):
    """Write volumes, audit masks and ``manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    rows = []
    for s in samples:
        rel = f"volumes/{s.index:05d}_{s.patient_id}.volb"
        write_volume(out / rel, s.voxels)
        if s.mask is not None:
            write_volume(out / f"masks/{s.index:05d}_{s.patient_id}.volb", s.mask.astype(np.float32))
        rows.append((rel, s.patient_id, s.label, s.split))
    manifest = out / "manifest.csv"
    write_csv(manifest, MANIFEST_HEADER, rows)
    return manifest


@dataclass
class ManifestEntry:
    path: Path
    patient_id: str
    label: int
    split: str


def read_manifest(path):
    path = Path(path)
    try:
        rows = read_csv(path)
    except UnicodeDecodeError as exc:
        raise FormatError(f"manifest {path} is not UTF-8") from exc
    if rows and tuple(rows[0].keys()) != MANIFEST_HEADER:
        raise FormatError(f"manifest header must be {','.join(MANIFEST_HEADER)}, got {','.join(rows[0].keys())}")
    entries = []
    seen = {}
    for i, row in enumerate(rows, start=2):
        if row["label"] not in ("0", "1") or row["split"] not in SPLITS:
            raise FormatError(f"{path}:{i}: bad label/split {row['label']!r}/{row['split']!r}")
        prev = seen.setdefault(row["patient_id"], row["split"])
        if prev != row["split"]:
            raise SplitError(f"patient {row['patient_id']} appears in both {prev} and {row['split']}")
        p = Path(row["volume_path"])
        entries.append(ManifestEntry(p if p.is_absolute() else path.parent / p, row["patient_id"],
                                     int(row["label"]), row["split"]))
    return entries


def load_split(entries, split):
    """Stack the volumes of one split: returns ``(X, y)``; X is (N, D, H, W)."""
    chosen = [e for e in entries if e.split == split]
    if not chosen:
        return np.zeros((0, 0, 0, 0), np.float32), np.zeros(0, np.int64)
    x = np.stack([read_volume(e.path) for e in chosen])
    return x, np.array([e.label for e in chosen], dtype=np.int64)
