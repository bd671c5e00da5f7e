"""Feature files, stream manifests, batch iteration and synthetic streams.

The on-disk feature format is little-endian:

    bytes 0-3   magic "UCFV"
    u32         version (currently 1)
    u32         n, number of vectors
    u32         d, vector dimension
    u8          flags: bit 0 = rows L2-normalized, bit 1 = labels present
    3 bytes     padding
    n*d f32     row-major payload
    n*u32       labels (only when flag bit 1 is set)

Labels ride along for evaluation only; training code paths load features
through ``read_features_unlabeled`` and never see them.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import (
    BadMagicError,
    FormatError,
    GenerationError,
    TruncatedFileError,
    ValidationError,
    VersionMismatchError,
)

logger = logging.getLogger(__name__)

MAGIC = b"UCFV"
VERSION = 1
FLAG_NORMALIZED = 0x01
FLAG_LABELS = 0x02

_HEADER = struct.Struct("<4sIIIB3x")  # magic, version, n, d, flags, padding

NORM_TOL = 1e-4


@dataclass
class FeatureBatch:
    """A block of unit-norm feature rows, optionally with held-out labels."""

    z: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.z.ndim != 2 or self.z.shape[0] < 1:
            raise ValidationError(f"feature batch must be a non-empty 2-d matrix, got shape {self.z.shape}")


@dataclass
class TaskEntry:
    train: str
    test: str
    cnum: int


@dataclass
class StreamManifest:
    """Ordered task list plus the shared feature dimension."""

    dim: int
    tasks: list[TaskEntry]
    root: Path = field(default_factory=Path)

    def train_path(self, t: int) -> Path:
        return self.root / self.tasks[t].train

    def test_path(self, t: int) -> Path:
        return self.root / self.tasks[t].test

    def validate(self) -> None:
        if not self.tasks:
            raise ValidationError("manifest lists no tasks")
        for i, task in enumerate(self.tasks):
            if task.cnum < 1:
                raise ValidationError(f"task {i} declares non-positive class count {task.cnum}")
        for i in range(len(self.tasks)):
            for path in (self.train_path(i), self.test_path(i)):
                header = read_feature_header(path)
                if header["dim"] != self.dim:
                    raise ValidationError(
                        f"{path} has dimension {header['dim']}, manifest declares {self.dim}"
                    )


def save_manifest(manifest: StreamManifest, path) -> None:
    doc = {
        "dim": manifest.dim,
        "tasks": [{"train": t.train, "test": t.test, "cnum": t.cnum} for t in manifest.tasks],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_manifest(path) -> StreamManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read manifest {path}: {exc}") from exc
    known = {"dim", "tasks"}
    unknown = set(doc) - known
    if unknown:
        raise ValidationError(f"manifest {path} has unknown keys: {sorted(unknown)}")
    tasks = [TaskEntry(train=t["train"], test=t["test"], cnum=int(t["cnum"])) for t in doc["tasks"]]
    manifest = StreamManifest(dim=int(doc["dim"]), tasks=tasks, root=path.parent)
    if not manifest.tasks:
        raise ValidationError(f"manifest {path} lists no tasks")
    return manifest


def l2_normalize(x: np.ndarray) -> np.ndarray:
    """Scale each row to unit L2 norm."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValidationError("cannot normalize zero rows")
    return x / norms


def _rows_normalized(x: np.ndarray) -> bool:
    norms = np.linalg.norm(x.astype(np.float64), axis=1)
    return bool(np.max(np.abs(norms - 1.0)) <= NORM_TOL)


def write_features(vectors: np.ndarray, path, *, labels=None) -> None:
    """Write a feature matrix (and optional labels) to `path`.

    Rows are stored L2-normalized: input already within 1e-4 of unit norm is
    written untouched (bit-exact round-trips), anything else is normalized
    first.
    """
    vectors = np.asarray(vectors)
    if vectors.ndim != 2:
        raise ValidationError(f"expected a 2-d matrix, got shape {vectors.shape}")
    n, d = vectors.shape
    if n < 1 or d < 1:
        raise ValidationError(f"feature matrix must be non-empty, got shape {vectors.shape}")
    if not np.all(np.isfinite(vectors)):
        raise ValidationError("feature matrix contains non-finite entries")

    data = vectors.astype(np.float32, copy=False)
    if not _rows_normalized(data):
        data = l2_normalize(data).astype(np.float32)

    flags = FLAG_NORMALIZED
    label_arr = None
    if labels is not None:
        label_arr = np.asarray(labels)
        if label_arr.shape != (n,):
            raise ValidationError(f"labels must have shape ({n},), got {label_arr.shape}")
        if np.any(label_arr < 0):
            raise ValidationError("labels must be non-negative")
        label_arr = label_arr.astype(np.uint32)
        flags |= FLAG_LABELS

    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, n, d, flags))
            fh.write(np.ascontiguousarray(data).tobytes())
            if label_arr is not None:
                fh.write(label_arr.tobytes())
    except OSError as exc:
        raise OSError(f"failed writing features to {path}: {exc}") from exc


def read_feature_header(path) -> dict:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, n, d, flags = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: unsupported version {version}, expected {VERSION}")
    return {
        "count": n,
        "dim": d,
        "normalized": bool(flags & FLAG_NORMALIZED),
        "has_labels": bool(flags & FLAG_LABELS),
    }


def read_features(path) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Read a feature file back into (matrix, labels-or-None)."""
    path = Path(path)
    header = read_feature_header(path)
    n, d = header["count"], header["dim"]
    payload = path.stat().st_size - _HEADER.size
    expected = n * d * 4 + (n * 4 if header["has_labels"] else 0)
    if payload < expected:
        raise TruncatedFileError(f"{path}: payload has {payload} bytes, header declares {expected}")
    if payload > expected:
        raise FormatError(f"{path}: {payload - expected} trailing bytes after declared payload")

    with open(path, "rb") as fh:
        fh.seek(_HEADER.size)
        data = np.frombuffer(fh.read(n * d * 4), dtype="<f4").reshape(n, d)
        labels = None
        if header["has_labels"]:
            labels = np.frombuffer(fh.read(n * 4), dtype="<u4").astype(np.int64)

    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: payload contains non-finite entries")
    if header["normalized"] and not _rows_normalized(data):
        raise FormatError(f"{path}: normalized flag set but rows deviate from unit norm")
    return data, labels


def read_features_unlabeled(path) -> np.ndarray:
    """Feature access for training code: labels are dropped at the door."""
    z, _ = read_features(path)
    return z


def batch_iter(
    z: np.ndarray,
    batch_size: int,
    seed: int,
    epoch: int,
    labels: Optional[np.ndarray] = None,
) -> Iterator[FeatureBatch]:
    """Yield a deterministic shuffled partition of `z` keyed by (seed, epoch)."""
    if batch_size < 1:
        raise ValidationError(f"batch size must be >= 1, got {batch_size}")
    n = z.shape[0]
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield FeatureBatch(z=z[idx], labels=None if labels is None else labels[idx])


@dataclass
class SynthResult:
    manifest: StreamManifest
    manifest_path: Path
    class_means: np.ndarray  # (tasks * classes_per_task, dim), row = global class id


_REJECTION_ATTEMPTS = 10_000


def _sample_class_means(rng, total: int, dim: int, max_cos: float = 0.95) -> np.ndarray:
    means = np.empty((total, dim))
    have = 0
    for _ in range(_REJECTION_ATTEMPTS):
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        if have and np.max(means[:have] @ v) > max_cos:
            continue
        means[have] = v
        have += 1
        if have == total:
            return means
    raise GenerationError(
        f"could not place {total} class means with pairwise cosine <= {max_cos} in dimension {dim}; "
        "try a larger --dim"
    )


def synth_stream(
    out_dir,
    *,
    tasks: int,
    classes_per_task: int,
    dim: int,
    train_per_class: int,
    test_per_class: int,
    spread: float,
    seed: int,
) -> SynthResult:
    """Generate a synthetic task stream of unit-sphere Gaussian bumps.

    Each class mean is drawn uniformly on the sphere (rejecting pairs with
    cosine similarity above 0.95); samples are mean plus isotropic noise of
    scale `spread`, renormalized to unit length. Labels are globally unique
    across tasks. Fully deterministic given `seed`.
    """
    for name, value in [
        ("tasks", tasks),
        ("classes_per_task", classes_per_task),
        ("dim", dim),
        ("train_per_class", train_per_class),
        ("test_per_class", test_per_class),
    ]:
        if value < 1:
            raise ValidationError(f"{name} must be positive, got {value}")
    if spread <= 0:
        raise ValidationError(f"spread must be > 0, got {spread}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed])
    total = tasks * classes_per_task
    means = _sample_class_means(rng, total, dim)

    def draw(cls: int, count: int) -> np.ndarray:
        noise = rng.standard_normal((count, dim)) * spread
        return l2_normalize(means[cls] + noise).astype(np.float32)

    entries = []
    for t in range(tasks):
        class_ids = range(t * classes_per_task, (t + 1) * classes_per_task)
        splits = {}
        for split, per_class in [("train", train_per_class), ("test", test_per_class)]:
            blocks, labels = [], []
            for cls in class_ids:
                blocks.append(draw(cls, per_class))
                labels.append(np.full(per_class, cls, dtype=np.int64))
            name = f"task{t}_{split}.ucfv"
            write_features(np.vstack(blocks), out_dir / name, labels=np.concatenate(labels))
            splits[split] = name
        entries.append(TaskEntry(train=splits["train"], test=splits["test"], cnum=classes_per_task))

    manifest = StreamManifest(dim=dim, tasks=entries, root=out_dir)
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest, manifest_path)
    logger.info("synthesized %d tasks x %d classes into %s", tasks, classes_per_task, out_dir)
    return SynthResult(manifest=manifest, manifest_path=manifest_path, class_means=means)
