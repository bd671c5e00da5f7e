"""Prototype memory: end-of-task consolidation, replay sampling, old/sep losses.

After a task finishes, every feature is hard-assigned to its best prototype
and to a predicted class; each surviving prototype is stored as (count,
mean, per-dimension variance, purity, class). Replay draws per-class
balanced features from those Gaussians, weighting prototypes by count times
purity, and re-normalizes the draws to the unit sphere.

An exemplar store with the same sampling interface exists purely as a
memory-strategy baseline for comparisons.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .classifier import (
    LOG_FLOOR,
    ClassCenters,
    Projector,
    center_logits,
    projector_forward,
    softmax_rows,
)
from .errors import ValidationError
from .prototypes import PrototypeSet, log_posterior

logger = logging.getLogger(__name__)

VAR_FLOOR = 1e-6


@dataclass
class ProtoStat:
    """Frozen statistics of one prototype after consolidation."""

    mean: np.ndarray
    var: np.ndarray  # (d,) diagonal, or (1,) in scalar mode
    count: int
    purity: float
    class_id: int
    task_id: int


@dataclass
class PrototypeMemory:
    stats: list[ProtoStat] = field(default_factory=list)

    def add(self, stats: list[ProtoStat]) -> None:
        self.stats.extend(stats)

    def class_ids(self) -> list[int]:
        return sorted({s.class_id for s in self.stats})

    def by_class(self, class_id: int) -> list[ProtoStat]:
        return [s for s in self.stats if s.class_id == class_id]

    def budget_floats(self) -> int:
        return sum(s.mean.size + s.var.size for s in self.stats)

    def __len__(self) -> int:
        return len(self.stats)


@dataclass
class ExemplarMemory:
    """Raw-feature baseline: `per_class` stored rows per discovered class."""

    per_class: int
    rows: dict[int, np.ndarray] = field(default_factory=dict)

    def add_task(self, z: np.ndarray, pred_global: np.ndarray, rng) -> None:
        for cls in np.unique(pred_global):
            idx = np.flatnonzero(pred_global == cls)
            keep = rng.choice(idx, size=min(self.per_class, idx.size), replace=False)
            self.rows[int(cls)] = z[keep].copy()

    def class_ids(self) -> list[int]:
        return sorted(self.rows)

    def budget_floats(self) -> int:
        return sum(v.size for v in self.rows.values())

    def __len__(self) -> int:
        return len(self.rows)


def consolidate_task(
    z_train: np.ndarray,
    protos: PrototypeSet,
    projector: Projector,
    centers: ClassCenters,
    *,
    task_id: int,
    class_offset: int,
    var_mode: str = "diagonal",
) -> list[ProtoStat]:
    """Freeze the task's prototypes into per-prototype statistics.

    Features are hard-assigned to prototypes by the posterior and to classes
    by the current-task centers; prototypes with no assigned features are
    dropped. Majority-vote ties break toward the lower class id.
    """
    if z_train.shape[0] == 0:
        raise ValidationError("cannot consolidate a task with zero features")
    if var_mode not in ("diagonal", "scalar"):
        raise ValidationError(f"unknown variance mode {var_mode!r}")

    assign = np.argmax(log_posterior(z_train, protos), axis=0)
    e, _ = projector_forward(projector, z_train)
    local_pred = np.argmax(center_logits(e, centers, centers.current_slice()), axis=1)

    stats = []
    k = centers.current_slice().stop - centers.current_slice().start
    for w in range(protos.r):
        idx = np.flatnonzero(assign == w)
        if idx.size == 0:
            continue
        votes = np.bincount(local_pred[idx], minlength=k)
        majority = int(np.argmax(votes))
        mean = z_train[idx].astype(np.float64).mean(axis=0)
        var = np.maximum(z_train[idx].astype(np.float64).var(axis=0), VAR_FLOOR)
        if var_mode == "scalar":
            var = np.array([var.mean()])
        stats.append(
            ProtoStat(
                mean=mean,
                var=var,
                count=int(idx.size),
                purity=float(votes[majority] / idx.size),
                class_id=majority + class_offset,
                task_id=task_id,
            )
        )
    return stats


def sample_old(memory, per_class: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw `per_class` replay features for every stored class.

    Prototype memories sample from the stored Gaussians with probability
    proportional to count * purity and re-normalize draws to the sphere;
    exemplar memories resample stored rows.
    """
    if per_class < 1:
        raise ValidationError(f"per-class sample count must be >= 1, got {per_class}")
    if len(memory) == 0:
        raise ValidationError("memory is empty")

    if isinstance(memory, ExemplarMemory):
        feats, labels = [], []
        for cls in memory.class_ids():
            pool = memory.rows[cls]
            picks = rng.choice(pool.shape[0], size=per_class, replace=True)
            feats.append(pool[picks])
            labels.append(np.full(per_class, cls, dtype=np.int64))
        return np.vstack(feats).astype(np.float64), np.concatenate(labels)

    feats, labels = [], []
    for cls in memory.class_ids():
        stats = memory.by_class(cls)
        weights = np.array([s.count * s.purity for s in stats], dtype=np.float64)
        if weights.sum() <= 0:
            logger.warning("class %d has all-zero count*purity weights; sampling uniformly", cls)
            weights = np.ones(len(stats))
        weights /= weights.sum()
        picks = rng.choice(len(stats), size=per_class, p=weights)
        means = np.stack([stats[i].mean for i in picks])
        sds = np.stack([np.sqrt(np.broadcast_to(stats[i].var, stats[i].mean.shape)) for i in picks])
        draws = means + rng.standard_normal(means.shape) * sds
        draws /= np.linalg.norm(draws, axis=1, keepdims=True)
        feats.append(draws)
        labels.append(np.full(per_class, cls, dtype=np.int64))
    return np.vstack(feats), np.concatenate(labels)


def old_loss(z_old: np.ndarray, y_old: np.ndarray, projector: Projector, centers: ClassCenters) -> float:
    """Negative log-likelihood of the stored class under the joint softmax."""
    if np.any(y_old < 0) or np.any(y_old >= centers.total):
        raise ValidationError("replay label without a matching center")
    e, _ = projector_forward(projector, z_old)
    p = softmax_rows(center_logits(e, centers))
    picked = p[np.arange(z_old.shape[0]), y_old]
    return float(-np.mean(np.log(np.maximum(picked, LOG_FLOOR))))


def sep_loss(z: np.ndarray, projector: Projector, centers: ClassCenters) -> float:
    """Negative log of the probability mass current-task centers receive.

    Contributes 0 when no old centers exist (first task).
    """
    if centers.old_count == 0:
        return 0.0
    e, _ = projector_forward(projector, z)
    p = softmax_rows(center_logits(e, centers))
    mass_cur = p[:, centers.current_slice()].sum(axis=1)
    return float(-np.mean(np.log(np.maximum(mass_cur, LOG_FLOOR))))


def reduct_loss(l_old: float, l_sep: float, lambda_old: float) -> float:
    return lambda_old * l_old + l_sep
