"""Hungarian-matched clustering accuracy, per-task accuracy and forgetting.

Inference is task-free: a test feature is scored against every discovered
center, and the resulting cluster ids are matched to ground-truth labels by
an optimal assignment over the contingency table. The forgetting score is
the drop in first-session-class accuracy between the first and final
sessions, with the final mapping computed over all classes (the restricted
per-task remapping is also reported).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .classifier import ClassCenters, Projector, center_logits, projector_forward
from .data import StreamManifest, read_features
from .errors import ValidationError


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect matching on a square cost matrix.

    Augmenting-path algorithm with dual potentials, O(k^3); returns `perm`
    with row i matched to column perm[i].
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValidationError(f"cost matrix must be square, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValidationError("cost matrix contains non-finite entries")

    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # match[j] = row currently assigned column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            cur = cost[i0 - 1, :] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1

    perm = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        if match[j] > 0:
            perm[match[j] - 1] = j - 1
    return perm


def clustering_accuracy(
    preds: np.ndarray, labels: np.ndarray, k_total: int
) -> tuple[float, np.ndarray, np.ndarray]:
    """Best-permutation accuracy: (accuracy, cluster->class mapping, contingency)."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValidationError(f"prediction/label shapes differ: {preds.shape} vs {labels.shape}")
    if np.any(preds < 0) or np.any(preds >= k_total):
        raise ValidationError(f"predictions outside [0, {k_total})")
    if np.any(labels < 0) or np.any(labels >= k_total):
        raise ValidationError(f"labels outside [0, {k_total})")
    confusion = np.zeros((k_total, k_total), dtype=np.int64)
    np.add.at(confusion, (preds, labels), 1)
    mapping = hungarian(-confusion.astype(np.float64))
    matched = confusion[np.arange(k_total), mapping].sum()
    return float(matched / preds.size), mapping, confusion


@dataclass
class SessionReport:
    """Metrics for one continual session (1-based index)."""

    session: int
    acc_overall: float
    per_task_acc: list[float]
    per_task_acc_restricted: list[float]
    mapping: np.ndarray
    confusion: np.ndarray
    k_total: int
    forgetting: Optional[float] = None
    forgetting_restricted: Optional[float] = None
    losses: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        rec = {
            "session": self.session,
            "acc_overall": self.acc_overall,
            "forgetting": self.forgetting,
            "forgetting_restricted": self.forgetting_restricted,
            "k_total": self.k_total,
            "mapping": self.mapping.tolist(),
        }
        for i, acc in enumerate(self.per_task_acc):
            rec[f"acc_task_{i + 1}"] = acc
        for i, acc in enumerate(self.per_task_acc_restricted):
            rec[f"acc_task_{i + 1}_restricted"] = acc
        return rec


def predict_clusters(z: np.ndarray, projector: Projector, centers: ClassCenters) -> np.ndarray:
    """Task-free inference: argmax over every discovered center."""
    e, _ = projector_forward(projector, z)
    return np.argmax(center_logits(e, centers), axis=1)


def evaluate_session(
    projector: Projector,
    centers: ClassCenters,
    manifest: StreamManifest,
    session: int,
) -> SessionReport:
    """Evaluate on the union of test splits of tasks 1..session (1-based)."""
    if session < 1 or session > len(manifest.tasks):
        raise ValidationError(f"session {session} outside manifest with {len(manifest.tasks)} tasks")
    feats, labels, task_of = [], [], []
    for t in range(session):
        z, y = read_features(manifest.test_path(t))
        if y is None:
            raise ValidationError(f"{manifest.test_path(t)} has no labels; cannot evaluate")
        feats.append(z)
        labels.append(y)
        task_of.append(np.full(z.shape[0], t))
    z_all = np.vstack(feats).astype(np.float64)
    y_all = np.concatenate(labels)
    task_of = np.concatenate(task_of)

    preds = predict_clusters(z_all, projector, centers)
    acc, mapping, confusion = clustering_accuracy(preds, y_all, centers.total)

    per_task, per_task_restricted = [], []
    matched = mapping[preds] == y_all
    for t in range(session):
        sel = task_of == t
        per_task.append(float(np.mean(matched[sel])))
        acc_r, _, _ = clustering_accuracy(preds[sel], y_all[sel], centers.total)
        per_task_restricted.append(acc_r)

    return SessionReport(
        session=session,
        acc_overall=acc,
        per_task_acc=per_task,
        per_task_acc_restricted=per_task_restricted,
        mapping=mapping,
        confusion=confusion,
        k_total=centers.total,
    )


def forgetting_score(reports: list[SessionReport], *, restricted: bool = False) -> float:
    """Accuracy drop on first-session classes between sessions 1 and last.

    Negative values (backward transfer) are passed through unclamped.
    """
    if len(reports) < 2:
        raise ValidationError("forgetting is defined from the second session onward")
    if restricted:
        return reports[0].per_task_acc_restricted[0] - reports[-1].per_task_acc_restricted[0]
    return reports[0].per_task_acc[0] - reports[-1].per_task_acc[0]
