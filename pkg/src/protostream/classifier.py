"""Class-discovery head: projector, cosine class centers, granularity alignment.

The head maps a unit-norm feature through a two-layer projector, normalizes,
and scores it against unit-norm class centers at temperature tau. Discovery
is driven by aligning the class posterior with the (constant) fine-grained
prototype targets through their joint distribution: minimizing

    L_align = H(Y|W) - lambda_ga * H(Y)

sharpens the prototype-to-class map while balancing the class marginal
(lambda_ga = 1 recovers the negative mutual information exactly).

All gradients here are analytic; `head_grads` assembles the full head
objective (alignment + replay cross-entropy + separation) and its gradients
for the projector parameters and center rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import erf

from .errors import ValidationError

LOG_FLOOR = 1e-12
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given gradient w.r.t. the row-softmax output."""
    inner = np.sum(y * dy, axis=1, keepdims=True)
    return y * (dy - inner)


@dataclass
class Projector:
    """Two affine layers with a GELU between, or the identity when disabled."""

    w1: Optional[np.ndarray] = None
    b1: Optional[np.ndarray] = None
    w2: Optional[np.ndarray] = None
    b2: Optional[np.ndarray] = None

    @property
    def identity(self) -> bool:
        return self.w1 is None

    @property
    def out_dim(self) -> int:
        if self.identity:
            raise ValidationError("identity projector has no fixed output dimension")
        return self.w2.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        if self.identity:
            return {}
        return {"proj.w1": self.w1, "proj.b1": self.b1, "proj.w2": self.w2, "proj.b2": self.b2}


def init_projector(d: int, hidden: int, out: int, seed) -> Projector:
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / (fan_in + fan_out))

    return Projector(
        w1=glorot(d, hidden),
        b1=np.zeros(hidden),
        w2=glorot(hidden, out),
        b2=np.zeros(out),
    )


def identity_projector() -> Projector:
    return Projector()


def projector_forward(proj: Projector, z: np.ndarray) -> tuple[np.ndarray, dict]:
    """Normalized embedding plus the cache needed for the backward pass."""
    if proj.identity:
        return z, {"identity": True}
    a1 = z @ proj.w1 + proj.b1
    h1 = gelu(a1)
    out = h1 @ proj.w2 + proj.b2
    norms = np.maximum(np.linalg.norm(out, axis=1, keepdims=True), LOG_FLOOR)
    e = out / norms
    return e, {"identity": False, "z": z, "a1": a1, "h1": h1, "e": e, "norms": norms}


def projector_backward(proj: Projector, cache: dict, de: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given the gradient w.r.t. the normalized embedding."""
    if cache["identity"]:
        return {}
    e, norms = cache["e"], cache["norms"]
    dout = (de - e * np.sum(de * e, axis=1, keepdims=True)) / norms
    dh1 = dout @ proj.w2.T
    da1 = dh1 * gelu_grad(cache["a1"])
    return {
        "proj.w1": cache["z"].T @ da1,
        "proj.b1": da1.sum(axis=0),
        "proj.w2": cache["h1"].T @ dout,
        "proj.b2": dout.sum(axis=0),
    }


@dataclass
class ClassCenters:
    """Unit-norm center rows for every class discovered so far.

    `counts` records how many classes each session contributed, in order;
    the current session's rows are always the trailing block.
    """

    c: np.ndarray
    counts: list[int] = field(default_factory=list)
    tau: float = 0.1

    @property
    def total(self) -> int:
        return self.c.shape[0]

    @property
    def old_count(self) -> int:
        return self.total - (self.counts[-1] if self.counts else 0)

    def current_slice(self) -> slice:
        return slice(self.old_count, self.total)

    def project(self) -> None:
        self.c /= np.linalg.norm(self.c, axis=1, keepdims=True)


def append_centers(centers: Optional[ClassCenters], k: int, m: int, tau: float, seed) -> ClassCenters:
    """Grow the center table by `k` random unit rows for a new session."""
    rng = np.random.default_rng(seed)
    fresh = rng.standard_normal((k, m))
    fresh /= np.linalg.norm(fresh, axis=1, keepdims=True)
    if centers is None:
        return ClassCenters(c=fresh, counts=[k], tau=tau)
    return ClassCenters(c=np.vstack([centers.c, fresh]), counts=centers.counts + [k], tau=tau)


def center_logits(e: np.ndarray, centers: ClassCenters, subset: Optional[slice] = None) -> np.ndarray:
    c = centers.c if subset is None else centers.c[subset]
    if c.shape[0] == 0:
        raise ValidationError("center subset is empty")
    return (e @ c.T) / centers.tau


def class_posterior(
    z: np.ndarray,
    projector: Projector,
    centers: ClassCenters,
    subset: Optional[slice] = None,
) -> np.ndarray:
    """Row-stochastic class posterior over the selected centers."""
    e, _ = projector_forward(projector, z)
    return softmax_rows(center_logits(e, centers, subset))


@dataclass
class JointTable:
    """Joint distribution over (prototype, class) with its marginals."""

    j: np.ndarray  # (r, k), grand sum 1
    p_w: np.ndarray
    p_y: np.ndarray


def joint_table(w: np.ndarray, y: np.ndarray) -> JointTable:
    """J = (1/n) W^T Y for row-stochastic W (n x r) and Y (n x k)."""
    if w.shape[0] != y.shape[0]:
        raise ValidationError(f"W has {w.shape[0]} rows but Y has {y.shape[0]}")
    j = (w.T @ y) / w.shape[0]
    return JointTable(j=j, p_w=j.sum(axis=1), p_y=j.sum(axis=0))


def align_loss(joint: JointTable, lambda_ga: float) -> float:
    """H(Y|W) - lambda_ga * H(Y), with 0 log 0 := 0 and floored logarithms."""
    j, p_w, p_y = joint.j, joint.p_w, joint.p_y
    log_cond = np.log(np.maximum(j, LOG_FLOOR)) - np.log(np.maximum(p_w, LOG_FLOOR))[:, None]
    h_cond = -np.sum(j * log_cond)
    h_y = -np.sum(p_y * np.log(np.maximum(p_y, LOG_FLOOR)))
    return float(h_cond - lambda_ga * h_y)


def align_loss_grad_y(joint: JointTable, w: np.ndarray, lambda_ga: float) -> np.ndarray:
    """Gradient of the alignment loss with respect to Y (W held constant)."""
    j, p_w, p_y = joint.j, joint.p_w, joint.p_y
    log_cond = np.log(np.maximum(j, LOG_FLOOR)) - np.log(np.maximum(p_w, LOG_FLOOR))[:, None]
    djac = -log_cond + lambda_ga * (np.log(np.maximum(p_y, LOG_FLOOR)) + 1.0)[None, :]
    return (w @ djac) / w.shape[0]


def mutual_information(joint: JointTable) -> float:
    j, p_w, p_y = joint.j, joint.p_w, joint.p_y
    outer = np.maximum(p_w[:, None] * p_y[None, :], LOG_FLOOR)
    ratio = np.log(np.maximum(j, LOG_FLOOR)) - np.log(outer)
    return float(np.sum(j * ratio))


def class_given_proto(joint: JointTable) -> tuple[np.ndarray, np.ndarray]:
    """Rows p(y|w); prototypes with vanishing mass come back uniform and flagged."""
    j, p_w = joint.j, joint.p_w
    empty = p_w < LOG_FLOOR
    p_yw = np.where(empty[:, None], 1.0 / j.shape[1], j / np.maximum(p_w, LOG_FLOOR)[:, None])
    return p_yw, empty


@dataclass
class HeadResult:
    l_align: float
    l_old: float
    l_sep: float
    grads: dict[str, np.ndarray]  # projector params plus "centers"


def head_grads(
    z: np.ndarray,
    w_target: np.ndarray,
    projector: Projector,
    centers: ClassCenters,
    *,
    lambda_ga: float,
    lambda_old: float = 0.0,
    replay: Optional[tuple[np.ndarray, np.ndarray]] = None,
    align_weight: float = 1.0,
    sep_weight: float = 1.0,
) -> HeadResult:
    """Head losses and the gradient of align_weight*L_align + lambda_old*L_old
    + sep_weight*L_sep w.r.t. projector parameters and center rows.

    Replay and separation terms engage only when old centers exist; the
    returned scalars are the unweighted per-term values.
    """
    cur = centers.current_slice()
    dc = np.zeros_like(centers.c)
    grads: dict[str, np.ndarray] = {}

    e, cache = projector_forward(projector, z)
    de = np.zeros_like(e)

    y = softmax_rows(center_logits(e, centers, cur))
    joint = joint_table(w_target, y)
    l_align = align_loss(joint, lambda_ga)
    if align_weight != 0.0:
        dlogits = softmax_rows_backward(y, align_weight * align_loss_grad_y(joint, w_target, lambda_ga))
        de += dlogits @ centers.c[cur] / centers.tau
        dc[cur] += dlogits.T @ e / centers.tau

    l_sep = 0.0
    n_old = centers.old_count
    if n_old > 0 and sep_weight != 0.0:
        p_all = softmax_rows(center_logits(e, centers))
        mass_cur = p_all[:, cur].sum(axis=1)
        l_sep = float(-np.mean(np.log(np.maximum(mass_cur, LOG_FLOOR))))
        b = z.shape[0]
        dlogits = p_all.copy()
        dlogits[:, cur] -= p_all[:, cur] / mass_cur[:, None]
        dlogits *= sep_weight / b
        de += dlogits @ centers.c / centers.tau
        dc += dlogits.T @ e / centers.tau

    _accumulate(grads, projector_backward(projector, cache, de))

    l_old = 0.0
    if replay is not None and n_old > 0:
        z_old, y_old = replay
        e_old, cache_old = projector_forward(projector, z_old)
        p_old = softmax_rows(center_logits(e_old, centers))
        b = z_old.shape[0]
        picked = p_old[np.arange(b), y_old]
        l_old = float(-np.mean(np.log(np.maximum(picked, LOG_FLOOR))))
        if lambda_old != 0.0:
            dlogits = p_old.copy()
            dlogits[np.arange(b), y_old] -= 1.0
            dlogits *= lambda_old / b
            de_old = dlogits @ centers.c / centers.tau
            dc += dlogits.T @ e_old / centers.tau
            _accumulate(grads, projector_backward(projector, cache_old, de_old))

    grads["centers"] = dc
    return HeadResult(l_align=l_align, l_old=l_old, l_sep=l_sep, grads=grads)


def _accumulate(into: dict[str, np.ndarray], new: dict[str, np.ndarray]) -> None:
    for key, val in new.items():
        if key in into:
            into[key] += val
        else:
            into[key] = val
