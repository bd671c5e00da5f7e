"""Fine-grained Gaussian prototypes: posterior, training loss and gradients.

A prototype w is an isotropic Gaussian N(mu_w, sigma_w^2 I) with unit-norm
mean. For unit-norm features the score

    s(w, i) = 2 (z_i . mu_w - 1) / sigma_w^2  =  -||z_i - mu_w||^2 / sigma_w^2

and the posterior over prototypes is the column softmax of s (prototype
weights are held uniform; balance is enforced upstream by the transport
step). The training loss is the cross-entropy between constant per-sample
targets and that posterior; gradients for means and log-scales are analytic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .errors import ValidationError

SIGMA_MIN = 1e-3
SIGMA_MAX = 10.0
SIGMA_INIT = 0.1


@dataclass
class PrototypeSet:
    """Trainable prototype means (r x d, unit rows) and per-prototype log-scales."""

    mu: np.ndarray
    log_sigma: np.ndarray

    @property
    def r(self) -> int:
        return self.mu.shape[0]

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    def project(self) -> None:
        """Re-project after an optimizer step: unit-norm means, clamped scales."""
        self.mu /= np.linalg.norm(self.mu, axis=1, keepdims=True)
        np.clip(self.log_sigma, np.log(SIGMA_MIN), np.log(SIGMA_MAX), out=self.log_sigma)


def init_prototypes(r: int, d: int, seed, init_batch: Optional[np.ndarray] = None) -> PrototypeSet:
    """Means from `r` distinct feature rows when available, else random unit vectors."""
    if r < 1 or d < 2:
        raise ValidationError(f"need r >= 1 and d >= 2, got r={r}, d={d}")
    rng = np.random.default_rng(seed)
    if init_batch is not None and init_batch.shape[0] >= r:
        rows = rng.choice(init_batch.shape[0], size=r, replace=False)
        mu = init_batch[rows].astype(np.float64)
        mu /= np.linalg.norm(mu, axis=1, keepdims=True)
    else:
        mu = rng.standard_normal((r, d))
        mu /= np.linalg.norm(mu, axis=1, keepdims=True)
    return PrototypeSet(mu=mu, log_sigma=np.full(r, np.log(SIGMA_INIT)))


def proto_scores(z: np.ndarray, protos: PrototypeSet) -> np.ndarray:
    """Score matrix s (r x n)."""
    if z.ndim != 2 or z.shape[1] != protos.mu.shape[1]:
        raise ValidationError(
            f"feature dim {z.shape} does not match prototype dim {protos.mu.shape}"
        )
    sim = protos.mu @ z.T  # (r, n)
    return 2.0 * (sim - 1.0) / (protos.sigma**2)[:, None]


def log_posterior(z: np.ndarray, protos: PrototypeSet) -> np.ndarray:
    """Column-wise log-softmax of the scores; exp of each column sums to 1."""
    s = proto_scores(z, protos)
    return s - logsumexp(s, axis=0, keepdims=True)


def proto_loss(w_target: np.ndarray, log_p: np.ndarray) -> float:
    """Cross-entropy between constant per-sample targets and the posterior."""
    r, n = log_p.shape
    if w_target.shape != (n, r):
        raise ValidationError(f"target shape {w_target.shape} does not match posterior {log_p.shape}")
    return float(-np.sum(w_target.T * log_p) / n)


def proto_grads(
    z: np.ndarray, protos: PrototypeSet, w_target: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of the prototype loss w.r.t. means and log-scales.

    Cross-entropy through the softmax gives dL/ds = (posterior - target)/n;
    chaining through s(w,i) = 2(z.mu_w - 1)/sigma_w^2 yields the mean
    gradient, and s's proportionality to exp(-2 log sigma_w) gives
    ds/dlog_sigma = -2 s.
    """
    s = proto_scores(z, protos)
    log_p = s - logsumexp(s, axis=0, keepdims=True)
    n = z.shape[0]
    g = (np.exp(log_p) - w_target.T) / n  # (r, n)
    dmu = (2.0 / protos.sigma**2)[:, None] * (g @ z)
    dlog_sigma = -2.0 * np.sum(g * s, axis=1)
    return dmu, dlog_sigma
