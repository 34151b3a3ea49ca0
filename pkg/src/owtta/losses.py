"""Entropy objectives and the composite losses used by the adaptation step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

SIMPLEX_TOL = 1e-6


@dataclass
class LossWeights:
    beta1: float = 1.0  # single-pass OOD weight
    beta2: float = 1.0  # single-pass similarity weight
    lambda1: float = 0.01
    lambda2: float = 0.001

    def __post_init__(self):
        for name in ("beta1", "beta2", "lambda1", "lambda2"):
            if getattr(self, name) < 0:
                raise ValueError(f"LossWeights.{name} must be >= 0")


def entropy(p) -> Tensor:
    """Row entropy of probability vectors (last axis), with 0 log 0 = 0."""
    p = T.as_tensor(p)
    if np.any(np.abs(p.data.sum(axis=-1) - 1.0) > SIMPLEX_TOL) or np.any(p.data < 0):
        raise ValueError("entropy: input rows are not on the probability simplex")
    return T.entropy(p, axis=-1)


def entropy_weights(H) -> np.ndarray:
    """w_i = N * exp(-H_i) / sum_j exp(-H_j), computed stably."""
    h = np.asarray(H.data if isinstance(H, Tensor) else H, dtype=float).reshape(-1)
    z = np.exp(-(h - h.min()))
    return h.size * z / z.sum()


def self_weighted_entropy(H, differentiate_weights: bool = False, weights: np.ndarray | None = None) -> Tensor:
    """sum_i w_i H_i with confidence weights ``entropy_weights(H)``.

    By default the weights are constants for differentiation; pass
    ``differentiate_weights=True`` to back-propagate through them too.
    ``weights`` overrides the computed constants (used to pin them in
    finite-difference checks).
    """
    H = T.as_tensor(H)
    if H.ndim == 0:
        H = T.reshape(H, (1,))
    if differentiate_weights:
        e = T.exp(T.scale(H, -1.0))
        # N * sum(e*H) / sum(e); division written as exp(-log(.))
        return T.sum(e * H) * T.exp(T.scale(T.log(T.sum(e)), -1.0)) * float(H.shape[0])
    w = entropy_weights(H) if weights is None else np.asarray(weights, dtype=float)
    return T.sum(H * T.constant(w))


def total_loss(H, L_ood, L_sim, w: LossWeights, **kw) -> Tensor:
    return self_weighted_entropy(H, **kw) + T.as_tensor(L_ood) * w.beta1 + T.as_tensor(L_sim) * w.beta2


def sam_loss_first(H, L_ood, L_sim, w: LossWeights, **kw) -> Tensor:
    """First (ascent) objective: entropy + lambda1 * OOD + similarity (unweighted)."""
    return self_weighted_entropy(H, **kw) + T.as_tensor(L_ood) * w.lambda1 + T.as_tensor(L_sim)


def sam_loss_second(H, L_ood, w: LossWeights, **kw) -> Tensor:
    """Second (descent) objective, evaluated at the perturbed parameters."""
    return self_weighted_entropy(H, **kw) + T.as_tensor(L_ood) * w.lambda2
