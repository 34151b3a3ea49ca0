"""Attention Affine Network.

A token-feature net summarises a layer's patch tokens, the summary is added
to that layer's class token, and a single linear map ``phi`` (d -> 6d) turns
the result into per-sample scale/shift vectors for Q, K and V. The same two
nets serve every layer; only their inputs differ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class AANParams:
    feat_w: Tensor  # (d, d)
    feat_b: Tensor  # (d,)
    phi_w: Tensor  # (d, 6d)
    phi_b: Tensor  # (6d,)

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "AANParams":
        """Random feature net, identity-affine ``phi`` (zero weight, bias [1,0,1,0,1,0])."""
        one, zero = np.ones(dim), np.zeros(dim)
        return cls(
            feat_w=T.parameter(rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, dim)), "aan.feat_w"),
            feat_b=T.parameter(np.zeros(dim), "aan.feat_b"),
            phi_w=T.parameter(np.zeros((dim, 6 * dim)), "aan.phi_w"),
            phi_b=T.parameter(np.concatenate([one, zero, one, zero, one, zero]), "aan.phi_b"),
        )

    @property
    def dim(self) -> int:
        return self.feat_w.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.feat_w, self.feat_b, self.phi_w, self.phi_b]


@dataclass
class AffineSet:
    """Scale and shift vectors for Q, K, V; each shaped (..., d)."""

    gamma_q: Tensor
    beta_q: Tensor
    gamma_k: Tensor
    beta_k: Tensor
    gamma_v: Tensor
    beta_v: Tensor

    def as_tuple(self) -> tuple[Tensor, ...]:
        return (self.gamma_q, self.beta_q, self.gamma_k, self.beta_k, self.gamma_v, self.beta_v)


def pool_and_combine(E, cls, params: AANParams) -> Tensor:
    """``cls + feat_net(mean_p E)``; E is (..., P, d), cls is (..., d)."""
    E, cls = T.as_tensor(E), T.as_tensor(cls)
    if E.ndim < 2 or E.shape[-2] == 0:
        raise ShapeError("pool_and_combine: need at least one patch token")
    if E.shape[-1] != params.dim or cls.shape != E.shape[:-2] + (params.dim,):
        raise ShapeError(f"pool_and_combine: E {E.shape} / cls {cls.shape} vs d={params.dim}")
    pooled = T.mean(E, axis=-2)
    if pooled.ndim == 1:
        net = T.reshape(T.reshape(pooled, (1, params.dim)) @ params.feat_w, (params.dim,))
    else:
        net = pooled @ params.feat_w
    return cls + (net + params.feat_b)


def affine_params(feature, params: AANParams) -> AffineSet:
    feature = T.as_tensor(feature)
    d = params.dim
    if feature.shape[-1] != d:
        raise ShapeError(f"affine_params: feature dim {feature.shape[-1]} != {d}")
    if feature.ndim == 1:
        feature = T.reshape(feature, (1, d))
        out = feature @ params.phi_w + params.phi_b
        parts = [T.reshape(out[:, i * d : (i + 1) * d], (d,)) for i in range(6)]
    else:
        out = feature @ params.phi_w + params.phi_b
        parts = [out[..., i * d : (i + 1) * d] for i in range(6)]
    return AffineSet(*parts)


def apply_affine(Q, K, V, a: AffineSet) -> tuple[Tensor, Tensor, Tensor]:
    """Q' = gamma_Q * Q + beta_Q (likewise K, V) along the feature axis.

    Q/K/V are token-major (..., S, d) before the head split, so a d-vector
    broadcast here equals splitting it into (H, d/H) per-head segments.
    Affine vectors shaped (..., d) are broadcast over the token axis.
    """
    Q, K, V = T.as_tensor(Q), T.as_tensor(K), T.as_tensor(V)
    d = Q.shape[-1]
    out = []
    for x, g, b in ((Q, a.gamma_q, a.beta_q), (K, a.gamma_k, a.beta_k), (V, a.gamma_v, a.beta_v)):
        if g.shape[-1] != d or b.shape[-1] != d:
            raise ShapeError(f"apply_affine: affine dim {g.shape[-1]} vs QKV dim {d}")
        if g.ndim == x.ndim - 1 and g.ndim > 1:
            g = T.reshape(g, g.shape[:-1] + (1, d))
            b = T.reshape(b, b.shape[:-1] + (1, d))
        out.append(x * g + b)
    return out[0], out[1], out[2]


def sim_loss(X, stats: dict | None = None) -> Tensor:
    """Negative summed pairwise cosine similarity of patch tokens over P.

    ``X`` is (P, d) for one sample or (N, P, d) for a batch; batch values are
    averaged. Uses ``sum_{i!=j} u_i.u_j = |sum_i u_i|^2 - sum_i |u_i|^2`` on
    unit vectors u. Zero-norm tokens contribute cosine 0 to each of their
    pairs and are counted in ``stats["zero_norm_tokens"]``.
    """
    X = T.as_tensor(X)
    if X.ndim == 2:
        X = T.reshape(X, (1,) + X.shape)
    P = X.shape[-2]
    if P < 2:
        raise ShapeError("sim_loss needs at least two patch tokens")
    norms = np.sqrt((X.data * X.data).sum(axis=-1))
    zero = norms <= T.ZERO_NORM
    if stats is not None:
        stats["zero_norm_tokens"] = stats.get("zero_norm_tokens", 0) + int(zero.sum())
    U = T.normalize(X, axis=-1)
    s = T.sum(U, axis=-2)
    total = T.sum(s * s, axis=-1)
    nonzero = (~zero).sum(axis=-1).astype(float)
    per_sample = (total - T.constant(nonzero)) * (-1.0 / P)
    return T.mean(per_sample)


def sim_loss_bruteforce(X: np.ndarray) -> float:
    """Double-loop reference using the pairwise cosine kernel."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[None]
    vals = []
    for sample in X:
        P = sample.shape[0]
        acc = 0.0
        for i in range(P):
            for j in range(P):
                if i != j:
                    acc += T.cosine_similarity(sample[i], sample[j]).item()
        vals.append(-acc / P)
    return float(np.mean(vals))
