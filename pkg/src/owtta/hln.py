"""Hierarchical Ladder Network: per-layer OOD tokens, ladder aggregation,
OOD-branch probabilities, the entropy mask and OOD loss, fusion and score."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class OODExtractor:
    """Psi: one affine layer d -> d shared by every transformer layer."""

    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, dim: int) -> "OODExtractor":
        return cls(T.parameter(np.eye(dim), "psi.w"), T.parameter(np.zeros(dim), "psi.b"))

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b]


@dataclass
class LadderAggregator:
    """One affine layer (L*d) -> d over the layer-ordered concatenation."""

    w: Tensor
    b: Tensor
    layers: int

    @classmethod
    def init(cls, layers: int, dim: int) -> "LadderAggregator":
        # starts as a pass-through of the last layer's OOD token
        w = np.zeros((layers * dim, dim))
        w[(layers - 1) * dim :] = np.eye(dim)
        return cls(T.parameter(w, "ladder.w"), T.parameter(np.zeros(dim), "ladder.b"), layers)

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b]


@dataclass
class FusionConfig:
    alpha: float = 0.7
    threshold: float | None = None  # None -> 0.5 * ln C

    PRESETS = (0.3, 0.7)

    def resolved_threshold(self, classes: int) -> float:
        thr = 0.5 * math.log(classes) if self.threshold is None else self.threshold
        if not 0.0 <= thr <= math.log(classes) + 1e-12:
            raise ValueError(f"entropy threshold {thr} outside [0, ln {classes}]")
        return thr

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"fusion alpha {self.alpha} outside [0, 1]")


def extract_ood_token(cls_l, psi: OODExtractor) -> Tensor:
    cls_l = T.as_tensor(cls_l)
    if cls_l.shape[-1] != psi.w.shape[0]:
        raise ShapeError(f"extract_ood_token: dim {cls_l.shape[-1]} != {psi.w.shape[0]}")
    if cls_l.ndim > 1:
        return cls_l @ psi.w + psi.b
    out = _vec(cls_l) @ psi.w + psi.b
    return T.reshape(out, (out.shape[-1],))


def _vec(x: Tensor) -> Tensor:
    return T.reshape(x, (1, x.shape[0]))


def aggregate(ood_tokens: Sequence, ladder: LadderAggregator) -> Tensor:
    """HLN(concat(o_1, ..., o_L)) in layer order."""
    if len(ood_tokens) != ladder.layers:
        raise ShapeError(f"aggregate: expected {ladder.layers} tokens, got {len(ood_tokens)}")
    toks = [T.as_tensor(o) for o in ood_tokens]
    vec = toks[0].ndim == 1
    if vec:
        toks = [_vec(o) for o in toks]
    out = T.concat(toks, axis=-1) @ ladder.w + ladder.b
    return T.reshape(out, (out.shape[-1],)) if vec else out


def ood_probs(o_hln, head) -> Tensor:
    """softmax of the shared classifier applied to the aggregated OOD token."""
    return T.softmax(head(T.as_tensor(o_hln)), axis=-1)


def ood_mask(entropies, thr: float) -> np.ndarray:
    """m_i = 1 iff H_i > thr (strict)."""
    return np.asarray(entropies, dtype=float) > thr


def ood_loss(H_ood, mask) -> Tensor:
    """Mean negative OOD-branch entropy over masked samples; 0 (no gradient) if none."""
    H_ood = T.as_tensor(H_ood)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != H_ood.shape:
        raise ShapeError(f"ood_loss: mask {mask.shape} vs entropies {H_ood.shape}")
    k = int(mask.sum())
    if k == 0:
        return T.constant(0.0)
    return T.sum(H_ood * T.constant(mask.astype(float))) * (-1.0 / k)


def fuse(p_base, p_ood, alpha: float) -> Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"fusion alpha {alpha} outside [0, 1]")
    p_base, p_ood = T.as_tensor(p_base), T.as_tensor(p_ood)
    if alpha == 1.0:
        return p_base
    if alpha == 0.0:
        return p_ood
    return p_base * alpha + p_ood * (1.0 - alpha)


def ood_score(p_final) -> Tensor:
    """Entropy of the fused distribution; larger means more likely OOD."""
    return T.entropy(p_final, axis=-1)
