"""Synthetic open-world test streams.

Every class (ID and held-out OOD alike) owns a Gaussian prototype token grid
of the same Frobenius radius. A sample is its class prototype plus isotropic
noise. Test-time corruption is a fixed seeded rotation of token space,
``expm(shift_strength * A)`` for a unit-scale skew-symmetric ``A``, followed
by additive Gaussian noise of scale ``shift_strength``; it hits ID and OOD
samples alike.

The "source model" is the seeded random backbone whose classifier head is
fitted by multinomial logistic regression on clean ID samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm
from scipy.optimize import minimize
from scipy.special import log_softmax

from .backbone import BackboneConfig, ModelState, forward_collect, init_backbone


@dataclass(frozen=True)
class StreamConfig:
    id_classes: int = 8
    ood_classes: int = 2
    ood_ratio: float = 0.25
    shift_strength: float = 0.5
    batches: int = 100
    batch_size: int = 32
    seed: int = 2024
    sample_noise: float = 1.0
    source_per_class: int = 64

    def __post_init__(self):
        if not 0.0 <= self.ood_ratio < 1.0:
            raise ValueError(f"ood_ratio {self.ood_ratio} outside [0, 1)")
        if self.ood_ratio > 0 and self.ood_classes < 1:
            raise ValueError("ood_ratio > 0 needs at least one OOD class")
        if self.batches < 1 or self.batch_size < 1 or self.id_classes < 1:
            raise ValueError("batches, batch_size and id_classes must be >= 1")
        if self.shift_strength < 0 or self.sample_noise < 0:
            raise ValueError("noise scales must be >= 0")

    @property
    def ood_per_batch(self) -> int:
        return int(math.floor(self.ood_ratio * self.batch_size))


@dataclass
class Batch:
    tokens: np.ndarray  # (N, P, d)
    labels: np.ndarray  # (N,) ints; OOD samples carry id_classes + k
    is_ood: np.ndarray  # (N,) bools, evaluator-only

    def __len__(self) -> int:
        return len(self.labels)


def _rngs(seed: int) -> dict[str, np.random.Generator]:
    names = ("prototypes", "shift", "source", "stream")
    kids = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(k) for n, k in zip(names, kids)}


def prototypes(cfg: StreamConfig, bcfg: BackboneConfig) -> np.ndarray:
    """(id_classes + ood_classes, P, d) prototypes, all with Frobenius norm sqrt(P d)."""
    rng = _rngs(cfg.seed)["prototypes"]
    k = cfg.id_classes + cfg.ood_classes
    protos = rng.normal(size=(k, bcfg.patches, bcfg.dim))
    norms = np.sqrt((protos**2).sum(axis=(1, 2), keepdims=True))
    return protos / norms * math.sqrt(bcfg.patches * bcfg.dim)


def shift_rotation(cfg: StreamConfig, dim: int) -> np.ndarray:
    rng = _rngs(cfg.seed)["shift"]
    B = rng.normal(size=(dim, dim))
    A = (B - B.T) / math.sqrt(2.0 * dim)
    return expm(cfg.shift_strength * A)


def _draw(protos: np.ndarray, labels: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    base = protos[labels]
    return base + noise * rng.normal(size=base.shape)


def corrupt(tokens: np.ndarray, R: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    return tokens @ R.T + strength * rng.normal(size=tokens.shape)


def gen_stream(cfg: StreamConfig, bcfg: BackboneConfig) -> list[Batch]:
    """Deterministic list of ``cfg.batches`` corrupted ID+OOD batches."""
    if cfg.id_classes != bcfg.classes:
        raise ValueError(f"id_classes {cfg.id_classes} != backbone classes {bcfg.classes}")
    protos = prototypes(cfg, bcfg)
    R = shift_rotation(cfg, bcfg.dim)
    rng = _rngs(cfg.seed)["stream"]
    n_ood = cfg.ood_per_batch
    n_id = cfg.batch_size - n_ood
    out = []
    for _ in range(cfg.batches):
        labels = np.concatenate(
            [
                rng.integers(0, cfg.id_classes, n_id),
                cfg.id_classes + rng.integers(0, max(cfg.ood_classes, 1), n_ood),
            ]
        )
        is_ood = np.arange(cfg.batch_size) >= n_id
        order = rng.permutation(cfg.batch_size)
        labels, is_ood = labels[order], is_ood[order]
        tokens = corrupt(_draw(protos, labels, cfg.sample_noise, rng), R, cfg.shift_strength, rng)
        out.append(Batch(tokens, labels.astype(np.int64), is_ood))
    return out


def source_samples(cfg: StreamConfig, bcfg: BackboneConfig) -> tuple[np.ndarray, np.ndarray]:
    """Clean (uncorrupted) labelled ID samples for fitting the head."""
    rng = _rngs(cfg.seed)["source"]
    labels = np.repeat(np.arange(cfg.id_classes), cfg.source_per_class)
    return _draw(prototypes(cfg, bcfg), labels, cfg.sample_noise, rng), labels


def fit_head(state: ModelState, tokens: np.ndarray, labels: np.ndarray, l2: float = 1e-2) -> None:
    """Fit the classifier in place by L2-regularised multinomial logistic regression."""
    trace, _ = forward_collect(state, tokens)
    X = trace.cls[-1].data
    n, d = X.shape
    C = state.cfg.classes
    Y = np.eye(C)[labels]

    def objective(theta):
        W = theta[: d * C].reshape(d, C)
        b = theta[d * C :]
        lp = log_softmax(X @ W + b, axis=1)
        loss = -(Y * lp).sum() / n + 0.5 * l2 * (W * W).sum()
        G = (np.exp(lp) - Y) / n
        return loss, np.concatenate([(X.T @ G + l2 * W).ravel(), G.sum(axis=0)])

    theta0 = np.concatenate([state.classifier.w.data.ravel() * 0.0, np.zeros(C)])
    res = minimize(objective, theta0, jac=True, method="L-BFGS-B", options={"maxiter": 500})
    state.classifier.w.data = res.x[: d * C].reshape(d, C)
    state.classifier.b.data = res.x[d * C :].copy()


def build_source_model(bcfg: BackboneConfig, scfg: StreamConfig) -> ModelState:
    state = init_backbone(bcfg)
    fit_head(state, *source_samples(scfg, bcfg))
    return state
