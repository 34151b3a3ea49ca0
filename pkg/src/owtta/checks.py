"""Self-checks shared by the test suite and the command line.

``gradient_suite`` compares tape gradients with central differences for
each loss term on a small two-layer model. ``oracle_suite`` compares the
fast AUROC and similarity-loss paths with their brute-force versions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .aan import sim_loss, sim_loss_bruteforce
from .adapt import AdaptConfig, evaluate, first_loss, second_loss
from .backbone import BackboneConfig, ModelState, init_backbone
from .gradcheck import multi_grad_check
from .metrics import auroc, auroc_bruteforce
from .tensor import Tensor

TOY = BackboneConfig(layers=2, dim=16, heads=2, patches=8, classes=4, seed=7)
LOSS_TERMS = ("entropy", "ood", "sim", "first", "second")


def toy_model(cfg: BackboneConfig = TOY, jitter: float = 0.05, seed: int = 0) -> ModelState:
    """Fresh model with every trainable tensor nudged off its initial value.

    Identity-initialised adapters sit at special points (zero weights, exact
    pass-through); the jitter makes every gradient path generic.
    """
    state = init_backbone(cfg)
    rng = np.random.default_rng(seed)
    for params in state.trainable_groups().values():
        for p in params:
            p.data = p.data + jitter * rng.normal(size=p.shape)
    rng_c = np.random.default_rng(seed + 1)
    state.classifier.w.data = rng_c.normal(0.0, 1.0, state.classifier.w.shape)
    return state


def toy_batch(cfg: BackboneConfig = TOY, n: int = 3, seed: int = 1) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=(n, cfg.patches, cfg.dim))


def _terms(state: ModelState, tokens: np.ndarray, cfg: AdaptConfig):
    """Loss closures with the entropy mask and self-weights pinned at the current point."""
    ref = evaluate(state, tokens, cfg)
    mask = ref.mask.copy()
    if not mask.any():
        # force a non-empty mask so the OOD term has a gradient to check
        mask[int(np.argmax(ref.H_base.data))] = True
    weights = ref.entropy_weights.copy()

    def obj():
        return evaluate(state, tokens, cfg, mask=mask, weights=weights)

    def all_terms():
        o = obj()
        return {
            "entropy": o.L_entropy,
            "ood": o.L_ood,
            "sim": o.L_sim,
            "first": first_loss(o, cfg),
            "second": second_loss(o, cfg),
        }

    return all_terms


@dataclass
class GradResult:
    term: str
    max_rel_err: float
    n_params: int


def gradient_suite(
    h: float = 1e-6,
    cfg: AdaptConfig | None = None,
    model: BackboneConfig = TOY,
    terms=LOSS_TERMS,
) -> list[GradResult]:
    """Finite-difference check of every loss term over every trainable group."""
    cfg = cfg or replace(AdaptConfig(), fusion=replace(AdaptConfig().fusion, threshold=0.0))
    state = toy_model(model)
    tokens = toy_batch(model)
    params: list[Tensor] = [p for ps in state.trainable_groups().values() for p in ps]
    all_terms = _terms(state, tokens, cfg)
    errs = multi_grad_check(lambda: {t: v for t, v in all_terms().items() if t in terms}, params, h=h)
    n = sum(p.size for p in params)
    return [GradResult(t, errs[t], n) for t in terms]


@dataclass
class OracleResult:
    name: str
    instances: int
    max_abs_diff: float


def auroc_oracle(instances: int = 200, max_size: int = 64, seed: int = 0) -> OracleResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        m = int(rng.integers(2, max_size + 1))
        # a small value alphabet guarantees ties
        scores = rng.integers(0, max(2, m // 3), size=m) / 4.0
        flags = rng.random(m) < 0.4
        if flags.all() or not flags.any():
            flags[0] = not flags[0]
        worst = max(worst, abs(auroc(scores, flags) - auroc_bruteforce(scores, flags)))
    return OracleResult("auroc", instances, worst)


def sim_oracle(instances: int = 50, seed: int = 0) -> OracleResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        P, d = int(rng.integers(2, 9)), int(rng.integers(1, 9))
        X = rng.normal(size=(P, d))
        if rng.random() < 0.2:
            X[0] = 0.0  # zero-norm token
        worst = max(worst, abs(sim_loss(X).item() - sim_loss_bruteforce(X)))
    return OracleResult("sim_loss", instances, worst)


def oracle_suite(seed: int = 0) -> list[OracleResult]:
    return [auroc_oracle(seed=seed), sim_oracle(seed=seed)]
