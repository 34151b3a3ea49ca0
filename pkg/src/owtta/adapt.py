"""Online test-time adaptation loop with a sharpness-aware two-pass update."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import tensor as T
from .aan import sim_loss
from .backbone import ModelState, forward_collect
from .hln import FusionConfig, aggregate, extract_ood_token, fuse, ood_loss, ood_mask, ood_probs
from .losses import LossWeights, entropy_weights, sam_loss_first, sam_loss_second, self_weighted_entropy, total_loss
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

GROUPS = ("norm", "aan", "psi", "ladder")
DEGENERATE_GRAD_NORM = 1e-12


@dataclass
class LearningRates:
    norm: float = 0.01
    aan: float = 0.0005
    psi: float = 0.1
    ladder: float = 0.001

    def __post_init__(self):
        for g in GROUPS:
            if getattr(self, g) < 0:
                raise ValueError(f"learning rate for {g!r} must be >= 0")

    def zero(self) -> "LearningRates":
        return LearningRates(0.0, 0.0, 0.0, 0.0)


@dataclass
class AdaptConfig:
    lr: LearningRates = field(default_factory=LearningRates)
    weights: LossWeights = field(default_factory=LossWeights)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    rho: float = 0.05
    objective: str = "sam"  # "sam": loss1/loss2 passes; "single": one pass on the total loss
    entropy_source: str = "final"  # which prediction the self-weighted entropy is taken over
    predict_from: str = "final"  # class predictions: fused distribution or base head
    differentiate_weights: bool = False
    predict_after_update: bool = False
    adapt_norm: bool = True
    use_aan: bool = True
    use_hln: bool = True
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        if self.objective not in ("sam", "single"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.entropy_source not in ("final", "base"):
            raise ValueError(f"unknown entropy_source {self.entropy_source!r}")
        if self.predict_from not in ("final", "base"):
            raise ValueError(f"unknown predict_from {self.predict_from!r}")

    def active_groups(self) -> tuple[str, ...]:
        on = {"norm": self.adapt_norm, "aan": self.use_aan, "psi": self.use_hln, "ladder": self.use_hln}
        return tuple(g for g in GROUPS if on[g])


@dataclass
class Objective:
    logits: Tensor
    p_base: Tensor
    p_final: Tensor
    H_base: Tensor
    H_final: Tensor
    mask: np.ndarray
    L_entropy: Tensor
    L_ood: Tensor
    L_sim: Tensor
    entropy_weights: np.ndarray


def evaluate(
    state: ModelState,
    tokens: np.ndarray,
    cfg: AdaptConfig,
    mask: np.ndarray | None = None,
    weights: np.ndarray | None = None,
) -> Objective:
    """One forward pass and every loss component on a batch.

    ``mask`` and ``weights`` pin the entropy mask and the self-weights
    (finite-difference checks need both held constant).
    """
    trace, logits = forward_collect(state, tokens, aan=state.aan if cfg.use_aan else None)
    p_base = T.softmax(logits, axis=-1)
    H_base = T.entropy(p_base, axis=-1)
    N = tokens.shape[0]
    if cfg.use_hln:
        o_hln = aggregate([extract_ood_token(c, state.psi) for c in trace.cls], state.ladder)
        p_ood = ood_probs(o_hln, state.classifier)
        if mask is None:
            mask = ood_mask(H_base.data, cfg.fusion.resolved_threshold(state.cfg.classes))
        L_ood = ood_loss(T.entropy(p_ood, axis=-1), mask)
        p_final = fuse(p_base, p_ood, cfg.fusion.alpha)
    else:
        mask = np.zeros(N, dtype=bool) if mask is None else mask
        L_ood = T.constant(0.0)
        p_final = p_base
    H_final = T.entropy(p_final, axis=-1)
    H_src = H_final if cfg.entropy_source == "final" else H_base
    w = entropy_weights(H_src) if weights is None else weights
    L_ent = self_weighted_entropy(H_src, cfg.differentiate_weights, weights=w)
    L_sim = sim_loss(trace.patches[-1]) if cfg.use_aan else T.constant(0.0)
    return Objective(logits, p_base, p_final, H_base, H_final, mask, L_ent, L_ood, L_sim, w)


def _entropy_term(obj: Objective, cfg: AdaptConfig) -> Tensor:
    return obj.H_final if cfg.entropy_source == "final" else obj.H_base


def _kw(obj: Objective, cfg: AdaptConfig) -> dict:
    return {"differentiate_weights": cfg.differentiate_weights, "weights": obj.entropy_weights}


def first_loss(obj: Objective, cfg: AdaptConfig) -> Tensor:
    H = _entropy_term(obj, cfg)
    if cfg.objective == "single":
        return total_loss(H, obj.L_ood, obj.L_sim, cfg.weights, **_kw(obj, cfg))
    return sam_loss_first(H, obj.L_ood, obj.L_sim, cfg.weights, **_kw(obj, cfg))


def second_loss(obj: Objective, cfg: AdaptConfig) -> Tensor:
    return sam_loss_second(_entropy_term(obj, cfg), obj.L_ood, cfg.weights, **_kw(obj, cfg))


def sam_perturbation(grads: np.ndarray, rho: float) -> tuple[np.ndarray, bool]:
    """rho * g / ||g||_2 over the flattened gradient; zero (and flagged) if ||g|| < 1e-12."""
    g = np.asarray(grads, dtype=float)
    norm = float(np.sqrt(np.dot(g.ravel(), g.ravel())))
    if norm < DEGENERATE_GRAD_NORM:
        return np.zeros_like(g), True
    return g * (rho / norm), False


@dataclass
class AdaptReport:
    p_final: np.ndarray  # (N, C)
    scores: np.ndarray  # (N,) entropy of p_final
    preds: np.ndarray  # (N,)
    mask_count: int
    losses: dict[str, float]
    update_norms: dict[str, float]
    eps_norm: float
    degenerate: bool = False
    skipped: bool = False

    def __len__(self) -> int:
        return len(self.preds)


class SGD:
    """Per-group plain SGD with optional momentum and weight decay."""

    def __init__(self, cfg: AdaptConfig):
        self.cfg = cfg
        self.buffers: dict[int, np.ndarray] = {}

    def step(self, groups: dict[str, list[Tensor]], grads: dict[str, list[np.ndarray]]) -> dict[str, float]:
        norms = {}
        for g, params in groups.items():
            lr = getattr(self.cfg.lr, g)
            sq = 0.0
            for p, gr in zip(params, grads[g]):
                d = gr + self.cfg.weight_decay * p.data if self.cfg.weight_decay else gr
                if self.cfg.momentum:
                    buf = self.buffers.get(p.node_id)
                    buf = d.copy() if buf is None else self.cfg.momentum * buf + d
                    self.buffers[p.node_id] = buf
                    d = buf
                if lr == 0.0:
                    continue
                new = p.data - lr * d
                delta = new - p.data
                sq += float(np.sum(delta * delta))
                p.data = new
            norms[g] = math.sqrt(sq)
        return norms


def _report(obj: Objective, cfg: AdaptConfig, losses: dict[str, float]) -> AdaptReport:
    source = obj.p_base if cfg.predict_from == "base" else obj.p_final
    return AdaptReport(
        p_final=obj.p_final.data.copy(),
        scores=obj.H_final.data.copy(),
        preds=np.argmax(source.data, axis=-1),
        mask_count=int(obj.mask.sum()),
        losses=losses,
        update_norms={g: 0.0 for g in GROUPS},
        eps_norm=0.0,
    )


def _grads(groups: dict[str, list[Tensor]]) -> dict[str, list[np.ndarray]]:
    return {g: [p.grad.copy() for p in ps] for g, ps in groups.items()}


def _zero(groups):
    for ps in groups.values():
        for p in ps:
            p.zero_grad()


def _flat(grads: dict[str, list[np.ndarray]]) -> np.ndarray:
    arrays = [a.ravel() for g in grads for a in grads[g]]
    return np.concatenate(arrays) if arrays else np.zeros(0)


def _finite(*vals: float) -> bool:
    return all(math.isfinite(v) for v in vals)


def adapt_batch(state: ModelState, batch, cfg: AdaptConfig, opt: SGD | None = None) -> AdaptReport:
    """Adapt on one batch and return its predictions and diagnostics.

    SAM mode: loss1 backward at theta, ascend by rho * g/||g||, loss2
    backward there, restore theta from a stored copy, then descend each
    group along the loss2 gradient. Predictions come from the first forward
    unless ``cfg.predict_after_update``.
    """
    tokens = batch.tokens if hasattr(batch, "tokens") else np.asarray(batch, dtype=float)
    opt = opt or SGD(cfg)
    groups = {g: state.group(g) for g in cfg.active_groups()}
    all_groups = state.trainable_groups()

    _zero(all_groups)
    with Tape() as tape:
        obj = evaluate(state, tokens, cfg)
        L1 = first_loss(obj, cfg)
        if L1.requires_grad:
            tape.backward(L1)
    losses = {
        "entropy": obj.L_entropy.item(),
        "ood": obj.L_ood.item(),
        "sim": obj.L_sim.item(),
        "first": L1.item(),
        "second": float("nan"),
    }
    report = _report(obj, cfg, losses)
    if not _finite(losses["first"]):
        log.warning("non-finite first loss; batch skipped")
        report.skipped = True
        return report

    g1 = _grads(groups)
    if cfg.objective == "single":
        report.update_norms.update(opt.step(groups, g1))
        losses["second"] = losses["first"]
    else:
        eps, degenerate = sam_perturbation(_flat(g1), cfg.rho)
        report.degenerate = degenerate
        report.eps_norm = float(np.linalg.norm(eps))
        saved = [p.data.copy() for ps in groups.values() for p in ps]
        flat_params = [p for ps in groups.values() for p in ps]
        pos = 0
        for p in flat_params:
            p.data = p.data + eps[pos : pos + p.size].reshape(p.shape)
            pos += p.size
        _zero(all_groups)
        try:
            with Tape() as tape:
                obj2 = evaluate(state, tokens, cfg)
                L2 = second_loss(obj2, cfg)
                if L2.requires_grad:
                    tape.backward(L2)
            g2 = _grads(groups)
        finally:
            for p, s in zip(flat_params, saved):
                p.data = s
        losses["second"] = L2.item()
        if not _finite(losses["second"]) or not np.all(np.isfinite(_flat(g2))):
            log.warning("non-finite second pass; batch skipped")
            report.skipped = True
            return report
        report.update_norms.update(opt.step(groups, g2))

    if cfg.predict_after_update:
        fresh = _report(evaluate(state, tokens, cfg), cfg, losses)
        report.p_final, report.scores, report.preds = fresh.p_final, fresh.scores, fresh.preds
    return report


def predict(state: ModelState, batch, cfg: AdaptConfig) -> AdaptReport:
    """Forward only: the same report fields without any parameter update."""
    tokens = batch.tokens if hasattr(batch, "tokens") else np.asarray(batch, dtype=float)
    obj = evaluate(state, tokens, cfg)
    losses = {"entropy": obj.L_entropy.item(), "ood": obj.L_ood.item(), "sim": obj.L_sim.item(),
              "first": float("nan"), "second": float("nan")}
    return _report(obj, cfg, losses)


def run_stream(state: ModelState, stream: Iterable, cfg: AdaptConfig, adapt: bool = True) -> list[AdaptReport]:
    """Fold ``adapt_batch`` over the stream in order; state carries over."""
    opt = SGD(cfg)
    step = (lambda b: adapt_batch(state, b, cfg, opt)) if adapt else (lambda b: predict(state, b, cfg))
    return [step(b) for b in stream]
