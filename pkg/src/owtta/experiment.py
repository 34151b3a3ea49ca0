"""End-to-end runs: source model, stream, adaptation pass, summary."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .adapt import AdaptConfig, AdaptReport, run_stream
from .backbone import ModelState
from .config import RunConfig
from .metrics import MetricsSummary, auroc
from .stream import Batch, build_source_model, gen_stream


@dataclass
class RunResult:
    reports: list[AdaptReport]
    stream: list[Batch]
    summary: MetricsSummary
    state: ModelState

    def quarter_auroc(self) -> list[float | None]:
        """Stream AUROC on each quarter of the batches (in order)."""
        k = max(len(self.stream) // 4, 1)
        out = []
        for i in range(4):
            sl = slice(i * k, (i + 1) * k if i < 3 else len(self.stream))
            r, b = self.reports[sl], self.stream[sl]
            if not r:
                out.append(None)
                continue
            out.append(auroc(np.concatenate([x.scores for x in r]), np.concatenate([x.is_ood for x in b])))
        return out


def summarize(reports, stream) -> MetricsSummary:
    return MetricsSummary.from_arrays(
        np.concatenate([r.preds for r in reports]),
        np.concatenate([b.labels for b in stream]),
        np.concatenate([r.scores for r in reports]),
        np.concatenate([b.is_ood for b in stream]),
    )


class Workbench:
    """Caches the source model and stream of one config so variants can share them.

    Every run starts from a fresh copy of the source model.
    """

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.source = build_source_model(cfg.backbone, cfg.stream)
        self.stream = gen_stream(cfg.stream, cfg.backbone)

    def run(self, adapt_cfg: AdaptConfig | None = None, adapt: bool = True) -> RunResult:
        acfg = adapt_cfg or self.cfg.adapt
        state = self.source.copy()
        reports = run_stream(state, self.stream, acfg, adapt=adapt)
        return RunResult(reports, self.stream, summarize(reports, self.stream), state)

    def frozen(self) -> RunResult:
        return self.run(adapt=False)


def run_experiment(cfg: RunConfig, adapt: bool = True) -> RunResult:
    return Workbench(cfg).run(adapt=adapt)


# Ablation variants: which adapter components are switched on. "no-adapter"
# keeps normalisation-layer adaptation only.
VARIANTS = {
    "no-adapter": dict(use_aan=False, use_hln=False),
    "aan-only": dict(use_aan=True, use_hln=False),
    "hln-only": dict(use_aan=False, use_hln=True),
    "full": dict(use_aan=True, use_hln=True),
}


def variant(cfg: AdaptConfig, name: str) -> AdaptConfig:
    return replace(cfg, **VARIANTS[name])


def ablation(bench: Workbench, names=tuple(VARIANTS)) -> dict[str, MetricsSummary]:
    return {n: bench.run(variant(bench.cfg.adapt, n)).summary for n in names}


SWEEP_AXES = ("alpha", "lambda1", "lambda2")


def sweep_config(cfg: AdaptConfig, axis: str, value: float) -> AdaptConfig:
    if axis == "alpha":
        return replace(cfg, fusion=replace(cfg.fusion, alpha=value))
    if axis in ("lambda1", "lambda2"):
        return replace(cfg, weights=replace(cfg.weights, **{axis: value}))
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def sweep(bench: Workbench, axis: str, values) -> list[tuple[float, MetricsSummary]]:
    """One adapted run per value; rows of ``(value, summary)``."""
    return [(float(v), bench.run(sweep_config(bench.cfg.adapt, axis, float(v))).summary) for v in values]


__all__ = [
    "RunResult",
    "VARIANTS",
    "Workbench",
    "ablation",
    "run_experiment",
    "summarize",
    "sweep",
    "sweep_config",
    "variant",
]
