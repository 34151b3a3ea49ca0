"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central differences of ``fn()`` w.r.t. every coordinate of ``param``.

    ``fn`` is evaluated without a tape, reading ``param.data`` in place.
    """
    flat = param.data.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn().item()
        flat[i] = orig - h
        down = fn().item()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return out.reshape(param.shape)


def analytic_grad(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
        tape.backward(loss)
    return [p.grad.copy() for p in params]


def grad_check(
    fn: Callable[[], Tensor],
    point: Tensor | Sequence[Tensor],
    h: float = 1e-6,
) -> float:
    """Max over coordinates of ``|analytic - fd| / max(1, |fd|)``.

    ``point`` is one trainable tensor or a sequence of them; ``fn`` must build
    its scalar output from their current values.
    """
    if not 1e-8 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-8, 1e-4]")
    params = [point] if isinstance(point, Tensor) else list(point)
    worst = 0.0
    for p, ga in zip(params, analytic_grad(fn, params)):
        gn = numeric_grad(fn, p, h)
        if gn.size:
            err = np.abs(ga - gn) / np.maximum(1.0, np.abs(gn))
            worst = max(worst, float(err.max()))
    return worst


def multi_grad_check(
    fn: Callable[[], dict[str, Tensor]],
    params: Sequence[Tensor],
    h: float = 1e-6,
) -> dict[str, float]:
    """``grad_check`` for several scalar outputs of one shared computation.

    Each perturbed point costs one call of ``fn`` for all outputs together.
    """
    if not 1e-8 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-8, 1e-4]")
    params = list(params)
    names = list(fn())
    analytic = {}
    for name in names:
        analytic[name] = analytic_grad(lambda: fn()[name], params)
    worst = dict.fromkeys(names, 0.0)
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = {n: t.item() for n, t in fn().items()}
            flat[i] = orig - h
            down = {n: t.item() for n, t in fn().items()}
            flat[i] = orig
            for n in names:
                fd = (up[n] - down[n]) / (2.0 * h)
                a = analytic[n][k].reshape(-1)[i]
                worst[n] = max(worst[n], float(abs(a - fd) / max(1.0, abs(fd))))
    return worst
