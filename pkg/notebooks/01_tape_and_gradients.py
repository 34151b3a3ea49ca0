"""
Reverse mode on a tape, checked by finite differences
=====================================================

Everything trainable in the package is a float64 ``Tensor`` recorded on a
tape. This walk-through builds a tiny expression, pulls gradients back
through it, and compares them against central differences.
"""

import numpy as np

from owtta import tensor as T
from owtta.gradcheck import grad_check, numeric_grad
from owtta.tensor import Tape

rng = np.random.default_rng(0)

# A small softmax-entropy objective: the same shape of computation the
# adaptation losses are built from.
W = T.parameter(rng.normal(size=(5, 3)))
x = rng.normal(size=(4, 5))


def objective():
    p = T.softmax(T.constant(x) @ W, axis=-1)
    return T.mean(T.entropy(p, axis=-1))


with Tape() as tape:
    loss = objective()
    tape.backward(loss)
print("loss", loss.item())
print("analytic dL/dW\n", np.round(W.grad, 5))

# Central differences, one coordinate at a time.
print("numeric  dL/dW\n", np.round(numeric_grad(objective, W, h=1e-6), 5))

# grad_check reports the worst relative error across coordinates.
print("max relative error", grad_check(objective, W))

# %%
# The full suite covers every loss term against every trainable group of a
# two-layer toy transformer. It takes a few seconds.

from owtta.checks import gradient_suite

for r in gradient_suite():
    print(f"{r.term:8s} max rel err {r.max_rel_err:.2e}  ({r.n_params} parameters)")
