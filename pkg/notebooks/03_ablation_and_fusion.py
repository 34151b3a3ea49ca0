"""
Which adapter does what
=======================

Turning the attention adapter and the ladder network on and off separately,
then sweeping the fusion weight alpha between base and OOD predictions.
"""

from pathlib import Path

from owtta.config import load_config
from owtta.experiment import Workbench, ablation, sweep
from owtta.metrics import h_score

cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "default.ini").with_batches(40)
bench = Workbench(cfg)

print(f"{'variant':12s} {'ACC':>7s} {'AUROC':>7s}")
for name, s in ablation(bench).items():
    print(f"{name:12s} {s.acc:7.4f} {s.auroc:7.4f}")

# %%
# alpha = 1 keeps only the base prediction, alpha = 0 only the ladder's.
for alpha, s in sweep(bench, "alpha", [0.0, 0.3, 0.5, 0.7, 1.0]):
    print(f"alpha={alpha:.1f}  ACC {s.acc:.4f}  AUROC {s.auroc:.4f}  H {h_score(s.acc, s.auroc):.4f}")
