"""Measure the build-time baselines of the default backbone and write BASELINES.md.

Usage: python3 demos/measure_baselines.py [runs-root]

Needs scikit-learn for the linear probe. Takes about fifteen minutes on one
core when the backbone is not cached yet.
"""

import sys
import time
from pathlib import Path

from sklearn.linear_model import LogisticRegression

from rptlab import harness as H
from rptlab import tasks as tk
from rptlab.pretrain import evaluate_pretraining, pooled_features

root = H.runs_root(sys.argv[1] if len(sys.argv) > 1 else None)
base = H.RunConfig(save_checkpoints=False)
t0 = time.time()
bb = H.get_backbone(base, root)
token_acc, per_task = evaluate_pretraining(bb, seed=777)

probe = {}
for name in tk.TASK_NAMES:
    task = H.get_task(base, name, root)
    clf = LogisticRegression(max_iter=2000).fit(pooled_features(bb, task.train), [e.label for e in task.train])
    probe[name] = clf.score(pooled_features(bb, task.val), [e.label for e in task.val])

seeds = [1, 2, 3]
cmp = H.compare_methods(base, ("fine-tune", "pt", "res-pt"), seeds, root=root)

lines = [
    "# Baselines",
    "",
    "Measured on the default backbone (encoder-decoder, 2 layers, d=64, 6000 pretraining steps, seed 1000)",
    f"with `python3 demos/measure_baselines.py` ({time.time() - t0:.0f}s).",
    "",
    "## Pretraining, held-out corpus",
    "",
    f"- token accuracy {token_acc:.4f} (chance {1 / tk.VOCAB_SIZE:.4f})",
]
lines += [f"- tagged {k}: {v:.3f} (chance 0.5)" for k, v in per_task.items()]
lines += ["", "## Linear probe on mean-pooled frozen encoder features (logistic regression)", "",
          "| task | val accuracy |", "|---|---|"]
lines += [f"| {k} | {v:.3f} |" for k, v in probe.items()]
lines += ["", f"## Suite accuracy, best epoch, seeds {seeds}", "", "| method | mean | stdev | per task |",
          "|---|---|---|---|"]
for c in cmp.cells:
    tasks = ", ".join(f"{k} {v:.3f}" for k, v in c.task_scores().items())
    lines.append(f"| {c.method} | {c.mean:.4f} | {c.stdev:.4f} | {tasks} |")
Path("BASELINES.md").write_text("\n".join(lines) + "\n")
print("\n".join(lines))
