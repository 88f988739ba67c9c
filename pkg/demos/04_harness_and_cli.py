# %% [markdown]
# # Runs, sweeps and reports
#
# The harness turns a flat `key = value` config into run directories:
# `config.txt`, `metrics.jsonl`, checkpoints and `baked.prompt`. Sweeps run a
# grid of cells over seeds and never drop a failed cell. The CLI (`rpt ...`)
# is a thin layer over the same functions; the equivalent commands are shown
# in the comments. Everything here uses a toy backbone so it runs in seconds.

# %%
import tempfile
from pathlib import Path

from rptlab import harness as H

root = Path(tempfile.mkdtemp(prefix="rpt-demo-"))
toy = H.RunConfig(layers=1, d=16, heads=2, ffn=32, pretrain_steps=300, train_size=80, val_size=40,
                  m=32, epochs=4, tasks=("majority", "contains"), save_checkpoints=False)
print(H.serialize_config(toy))

# %%
# rpt train -c toy.cfg --root <root>
for out in H.run(toy.replace(save_checkpoints=True), root=root):
    print(out.task, "best epoch", out.best_epoch, "val accuracy", out.best_metric)
    print("   files:", sorted(p.name for p in out.run_dir.iterdir())[:6], "...")

# %%
# rpt sweep-lr -c toy.cfg --grid 0.01,0.3,10 --seeds 1,2
rep = H.sweep_lr(toy, grid=[0.01, 0.3, 10.0], seeds=[1, 2], root=root)
print(rep.to_csv())
for m in rep.methods():
    print(f"variance across the grid, {m}: {rep.grid_variance(m):.4f}")

# %%
# rpt ablate-width -c toy.cfg --widths 5,10,50
print(H.ablate_width(toy, widths=[5, 10, 50], seeds=[1], root=root).to_csv())

# %%
# rpt report <root> --out <root>/report
out = H.report([root], root / "report")
print((root / "report" / "summary.csv").read_text())
