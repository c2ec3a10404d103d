"""
Per-layer precision and the extra bucket
========================================

Uses the CLI entry points on a freshly trained checkpoint: evaluate at
several widths, sweep Mix'n'Match plans, and compare plain and extra int2.
"""

# %%
import csv
import json
import tempfile
from pathlib import Path

from matquant.cli import main

work = Path(tempfile.mkdtemp())
config = {
    "version": 1,
    "model": {"d_model": 32, "d_ff": 128, "n_layers": 4, "seq_len": 32, "seed": 0},
    "pretrain": {"steps": 300, "lr": 3e-3, "lr_schedule": "warmup_cosine", "warmup_steps": 20},
    "train": {"steps": 60, "lr": 1e-3},
    "objective": {"kind": "matquant", "spec": "[8,4,2]", "base": "block_recon", "slice_mode": "extra"},
    "eval": {"batches": 4},
}
(work / "run.json").write_text(json.dumps(config))
main(["train", "--config", str(work / "run.json"), "--out", str(work / "run")])
ckpt = str(work / "run" / "model.matq")

# %%
for bits, mode in [(8, "plain"), (4, "plain"), (2, "plain"), (2, "extra")]:
    main(["eval", ckpt, "--bits", str(bits), "--mode", mode, "--out", str(work / "m.json")])
    print(bits, mode, json.loads((work / "m.json").read_text()))

# %% [markdown]
# Every strategy at a few target widths.  pareto.json keeps the plans no
# other plan beats on both bits and loss.

# %%
main(["mixnmatch", ckpt, "--targets", "3,4,6", "--out", str(work / "mm"), "--config", str(work / "run.json")])
with open(work / "mm" / "mixnmatch.csv") as fh:
    for row in csv.DictReader(fh):
        print(row["strategy"], row["target"], row["per_layer_bits"], row["eval_ce"])

# %%
main(["histogram", ckpt, "--bits", "2", "--out", str(work / "hist.csv")])
print((work / "hist.csv").read_text())
