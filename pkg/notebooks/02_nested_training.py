"""
Nested training on a toy model
==============================

Pretrain a small byte-level transformer, then compare nested (8, 4, 2)
training against a dedicated int2 run.  Scaled down so it finishes in about
a minute; the acceptance suite runs the full-size version.
"""

# %%
from matquant.data import eval_batches, load_corpus, split
from matquant.model import ModelConfig, ToyTransformer
from matquant.objectives import Baseline, MatQuantConfig
from matquant.trainer import TrainConfig, float_eval, pretrain_float, train_matquant

data = split(load_corpus())
model = ToyTransformer(ModelConfig(d_model=32, d_ff=128, n_layers=2, seq_len=32, seed=0))
pre = TrainConfig(steps=300, lr=3e-3, lr_schedule="warmup_cosine", warmup_steps=20, eval_batches=4)
model, _ = pretrain_float(model, data, pre)
print("float CE", float_eval(model, list(eval_batches(data[1], 16, 32, 4))))

# %% [markdown]
# Block reconstruction: weights stay frozen, clip scales and the FFN
# shift/scale are fitted layer by layer against the float layer outputs.

# %%
cfg = dict(steps=100, lr=1e-3, eval_batches=4)
mq = train_matquant(model, data, TrainConfig(objective=MatQuantConfig(base="block_recon"), eval_bits=(8, 6, 4, 3, 2), **cfg))
b2 = train_matquant(model, data, TrainConfig(objective=Baseline(2, base="block_recon"), **cfg))
print("nested:", {b: round(v, 4) for b, v in mq.final_eval().items()})
print("int2 baseline:", round(b2.final_eval()[2], 4))

# %% [markdown]
# int6 and int3 were never trained; they come from slicing the same codes.
# At this scale the int2 comparison against the dedicated run is close and
# flips with the seed.
