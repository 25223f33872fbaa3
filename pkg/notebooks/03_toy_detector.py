# %% [markdown]
# # Training the toy set-prediction detector on synthetic scenes
#
# Short run only; the full 2,000-step run lives in the acceptance tests.

# %%
import numpy as np

from flowdet.data import SYNTH_CATEGORIES, synth_dataset
from flowdet.detector import ModelConfig, build_model
from flowdet.detector.ablation import evaluate_model, gate_statistics
from flowdet.detector.flops import count_flops
from flowdet.detector.train import fit

cats = [c["id"] for c in SYNTH_CATEGORIES]
cfg = ModelConfig()
model = build_model(cfg)
print(model.num_parameters(), "parameters,", count_flops(cfg).total / 1e6, "MFLOPs per image")

# %%
train = synth_dataset(256, seed=0)
held_out = synth_dataset(16, seed=7919)
hist, state = fit(model, train, 100, cats)
print("loss", hist[0].total, "->", np.mean([r.total for r in hist[-10:]]))

# %%
report = evaluate_model(model, held_out, cats)
report.headline()

# %% [markdown]
# Mean gate per object size: how much weight the global branch gets.

# %%
gate_statistics(model, held_out)
