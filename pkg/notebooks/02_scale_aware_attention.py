# %% [markdown]
# # Local windows, pooled global context and the gate between them

# %%
import numpy as np

from flowdet.attention import SAA, SaaConfig, saa_forward, window_merge, window_partition
from flowdet.detector.flops import gcb_flops, ldb_flops
from flowdet.gradsuite import randomize
from flowdet.tensor import Tensor

rng = np.random.default_rng(1)

# %% [markdown]
# Window partitioning is row-major and pads ragged edges; merging undoes it.

# %%
x = Tensor(np.arange(36.0).reshape(1, 1, 6, 6))
win, layout = window_partition(x, 4)
print(win.shape, layout.num_windows)
np.array_equal(window_merge(win, layout).data, x.data)

# %% [markdown]
# A freshly built block has a zero gate pre-activation, so both branches get
# weight 0.5 everywhere.

# %%
cfg = SaaConfig(embed_dim=16, heads=2)
block = SAA(rng, cfg, np.float64)
saa_forward(Tensor(rng.standard_normal((1, 16, 8, 8))), cfg, block)
np.unique(block.last_gate)

# %% [markdown]
# Cost: the local branch grows with the window area, the pooled keys of the
# global branch shrink with the square of the reduction ratio.

# %%
for w in (1, 2, 4, 8):
    print("window", w, ldb_flops(SaaConfig(64, 4, window_size=w), 16, 16)["attention"])
for r in (1, 2, 4):
    print("reduction", r, gcb_flops(SaaConfig(64, 4, reduction_ratio=r), 16, 16)["kv_path"])
