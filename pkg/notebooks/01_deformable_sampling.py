# %% [markdown]
# # Axis-specialised deformable sampling
#
# A quick tour of the deformable unit: bilinear sampling, the two offset
# branches and the offset-magnitude weight that damps far-away samples.

# %%
import numpy as np

from flowdet import ops
from flowdet.deform import GDU, GduConfig, bilinear_sample, gdu_forward, modulation_psi, predict_offsets
from flowdet.gradsuite import randomize
from flowdet.tensor import Tensor

rng = np.random.default_rng(0)

# %% [markdown]
# Bilinear sampling at a fractional position blends the four neighbours.

# %%
x = Tensor(np.array([[[[0.0, 2.0], [4.0, 6.0]]]]))
bilinear_sample(x, (0.5, 0.5)).data  # -> 3.0

# %% [markdown]
# The modulation weight shrinks with offset length; tau sets the scale.

# %%
r = np.linspace(0, 10, 6)
np.round(modulation_psi(r, tau=4.0), 3)

# %% [markdown]
# At initialisation the offset heads are zero, so the unit starts out as two
# ordinary 3x3 convolutions averaged and merged. Randomising the heads gives
# offsets that stay inside the per-axis caps.

# %%
cfg = GduConfig()
g = randomize(GDU(rng, 4, cfg, np.float64), rng, 1.0)
fields = predict_offsets(Tensor(rng.standard_normal((1, 4, 8, 8))), cfg, g)
h = fields["horizontal"]
print("max |dx| horizontal", np.abs(h.dx.data).max(), "cap", cfg.sigma)
print("max |dy| horizontal", np.abs(h.dy.data).max(), "cap", cfg.epsilon)

# %%
out = gdu_forward(Tensor(rng.standard_normal((1, 4, 8, 8))), cfg, g)
out.shape
