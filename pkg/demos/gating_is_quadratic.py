# %% [markdown]
# The gated unit inside PGC multiplies a depthwise convolution by a linear
# projection of the same input. Written out, every output is a sum of pairwise
# products of inputs within a window of three positions plus a linear term.

# %%
import numpy as np

from lyra.numerics import Rng
from lyra.pgc import GatedUnitParams, gated_unit_expansion, gated_unit_forward

rng = Rng(1)
P = GatedUnitParams.random(3, rng)
u = rng.normal(size=(6, 3))
a, b = gated_unit_forward(u, P), gated_unit_expansion(u, P)
print("max |forward - expansion| =", np.abs(a - b).max())

# %%
# Without the linear bias the unit is homogeneous of degree two.
P.b_lin = np.zeros(3)
for alpha in (0.5, 2.0, -3.0):
    ratio = gated_unit_forward(alpha * u, P) / gated_unit_forward(u, P)
    print(alpha, "->", np.unique(np.round(ratio, 10)))

# %%
# A single nonzero input only reaches its two neighbours.
spike = np.zeros((7, 3))
spike[3, 1] = 1.0
P = GatedUnitParams.random(3, Rng(2))
print("touched positions:", np.flatnonzero(np.abs(gated_unit_forward(spike, P)).sum(axis=1)))
