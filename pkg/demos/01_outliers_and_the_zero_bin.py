"""
Two outliers and a 3-bin quantizer
==================================

A range-based quantizer spreads its bins over [min, max]. Two large
weights are enough to push everything else into the middle bin.
"""

# %%
import numpy as np

from r2lab.quantizers import range_bins, zero_bin_fraction
from r2lab.regularizers import RegState
from r2lab.tensor import Tensor
from r2lab.trainer import reg_descent

rng = np.random.default_rng(0)
w = np.concatenate([rng.uniform(-0.1, 0.1, 99), [-1.0, 1.0]])
print("range", np.ptp(w), "std", w.std())

# %%
# Bin every weight. Bin 1 is the one holding zero.
bins = range_bins(w, 3)
print("bin counts", np.bincount(bins, minlength=3))
print("zero-bin fraction", zero_bin_fraction(w, 3))   # 99 / 101

# %%
# Now shrink with the margin regularizer alone (no task loss).
# M starts at 2 std and is learned along with the weights.
weights = {"w": Tensor(w.copy(), requires_grad=True)}
reg = RegState.create("margin", weights, lam=0.01)
ranges = reg_descent(weights, reg, steps=200, lr=1.0)
print("range every 50 steps", [round(r["w"], 3) for r in ranges[::50]])
print("learned margin M", float(reg.per_layer["w"].data))

# %%
shrunk = weights["w"].data
print("bin counts", np.bincount(range_bins(shrunk, 3), minlength=3))
print("zero-bin fraction", zero_bin_fraction(shrunk, 3))
