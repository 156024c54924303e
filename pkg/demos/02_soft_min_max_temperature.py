"""
Soft min/max and its temperature
================================

s_max and s_min are softmax-weighted means. As alpha grows they tend to
the hard max and min, and the loss tends to range(W) + e^-alpha.
"""

# %%
import math

import numpy as np

from r2lab.regularizers import smm_grad, smm_loss

rng = np.random.default_rng(1)
w = rng.standard_normal(40)
print("hard range", np.ptp(w))

# %%
for alpha in (0.0, 1.0, 5.0, 20.0, 50.0):
    loss = smm_loss(w, alpha)
    print(f"alpha={alpha:5.1f}  loss={loss:.6f}  range+e^-a={np.ptp(w) + math.exp(-alpha):.6f}")

# %%
# At alpha = 0 both soft extrema are the plain mean, so the loss is 1.
# Small alpha spreads the gradient over many weights; large alpha
# focuses it on the extremes.
for alpha in (0.5, 50.0):
    dw, da = smm_grad(w, alpha)
    top = np.argsort(-np.abs(dw))[:3]
    print(f"alpha={alpha}: largest |dW| at", top, np.round(dw[top], 4), " dL/dalpha", round(da, 4))
print("argmax", w.argmax(), "argmin", w.argmin())

# %%
# Close extrema slow the approach: the runner-up keeps weight e^{-alpha * gap}.
v = np.array([0.0, 0.5, 0.99, 1.0])
for alpha in (50.0, 500.0, 5000.0):
    print(alpha, smm_loss(v, alpha) - (1.0 + math.exp(-alpha)))
