"""
Pretrain, quantize, palettize
=============================

A reduced version of the acceptance runs: a small MLP on the synthetic
MNIST-like set, with and without L-inf range regularization, then 2-bit
LSQ and 1-bit DKM from each checkpoint. A couple of minutes on one core.
"""

# %%
import copy

import numpy as np

from r2lab import analytics
from r2lab.config import ExperimentConfig
from r2lab.trainer import load_data, run_compress, run_pretrain, run_qat

base = {}
data = load_data(ExperimentConfig.from_dict(base).data)
x, y = data[0].images, data[0].labels
print(x.shape, "pixel range", x.min(), x.max(), "class counts", np.bincount(y))

# %%
ckpts = {}
for kind in ("none", "linf"):
    cfg = ExperimentConfig.from_dict({**base, "reg": {"kind": kind}})
    ckpts[kind], hist = run_pretrain(cfg, data=data, seed=0)
    print(kind, "test acc per epoch", [round(h["test_acc"], 4) for h in hist])

# %%
# Range (regularized / plain) and kurtosis per layer. Lower kurtosis
# means fewer outliers.
plain, reg = ckpts["none"].model.weights(), ckpts["linf"].model.weights()
for row in analytics.stats_table(ckpts["linf"].model, ckpts["none"].model):
    name = row["layer"]
    print(name, "range ratio %.3f" % row["range_ratio"], "kurtosis %.2f -> %.2f"
          % (analytics.kurtosis(plain[name].data), analytics.kurtosis(reg[name].data)))

# %%
qat = ExperimentConfig.from_dict({**base, "train": {"phase": "qat", "epochs": 2, "lr": 0.01},
                                  "quant": {"bits": 2}})
pal = ExperimentConfig.from_dict({**base, "train": {"phase": "compress", "epochs": 2, "lr": 0.01},
                                  "palette": {"bits": 1, "dim": 1}})
for kind, ck in ckpts.items():
    q, _ = run_qat(qat, copy.deepcopy(ck), data=data, seed=0)
    p, _ = run_compress(pal, copy.deepcopy(ck), data=data, seed=0)
    print(f"{kind}: fp32 {ck.metrics['test_acc']:.4f}  2-bit LSQ {q.metrics['test_acc']:.4f}"
          f"  1-bit DKM {p.metrics['test_acc']:.4f}")

# %%
# Every 1-bit layer now holds two distinct values.
print(p.metrics["distinct_values"])
print(p.metrics["size_report"]["totals"])
