"""Fake quantization for QAT: clipped STE, PACT, LSQ and EWGS.

Weights use a signed symmetric per-layer grid ``{-Q_N, ..., Q_P} * s`` with
``Q_N = 2**(b-1)`` and ``Q_P = 2**(b-1) - 1``. Rounding is half away from
zero so results do not depend on the platform's tie-breaking.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .tensor import Tensor, as_tensor, record

METHODS = ("ste", "pact", "lsq", "ewgs")
STEP_FLOOR = 1e-8


def levels(bits):
    if not 1 <= bits <= 8:
        raise DomainError(f"bits must be in [1, 8], got {bits}")
    return 2 ** (bits - 1), 2 ** (bits - 1) - 1


def round_half_away(x):
    # "+ 0.0" turns -0.0 into 0.0 so results are bit-stable
    return np.sign(x) * np.floor(np.abs(x) + 0.5) + 0.0


def _step(s):
    s = float(s.item() if isinstance(s, Tensor) else s)
    if not s > 0:
        raise DomainError(f"step size must be positive, got {s}")
    return s


def fake_quant(w, step, bits):
    """Snap ``w`` onto the signed grid with step ``step``."""
    qn, qp = levels(bits)
    s = _step(step)
    w = np.asarray(w, dtype=np.float64)
    return np.clip(round_half_away(w / s), -qn, qp) * s


def in_range_mask(w, step, bits):
    qn, qp = levels(bits)
    v = np.asarray(w, dtype=np.float64) / _step(step)
    return (v >= -qn) & (v <= qp)


def ste_backward(grad_out, w, step, bits):
    """Clipped straight-through estimator."""
    return np.where(in_range_mask(w, step, bits), grad_out, 0.0)


def lsq_step_scale(n_weights, bits):
    _, qp = levels(bits)
    return 1.0 / math.sqrt(n_weights * max(qp, 1))


def lsq_grads(grad_out, w, step, bits, n_weights):
    """LSQ gradients: (d loss / d w, d loss / d s)."""
    if n_weights < 1:
        raise DomainError("n_weights must be >= 1")
    qn, qp = levels(bits)
    s = _step(step)
    v = np.asarray(w, dtype=np.float64) / s
    dq_ds = np.where(v < -qn, -qn, np.where(v > qp, qp, round_half_away(v) - v))
    ds = float((grad_out * dq_ds).sum()) * lsq_step_scale(n_weights, bits)
    return ste_backward(grad_out, w, s, bits), ds


def ewgs_scale(grad_out, w, w_hat, delta):
    """Element-wise gradient scaling g * (1 + delta * sign(g) * (w - w_hat))."""
    if delta < 0:
        raise DomainError("EWGS delta must be non-negative")
    g = np.asarray(grad_out, dtype=np.float64)
    return g * (1.0 + delta * np.sign(g) * (np.asarray(w) - np.asarray(w_hat)))


def pact_clip(x, act_clip):
    """Clamp to [0, act_clip]. Returns (y, dy/dx mask, saturation mask)."""
    a = _clip_value(act_clip)
    x = np.asarray(x, dtype=np.float64)
    y = np.clip(x, 0.0, a)
    return y, (x > 0) & (x < a), x >= a


def _clip_value(act_clip):
    a = float(act_clip.item() if isinstance(act_clip, Tensor) else act_clip)
    if not a > 0:
        raise DomainError(f"PACT clip must be positive, got {a}")
    return a


def init_step_statistical(w, bits):
    """2 * mean|w| / sqrt(Q_P), falling back to 1e-8 for all-zero tensors."""
    w = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64)
    if w.size < 1:
        raise DomainError("cannot initialise a step from an empty tensor")
    _, qp = levels(bits)
    s = 2.0 * float(np.abs(w).mean()) / math.sqrt(max(qp, 1))
    if s <= 0:
        warnings.warn("all-zero weights; step size falls back to 1e-8", RuntimeWarning)
        return STEP_FLOOR
    return s


def range_step(w, n_bins):
    """Bin width that splits the full weight range into ``n_bins`` bins."""
    w = np.asarray(w, dtype=np.float64)
    return float(w.max() - w.min()) / n_bins


def range_bins(w, n_bins):
    """Bin index of each weight under ``n_bins`` equal-width bins over [min, max]."""
    if n_bins < 1:
        raise DomainError("n_bins must be >= 1")
    w = np.asarray(w, dtype=np.float64).ravel()
    lo, width = float(w.min()), range_step(w, n_bins)
    if width == 0:
        return np.zeros(w.size, dtype=np.int64)
    return np.minimum(((w - lo) / width).astype(np.int64), n_bins - 1)


def zero_bin_fraction(w, n_bins=3):
    """Share of weights that land in the same range-based bin as 0."""
    w = np.asarray(w, dtype=np.float64).ravel()
    lo, hi = float(w.min()), float(w.max())
    if not lo <= 0 <= hi:
        raise DomainError("0 lies outside the weight range")
    bins = range_bins(np.append(w, 0.0), n_bins)
    return float(np.mean(bins[:-1] == bins[-1]))


# -- taped ops ------------------------------------------------------------------------

def quantize_weight(w, step, bits, method="lsq", ewgs_delta=0.0):
    """Fake-quantized weight as a taped op.

    ``step`` is a scalar Tensor; it receives a gradient for ``lsq`` and
    ``ewgs`` when it requires one.
    """
    if method not in METHODS:
        raise DomainError(f"unknown quantization method {method!r}")
    w, step = as_tensor(w), as_tensor(step)
    s = _step(step)
    wd = w.data
    w_hat = fake_quant(wd, s, bits)
    n = wd.size

    def backward(g):
        if method in ("lsq", "ewgs"):
            dw, ds = lsq_grads(g, wd, s, bits, n)
        else:
            dw, ds = ste_backward(g, wd, s, bits), None
        if method == "ewgs" and ewgs_delta:
            # discrepancy measured in grid units
            scaled = ewgs_scale(g, wd / s, w_hat / s, ewgs_delta)
            dw = np.where(in_range_mask(wd, s, bits), scaled, 0.0)
        return dw, ds

    return record(w_hat, (w, step), backward, f"quant_{method}")


def pact_quant(x, act_clip, bits=None):
    """PACT clip followed by an optional uniform grid on [0, clip]."""
    x, act_clip = as_tensor(x), as_tensor(act_clip)
    a = _clip_value(act_clip)
    y, pass_mask, sat_mask = pact_clip(x.data, a)
    if bits is not None:
        delta = a / (2 ** bits - 1)
        y = np.floor(y / delta + 0.5) * delta

    def backward(g):
        return g * pass_mask, float((g * sat_mask).sum())

    return record(y, (x, act_clip), backward, "pact")


@dataclass
class QuantState:
    """Per-layer weight steps and activation clips for one QAT run."""

    bits: int = 4
    method: str = "lsq"
    ewgs_delta: float = 0.1
    act_bits: int | None = None
    step: dict = field(default_factory=dict)
    act_clip: dict = field(default_factory=dict)

    def __post_init__(self):
        levels(self.bits)
        if self.method not in METHODS:
            raise DomainError(f"unknown quantization method {self.method!r}")
        if self.ewgs_delta < 0:
            raise DomainError("EWGS delta must be non-negative")

    @property
    def qn(self):
        return levels(self.bits)[0]

    @property
    def qp(self):
        return levels(self.bits)[1]

    @property
    def learn_step(self):
        return self.method in ("lsq", "ewgs")

    def init_steps(self, weights):
        for name, w in weights.items():
            if name not in self.step:
                self.step[name] = Tensor(init_step_statistical(w.data, self.bits),
                                         requires_grad=self.learn_step, name=f"{name}.step")

    def init_act_clips(self, names, value=6.0):
        for name in names:
            if name not in self.act_clip:
                self.act_clip[name] = Tensor(value, requires_grad=True, name=f"{name}.act_clip")

    def parameters(self):
        params = [t for t in self.step.values() if t.requires_grad]
        return params + list(self.act_clip.values())

    def clamp(self):
        for t in self.step.values():
            t.data = np.maximum(t.data, STEP_FLOOR)
        for t in self.act_clip.values():
            t.data = np.maximum(t.data, 1e-3)

    def quantize(self, name, w):
        return quantize_weight(w, self.step[name], self.bits, self.method, self.ewgs_delta)

    def hard(self, name, w):
        return fake_quant(w, self.step[name], self.bits)

    def to_dict(self):
        return {
            "bits": self.bits,
            "method": self.method,
            "ewgs_delta": self.ewgs_delta,
            "act_bits": self.act_bits,
            "step": {k: float(v.item()) for k, v in self.step.items()},
            "act_clip": {k: float(v.item()) for k, v in self.act_clip.items()},
        }

    @classmethod
    def from_dict(cls, d):
        q = cls(bits=int(d["bits"]), method=d["method"], ewgs_delta=float(d["ewgs_delta"]),
                act_bits=d.get("act_bits"))
        for k, v in d.get("step", {}).items():
            q.step[k] = Tensor(float(v), requires_grad=q.learn_step, name=f"{k}.step")
        for k, v in d.get("act_clip", {}).items():
            q.act_clip[k] = Tensor(float(v), requires_grad=True, name=f"{k}.act_clip")
        return q
