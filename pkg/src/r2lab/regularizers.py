"""Range regularizers: L-infinity, margin and soft-min-max.

Each loss comes as a pure numpy pair (``*_loss`` / ``*_grad``) and as a
taped op (``linf``, ``margin``, ``soft_min_max``) that plugs those analytic
gradients into the reverse pass, so the trainer can simply add
``lam * sum(reg)`` to the task loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .tensor import Tensor, as_tensor, record

KINDS = ("none", "linf", "margin", "smm")
ALPHA_MIN = 1e-3


def _arr(w):
    a = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64)
    if a.size == 0:
        raise DomainError("regularizer applied to an empty tensor")
    return a


def _scalar(x):
    return float(x.item() if isinstance(x, Tensor) else x)


# -- L-infinity --------------------------------------------------------------------

def linf_loss(weights):
    """Sum over layers of max |w|."""
    if isinstance(weights, (Tensor, np.ndarray)):
        weights = [weights]
    if len(weights) == 0:
        raise DomainError("linf_loss needs at least one tensor")
    return float(sum(np.max(np.abs(_arr(w))) for w in weights))


def linf_grad(w):
    """Subgradient of max |w|; tied maxima share the unit mass equally."""
    a = _arr(w)
    mag = np.abs(a)
    hit = mag == mag.max()
    return np.where(hit, np.sign(a), 0.0) / np.count_nonzero(hit)


# -- margin ---------------------------------------------------------------------------

def margin_loss(w, m):
    """|M| plus the elementwise hinge sum of |w| - |M|."""
    a = _arr(w)
    m = abs(_scalar(m))
    return m + float(np.maximum(np.abs(a) - m, 0.0).sum())


def margin_grad(w, m):
    a = _arr(w)
    m = _scalar(m)
    outside = np.abs(a) > abs(m)
    dw = np.where(outside, np.sign(a), 0.0)
    dm = float(np.sign(m)) * (1.0 - np.count_nonzero(outside))
    return dw, dm


def init_margin(w):
    """Initial margin: twice the population standard deviation."""
    a = _arr(w)
    if a.size < 2:
        raise DomainError("init_margin needs at least two weights")
    return 2.0 * float(a.std())


# -- soft-min-max ---------------------------------------------------------------------

def _soft_extrema(a, alpha):
    pmax = np.exp(alpha * (a - a.max()))
    pmax /= pmax.sum()
    pmin = np.exp(-alpha * (a - a.min()))
    pmin /= pmin.sum()
    return float((pmax * a).sum()), float((pmin * a).sum()), pmax, pmin


def smm_loss(w, alpha):
    a = _arr(w).ravel()
    alpha = _scalar(alpha)
    if alpha < 0:
        raise DomainError("alpha must be non-negative")
    s_max, s_min, _, _ = _soft_extrema(a, alpha)
    return (s_max - s_min) + float(np.exp(-alpha))


def smm_grad(w, alpha):
    """Gradient of the soft-min-max loss w.r.t. the weights and alpha.

    With p the softmax weights, d s/d w_i = p_i (1 + a (w_i - s)) and
    d s/d a = sum p_i w_i (w_i - s), with a = +alpha for s_max and -alpha
    for s_min.
    """
    arr = _arr(w)
    a = arr.ravel()
    alpha = _scalar(alpha)
    if alpha < 0:
        raise DomainError("alpha must be non-negative")
    s_max, s_min, pmax, pmin = _soft_extrema(a, alpha)
    dmax = pmax * (1.0 + alpha * (a - s_max))
    dmin = pmin * (1.0 - alpha * (a - s_min))
    dalpha = float((pmax * a * (a - s_max)).sum() + (pmin * a * (a - s_min)).sum())
    return (dmax - dmin).reshape(arr.shape), dalpha - float(np.exp(-alpha))


# -- taped ops ------------------------------------------------------------------------

def linf(w):
    w = as_tensor(w)
    g = linf_grad(w.data)
    return record(linf_loss(w.data), (w,), lambda up: (float(up) * g,), "linf")


def margin(w, m):
    w, m = as_tensor(w), as_tensor(m)
    dw, dm = margin_grad(w.data, m.data)
    return record(margin_loss(w.data, m.data), (w, m),
                  lambda up: (float(up) * dw, float(up) * dm), "margin")


def soft_min_max(w, alpha):
    w, alpha = as_tensor(w), as_tensor(alpha)
    dw, da = smm_grad(w.data, alpha.data)
    return record(smm_loss(w.data, alpha.data), (w, alpha),
                  lambda up: (float(up) * dw, float(up) * da), "smm")


# -- state ----------------------------------------------------------------------------

@dataclass
class RegState:
    """Regularizer kind, global weight and per-layer learnable scalars.

    ``per_layer`` maps a layer name to a scalar Tensor: the margin M for
    ``margin``, the temperature alpha for ``smm``. It is empty for
    ``none`` and ``linf``.
    """

    kind: str = "none"
    lam: float = 0.01
    per_layer: dict = field(default_factory=dict)
    alpha_min: float = ALPHA_MIN

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown regularizer kind {self.kind!r}")
        if self.lam < 0:
            raise DomainError("lambda must be non-negative")

    @classmethod
    def create(cls, kind, weights, lam=0.01, alpha_init=0.1, margin_factor=2.0,
               alpha_min=ALPHA_MIN):
        """Build state for ``weights`` (mapping name -> weight Tensor)."""
        state = cls(kind=kind, lam=lam, alpha_min=alpha_min)
        for name, w in weights.items():
            if kind == "margin":
                m = margin_factor * init_margin(w.data) / 2.0
                state.per_layer[name] = Tensor(m, requires_grad=True, name=f"{name}.M")
            elif kind == "smm":
                state.per_layer[name] = Tensor(max(alpha_init, alpha_min),
                                               requires_grad=True, name=f"{name}.alpha")
        return state

    def parameters(self):
        return list(self.per_layer.values())

    def layer_loss(self, name, w):
        if self.kind == "linf":
            return linf(w)
        if self.kind == "margin":
            return margin(w, self.per_layer[name])
        if self.kind == "smm":
            return soft_min_max(w, self.per_layer[name])
        raise DomainError("no loss for regularizer kind 'none'")

    def clamp(self):
        """Keep every temperature at or above ``alpha_min``."""
        if self.kind == "smm":
            for t in self.per_layer.values():
                t.data = np.maximum(t.data, self.alpha_min)

    def to_dict(self):
        return {
            "kind": self.kind,
            "lambda": self.lam,
            "alpha_min": self.alpha_min,
            "per_layer": {k: float(v.item()) for k, v in self.per_layer.items()},
        }

    @classmethod
    def from_dict(cls, d):
        state = cls(kind=d["kind"], lam=float(d["lambda"]),
                    alpha_min=float(d.get("alpha_min", ALPHA_MIN)))
        suffix = "M" if state.kind == "margin" else "alpha"
        for k, v in d.get("per_layer", {}).items():
            state.per_layer[k] = Tensor(float(v), requires_grad=True, name=f"{k}.{suffix}")
        return state


def reg_loss(reg, weights):
    """Unweighted regularizer summed over layers, as a taped scalar."""
    total = None
    for name, w in weights.items():
        term = reg.layer_loss(name, w)
        total = term if total is None else total + term
    return total


def total_loss(task_loss, reg, weights):
    """task_loss + lambda * sum of per-layer regularizer losses.

    ``weights`` maps layer name to the conv/linear weight Tensor; biases
    are never passed in.
    """
    if reg.lam < 0:
        raise DomainError("lambda must be non-negative")
    if reg.kind == "none" or reg.lam == 0 or not weights:
        return task_loss
    return task_loss + reg.lam * reg_loss(reg, weights)
