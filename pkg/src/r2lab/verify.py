"""Oracle suites: finite-difference gradient checks, limit properties and
DKM-vs-Lloyd agreement.

Every check resolves the function under test through its module at call
time (``regularizers.margin_grad`` rather than a bound import), so a
patched implementation is what gets checked.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import palettizers, quantizers, regularizers
from .tensor import finite_diff

EPS = 1e-5
GRAD_TOL = 1e-5
DKM_TOL = 1e-4
N_INSTANCES = 100
KINK_GAP = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    detail: str = ""
    seconds: float = 0.0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: worst={self.worst:.3g}{extra} [{self.seconds:.1f}s]"


def rel_err(analytic, numeric):
    """Max abs difference scaled by the larger of the two gradients' max norms."""
    a = np.atleast_1d(np.asarray(analytic, dtype=np.float64))
    n = np.atleast_1d(np.asarray(numeric, dtype=np.float64))
    if a.shape != n.shape:
        return math.inf
    scale = max(np.abs(a).max(), np.abs(n).max(), 1e-12)
    return float(np.abs(a - n).max() / scale)


def _run(name, gen, check, n, tol):
    t0 = time.perf_counter()
    worst, bad = 0.0, None
    rng = np.random.default_rng(_seed(name))
    for i in range(n):
        err = check(gen(rng))
        if not err <= worst:
            worst = err
        if not err <= tol and bad is None:
            bad = i
    detail = f"tol {tol:g}" + (f", first failure at instance {bad}" if bad is not None else "")
    return CheckResult(name, bad is None, worst, detail, time.perf_counter() - t0)


def _seed(name):
    # stable across processes, unlike hash()
    return sum((i + 1) * ord(c) for i, c in enumerate(name))


def _fd(f, x):
    return finite_diff(f, x, EPS)


def _fd_scalar(f, x):
    return float(_fd(lambda a: f(float(a[0])), np.array([x]))[0])


# -- instance generators ----------------------------------------------------------------

def _unique_max_tensor(rng):
    while True:
        w = rng.standard_normal(rng.integers(3, 30))
        mag = np.sort(np.abs(w))
        if mag[-1] - mag[-2] > 10 * KINK_GAP:
            return w


def _margin_instance(rng):
    m = rng.uniform(0.3, 1.5) * rng.choice([-1.0, 1.0])
    while True:
        w = rng.standard_normal(rng.integers(3, 30))
        if np.abs(np.abs(w) - abs(m)).min() > KINK_GAP and np.abs(w).min() > KINK_GAP:
            return w, m


def _smm_instance(rng):
    return rng.standard_normal(rng.integers(3, 30)), rng.uniform(0.1, 20.0)


def _lsq_instance(rng):
    bits = int(rng.integers(2, 5))
    qn, qp = quantizers.levels(bits)
    s = rng.uniform(0.05, 0.5)
    while True:
        v = rng.uniform(-qn - 2, qp + 2, rng.integers(3, 30))
        if np.abs(v + qn).min() > KINK_GAP and np.abs(v - qp).min() > KINK_GAP:
            return v * s, s, bits, rng.standard_normal(v.size)


def _pact_instance(rng):
    a = rng.uniform(0.5, 6.0)
    while True:
        x = rng.uniform(-2.0, a + 2.0, rng.integers(3, 30))
        if np.abs(x).min() > KINK_GAP and np.abs(x - a).min() > KINK_GAP:
            return x, a, rng.standard_normal(x.size)


def _dkm_instance(rng):
    d = int(rng.choice([1, 2]))
    k = int(rng.choice([2, 4]))
    n = int(rng.integers(k, 12)) * d
    w = rng.standard_normal(n)
    codebook = rng.standard_normal((k, d))
    tau = rng.uniform(0.2, 2.0)
    return w, codebook, tau, d, rng.standard_normal(n)


# -- gradient checks --------------------------------------------------------------------

def check_linf(w):
    analytic = regularizers.linf_grad(w)
    return rel_err(analytic, _fd(regularizers.linf_loss, w))


def check_margin(inst):
    w, m = inst
    dw, dm = regularizers.margin_grad(w, m)
    num_w = _fd(lambda a: regularizers.margin_loss(a, m), w)
    num_m = _fd_scalar(lambda mm: regularizers.margin_loss(w, mm), m)
    return max(rel_err(dw, num_w), rel_err(dm, num_m))


def check_smm(inst):
    w, alpha = inst
    dw, da = regularizers.smm_grad(w, alpha)
    num_w = _fd(lambda a: regularizers.smm_loss(a, alpha), w)
    num_a = _fd_scalar(lambda al: regularizers.smm_loss(w, al), alpha)
    return max(rel_err(dw, num_w), rel_err(da, num_a))


def _lsq_surrogate(w, s, bits, resid, g):
    # STE surrogate: in-range values move as w + s * (rounding residual, held fixed)
    qn, qp = quantizers.levels(bits)
    v = w / s
    inside = (v >= -qn) & (v <= qp)
    q = np.where(inside, v + resid, np.clip(v, -qn, qp))
    return float((g * q * s).sum())


def check_lsq(inst):
    w, s, bits, g = inst
    v = w / s
    resid = quantizers.round_half_away(v) - v
    dw, ds = quantizers.lsq_grads(g, w, s, bits, w.size)
    num_w = _fd(lambda a: _lsq_surrogate(a, s, bits, resid, g), w)
    num_s = _fd_scalar(lambda ss: _lsq_surrogate(w, ss, bits, resid, g), s)
    num_s *= quantizers.lsq_step_scale(w.size, bits)
    return max(rel_err(dw, num_w), rel_err(ds, num_s))


def check_pact(inst):
    x, a, g = inst
    _, pass_mask, sat_mask = quantizers.pact_clip(x, a)
    dx, da = g * pass_mask, float((g * sat_mask).sum())

    def loss(xx, aa):
        return float((g * quantizers.pact_clip(xx, aa)[0]).sum())

    num_x = _fd(lambda xx: loss(xx, a), x)
    num_a = _fd_scalar(lambda aa: loss(x, aa), a)
    return max(rel_err(dx, num_x), rel_err(da, num_a))


def check_dkm(inst):
    w, codebook, tau, d, g = inst
    _, dw, _ = palettizers.dkm_forward_backward(w, codebook, tau, d, grad_out=g)

    def loss(a):
        w_hat, _, _ = palettizers.dkm_forward_backward(a, codebook, tau, d)
        return float((g * w_hat).sum())

    return rel_err(dw, _fd(loss, w))


GRAD_CHECKS = [
    ("grad.linf", _unique_max_tensor, check_linf, GRAD_TOL),
    ("grad.margin", _margin_instance, check_margin, GRAD_TOL),
    ("grad.smm", _smm_instance, check_smm, GRAD_TOL),
    ("grad.lsq_step", _lsq_instance, check_lsq, GRAD_TOL),
    ("grad.pact", _pact_instance, check_pact, GRAD_TOL),
    ("grad.dkm", _dkm_instance, check_dkm, DKM_TOL),
]


def grad_suite(n=N_INSTANCES):
    return [_run(name, gen, check, n, tol) for name, gen, check, tol in GRAD_CHECKS]


# -- limit properties -------------------------------------------------------------------

ALPHA_GRID = (0.0, 1.0, 5.0, 20.0, 50.0)


LIMIT_ALPHA = 50.0
# With extrema at least this far from every other value, the soft extrema
# lie within (n - 1) * gap * exp(-alpha * gap) of the hard ones: < 1e-9 here.
LIMIT_GAP = 0.5


def range_instance(rng, gap=LIMIT_GAP, size=(4, 40)):
    """Random tensor with range >= 0.1 whose max and min are unique by ``gap``."""
    while True:
        w = rng.standard_normal(rng.integers(*size)) * rng.uniform(0.5, 3.0)
        s = np.sort(w)
        if s[-1] - s[0] >= 0.1 and s[-1] - s[-2] >= gap and s[1] - s[0] >= gap:
            return w


def limit_distance(w, alpha):
    """|smm_loss(W, alpha) - (range(W) + e^-alpha)|."""
    return abs(regularizers.smm_loss(w, alpha) - (float(np.ptp(w)) + math.exp(-alpha)))


def check_smm_limit(w):
    return limit_distance(w, LIMIT_ALPHA)


def check_smm_monotone(w):
    """Largest increase of the limit distance along the alpha grid (0 when shrinking)."""
    dist = [limit_distance(w, a) for a in ALPHA_GRID]
    return max(0.0, max(b - a for a, b in zip(dist, dist[1:])))


def check_margin_zero(w):
    return abs(regularizers.margin_loss(w, 0.0) - float(np.abs(w).sum()))


def _l1_instance(rng):
    return rng.standard_normal(rng.integers(1, 50)) * rng.uniform(0.01, 10.0)


def limits_suite(n=N_INSTANCES):
    return [
        _run("limits.smm_alpha50", range_instance, check_smm_limit, n, 1e-6),
        _run("limits.smm_monotone", range_instance, check_smm_monotone, n, 1e-12),
        _run("limits.margin_zero_is_l1", _l1_instance, check_margin_zero, n, 1e-12),
    ]


# -- palette agreement ------------------------------------------------------------------

LLOYD_TAU = 1e-6


def _lloyd_instance(rng):
    k = int(rng.choice([2, 4, 16]))
    d = int(rng.choice([1, 2]))
    while True:
        codebook = rng.standard_normal((k, d))
        sep = np.sqrt(palettizers.sq_dist(codebook, codebook)[~np.eye(k, dtype=bool)])
        if sep.min() < 1e-3:
            continue
        groups = rng.standard_normal((int(rng.integers(k, 6 * k)), d))
        dist = np.sort(palettizers.sq_dist(groups, codebook), axis=1)
        # nearest centroid must win by a margin far above tau
        if (dist[:, 1] - dist[:, 0]).min() > 1e-4:
            return groups, codebook


def check_dkm_lloyd(inst):
    """0 when indices match exactly and centroids agree; else the mismatch size."""
    groups, codebook = inst
    cent, assign = palettizers.hard_snapshot(groups, codebook, LLOYD_TAU)
    ref_assign = palettizers.sq_dist(groups, codebook).argmin(axis=1)
    ref_cent = palettizers.lloyd_update(groups, ref_assign, codebook)
    mismatched = int((assign != ref_assign).sum())
    if mismatched:
        return float(mismatched)
    return float(np.abs(cent - ref_cent).max())


def palette_suite(n=N_INSTANCES):
    return [_run("palette.dkm_vs_lloyd", _lloyd_instance, check_dkm_lloyd, n, 1e-9)]


SUITES = {"grad": grad_suite, "limits": limits_suite, "palette": palette_suite}


def run_suite(name, n=N_INSTANCES):
    if name == "all":
        return [r for suite in SUITES.values() for r in suite(n)]
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; expected one of grad, limits, palette, all")
    return SUITES[name](n)
