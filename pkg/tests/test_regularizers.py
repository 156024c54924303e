import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from r2lab import regularizers as R
from r2lab import tensor as T
from r2lab.errors import DomainError
from r2lab.tensor import Tensor, finite_diff

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
vectors = arrays(np.float64, st.integers(1, 30), elements=finite)


def rel(a, b):
    a, b = np.atleast_1d(a), np.atleast_1d(b)
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


# -- L-infinity --------------------------------------------------------------------

def test_linf_loss_examples():
    assert R.linf_loss([np.array([0.5, -0.3, 0.2])]) == 0.5
    assert R.linf_loss([np.zeros(4)]) == 0.0
    assert R.linf_loss([np.array([0.5, -0.3]), np.array([-1.2])]) == pytest.approx(1.7, abs=1e-15)


def test_linf_grad_examples():
    np.testing.assert_array_equal(R.linf_grad(np.array([0.5, -0.3, 0.2])), [1, 0, 0])
    np.testing.assert_array_equal(R.linf_grad(np.array([0.4, -0.4])), [0.5, -0.5])


def test_linf_grad_matches_fd_without_ties(rng):
    for _ in range(20):
        w = rng.standard_normal(12)
        num = finite_diff(R.linf_loss, w)
        assert rel(R.linf_grad(w), num) <= 1e-6


def test_linf_empty_is_domain_error():
    with pytest.raises(DomainError):
        R.linf_loss([])
    with pytest.raises(DomainError):
        R.linf_loss([np.array([])])


@given(vectors, st.floats(-5, 5, allow_nan=False))
def test_linf_scales_with_abs_c(w, c):
    # exact when c is a power of two; otherwise up to one rounding
    assert R.linf_loss(c * w) == pytest.approx(abs(c) * R.linf_loss(w), rel=1e-15, abs=0)
    assert R.linf_loss(4.0 * w) == 4.0 * R.linf_loss(w)


@given(vectors)
def test_linf_zero_iff_all_zero(w):
    assert (R.linf_loss(w) == 0) == (not np.any(w))


# -- margin ---------------------------------------------------------------------------

W3 = np.array([0.5, -0.3, 0.2])


def test_margin_loss_examples():
    assert R.margin_loss(W3, 0.4) == pytest.approx(0.5, abs=1e-15)
    assert R.margin_loss(W3, 0.6) == 0.6
    assert R.margin_loss(W3, 0.0) == pytest.approx(1.0, abs=1e-15)


def test_margin_grad_examples():
    dw, dm = R.margin_grad(W3, 0.4)
    np.testing.assert_array_equal(dw, [1, 0, 0])
    assert dm == 0.0
    dw, dm = R.margin_grad(W3, 0.9)
    np.testing.assert_array_equal(dw, [0, 0, 0])
    assert dm == 1.0


def test_margin_grad_matches_fd(rng):
    for _ in range(20):
        w = rng.standard_normal(15)
        m = rng.uniform(0.3, 1.2)
        if np.abs(np.abs(w) - m).min() < 1e-3:
            continue
        dw, dm = R.margin_grad(w, m)
        assert rel(dw, finite_diff(lambda a: R.margin_loss(a, m), w)) <= 1e-6
        num_m = finite_diff(lambda a: R.margin_loss(w, a[0]), np.array([m]))[0]
        assert rel(dm, num_m) <= 1e-6


def test_negative_margin_uses_its_magnitude():
    assert R.margin_loss(W3, -0.4) == R.margin_loss(W3, 0.4)
    assert R.margin_grad(W3, -0.9)[1] == -1.0


@given(vectors)
def test_margin_zero_is_l1(w):
    assert R.margin_loss(w, 0.0) == pytest.approx(float(np.abs(w).sum()), rel=1e-12, abs=1e-12)


def test_init_margin_examples(rng):
    assert R.init_margin(np.array([-1.0, 1.0])) == 2.0
    assert R.init_margin(np.full(5, 0.3)) == pytest.approx(0.0, abs=1e-15)
    assert R.init_margin(rng.normal(0, 0.05, 10_000)) == pytest.approx(0.1, rel=0.05)
    with pytest.raises(DomainError):
        R.init_margin(np.array([1.0]))


# -- soft-min-max ---------------------------------------------------------------------

def test_smm_loss_examples():
    assert R.smm_loss(np.full(3, 0.7), 1.0) == pytest.approx(math.exp(-1), abs=1e-15)
    assert R.smm_loss(np.array([0.3, -2.0, 5.0]), 0.0) == pytest.approx(1.0, abs=1e-15)
    assert abs(R.smm_loss(np.array([-1.0, 1.0]), 20.0) - (2 + math.exp(-20))) <= 1e-8


def test_smm_constant_w_gradient_by_oracle():
    for alpha in (0.5, 3.0):
        w = np.full(4, -0.2)
        dw, da = R.smm_grad(w, alpha)
        np.testing.assert_allclose(dw, finite_diff(lambda a: R.smm_loss(a, alpha), w), atol=1e-9)
        assert da == pytest.approx(-math.exp(-alpha), abs=1e-12)


def test_smm_alpha_zero_gradient_matches_fd(rng):
    w = rng.standard_normal(7)
    dw, _ = R.smm_grad(w, 0.0)
    assert rel(dw, finite_diff(lambda a: R.smm_loss(a, 0.0), w)) <= 1e-6


def test_smm_grad_matches_fd(rng):
    for _ in range(20):
        w = rng.standard_normal(rng.integers(2, 20))
        alpha = rng.uniform(0.1, 10)
        dw, da = R.smm_grad(w, alpha)
        assert rel(dw, finite_diff(lambda a: R.smm_loss(a, alpha), w)) <= 1e-5
        num_a = finite_diff(lambda a: R.smm_loss(w, a[0]), np.array([alpha]))[0]
        assert rel(da, num_a) <= 1e-5


def test_smm_negative_alpha_rejected():
    with pytest.raises(DomainError):
        R.smm_loss(W3, -0.1)


@given(vectors, st.floats(0, 60, allow_nan=False))
def test_soft_extrema_bracketed(w, alpha):
    s_max, s_min, _, _ = R._soft_extrema(w, alpha)
    lo, hi = w.min(), w.max()
    tol = 1e-12 * max(1.0, np.abs(w).max())
    assert lo - tol <= s_min <= s_max + tol and s_max <= hi + tol
    assert -tol <= s_max - s_min <= (hi - lo) + tol


@given(vectors, st.floats(0, 60, allow_nan=False), st.floats(0, 3, allow_nan=False))
def test_all_losses_nonnegative(w, alpha, m):
    assert R.linf_loss(w) >= 0
    assert R.margin_loss(w, m) >= 0
    assert R.smm_loss(w, alpha) >= 0


# -- taped ops and state ---------------------------------------------------------------

@pytest.mark.parametrize("kind", ["linf", "margin", "smm"])
def test_taped_ops_feed_the_analytic_gradients(rng, kind):
    w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    reg = R.RegState.create(kind, {"fc": w}, lam=0.01)
    T.backward(R.reg_loss(reg, {"fc": w}))
    if kind == "linf":
        expected = R.linf_grad(w.data)
    elif kind == "margin":
        expected = R.margin_grad(w.data, reg.per_layer["fc"].data)[0]
    else:
        expected = R.smm_grad(w.data, reg.per_layer["fc"].data)[0]
    np.testing.assert_array_equal(w.grad, expected)


def test_total_loss_examples():
    task = Tensor(1.25)
    w = Tensor([[0.5, -0.2]], requires_grad=True)
    assert R.total_loss(task, R.RegState("linf", lam=0.0), {"fc": w}) is task
    out = R.total_loss(task, R.RegState("linf", lam=0.01), {"fc": w})
    assert out.item() == pytest.approx(1.255, abs=1e-15)


def test_total_loss_gradients_reach_task_and_reg(rng):
    x = rng.standard_normal((5, 4))
    y = rng.integers(0, 3, 5)
    w0 = rng.standard_normal((4, 3))

    def loss(wt):
        task = T.softmax_ce(Tensor(x) @ wt, y)
        return R.total_loss(task, R.RegState("linf", lam=0.5), {"fc": wt})

    w = Tensor(w0, requires_grad=True)
    T.backward(loss(w))
    num = finite_diff(lambda a: loss(Tensor(a)).item(), w0)
    assert rel(w.grad, num) <= 1e-6
    only_task = Tensor(w0, requires_grad=True)
    T.backward(T.softmax_ce(Tensor(x) @ only_task, y))
    assert not np.allclose(w.grad, only_task.grad)


def test_regstate_create_and_round_trip(rng):
    ws = {"a": Tensor(rng.standard_normal(50)), "b": Tensor(rng.standard_normal((4, 4)))}
    m = R.RegState.create("margin", ws, lam=0.02)
    assert set(m.per_layer) == {"a", "b"}
    assert m.per_layer["a"].item() == pytest.approx(2 * ws["a"].data.std())
    back = R.RegState.from_dict(m.to_dict())
    assert back.to_dict() == m.to_dict()
    s = R.RegState.create("smm", ws)
    assert all(t.item() == 0.1 for t in s.per_layer.values())
    assert R.RegState.create("linf", ws).per_layer == {}


def test_regstate_clamps_alpha():
    s = R.RegState.create("smm", {"a": Tensor(np.arange(3.0))})
    s.per_layer["a"].data = np.array(-4.0)
    s.clamp()
    assert s.per_layer["a"].item() == R.ALPHA_MIN


def test_regstate_rejects_bad_inputs():
    with pytest.raises(DomainError):
        R.RegState("l2")
    with pytest.raises(DomainError):
        R.RegState("linf", lam=-1)
