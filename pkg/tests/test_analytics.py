import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from r2lab import analytics as A
from r2lab.errors import ConsistencyError, DomainError
from r2lab.models import mlp

spread = arrays(np.float64, st.integers(2, 60), elements=st.floats(-100, 100, allow_nan=False))


def test_layer_stats_example():
    s = A.layer_stats(np.array([-1.0, 2.0]), "x")
    assert (s.range, s.mean, s.min, s.max) == (3.0, 0.5, -1.0, 2.0)
    assert s.std == 1.5  # population std
    with pytest.raises(DomainError):
        A.layer_stats(np.array([1.0]))


def test_kurtosis_reference_distributions():
    rng = np.random.default_rng(7)
    assert A.kurtosis(rng.uniform(-0.3, 0.3, 1_000_000)) == pytest.approx(A.UNIFORM_KURTOSIS, abs=0.02)
    assert A.kurtosis(rng.standard_normal(1_000_000)) == pytest.approx(3.0, abs=0.05)
    assert A.kurtosis(np.full(4, 2.0)) is None


@given(spread, st.floats(0.01, 50), st.floats(-10, 10))
def test_affine_invariance(w, c, t):
    if np.ptp(w) < 1e-3:
        return
    a, b = A.layer_stats(w), A.layer_stats(c * w + t)
    assert b.range == pytest.approx(c * a.range, rel=1e-9)
    assert b.std == pytest.approx(c * a.std, rel=1e-9)
    assert b.kurtosis == pytest.approx(a.kurtosis, abs=1e-9)
    assert a.kurtosis >= 1 - 1e-12


def test_histogram_examples():
    _, counts = A.histogram(np.full(10, 0.4), 5)
    assert np.count_nonzero(counts) == 1
    _, counts = A.histogram(np.array([0.0, 1, 2, 3]), 2)
    np.testing.assert_array_equal(counts, [2, 2])
    with pytest.raises(DomainError):
        A.histogram(np.ones(3), 0)


@given(spread, st.integers(1, 40))
def test_histogram_is_a_partition(w, n_bins):
    edges, counts = A.histogram(w, n_bins)
    assert counts.sum() == w.size
    if np.ptp(w) > 0:
        assert edges[0] == w.min() and edges[-1] == w.max()


def test_histogram_text_columns():
    edges, counts = A.histogram(np.array([0.0, 1, 2, 3]), 2)
    assert A.histogram_text(edges, counts) == "0.75 2\n2.25 2\n"


def test_skew_examples():
    assert A.skew_check(np.array([-2.0, -1, 1, 2]))["asymmetry"] == 0.0
    assert A.skew_check(np.array([0.0, 0, 0, 10]))["asymmetry"] > 0
    assert A.skew_check(np.array([0.0, 0, 0, 10]))["mean_offset"] == 5.0


def test_stats_table_identical_models_all_ones():
    m = mlp(seed=3)
    rows = A.stats_table(m, m)
    assert [r["layer"] for r in rows] == ["fc1", "fc2", "fc3"]
    assert all(r["range_ratio"] == 1.0 and r["std_ratio"] == 1.0 for r in rows)


def test_stats_table_swap_transposes():
    a, b = mlp(seed=1).weights(), mlp(seed=2).weights()
    ab, ba = A.stats_table(a, b), A.stats_table(b, a)
    for x, y in zip(ab, ba):
        assert (x["range_a"], x["range_b"], x["std_a"], x["std_b"]) == \
               (y["range_b"], y["range_a"], y["std_b"], y["std_a"])


def test_stats_table_rejects_other_architectures():
    with pytest.raises(ConsistencyError):
        A.stats_table(mlp(seed=1), mlp((784, 32, 10), seed=1))


def test_reference_row_formats():
    row = A.RESNET18_CONV1_ROW
    assert row["range_a"] / row["range_b"] == pytest.approx(0.339, abs=1e-3)
    text = A.format_table([row], ["layer", "range_a", "range_b", "std_a", "std_b"])
    assert text == "layer,range_a,range_b,std_a,std_b\nconv1,0.63,1.86,0.11,0.13\n"
