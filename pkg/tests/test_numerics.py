import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from adamshap.numerics import (
    CorrelationReport,
    DegenerateVarianceError,
    DimensionError,
    Rng,
    gaussian,
    matmul,
    midranks,
    pearson,
    spearman,
    uniform,
)


def test_matmul_identity_and_hand_case():
    np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[1, 0], [0, 1]]), [[1, 2], [3, 4]])
    np.testing.assert_array_equal(matmul([[1, 2]], [[3], [4]]), [[11]])


def test_matmul_matches_triple_loop():
    rng = Rng(5)
    a, b = rng.gaussian((5, 7)), rng.gaussian((7, 3))
    ref = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(7):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(matmul(a, b), ref, rtol=0, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


@pytest.mark.parametrize("seed", range(10))
def test_matmul_associative(seed):
    rng = Rng(seed)
    a, b, c = (np.eye(4) + 0.3 * rng.child(i).gaussian((4, 4)) for i in range(3))
    left = matmul(matmul(a, b), c)
    right = matmul(a, matmul(b, c))
    assert np.max(np.abs(left - right)) <= 1e-9 * np.max(np.abs(left))


def textbook_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / (sxx * syy) ** 0.5


def test_pearson_cases():
    assert pearson([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0, abs=1e-15)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-15)
    x, y = (1, 2, 3, 4), (1, 3, 2, 5)
    assert abs(pearson(x, y) - textbook_pearson(x, y)) <= 1e-12
    assert abs(pearson(x, y) - stats.pearsonr(x, y)[0]) <= 1e-12


def test_pearson_degenerate():
    with pytest.raises(DegenerateVarianceError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(DimensionError):
        pearson([1], [1])


def test_spearman_cases():
    assert spearman([1, 2, 3, 4], [2, 5, 7, 100]) == pytest.approx(1.0)
    assert spearman([1, 2, 3], [10, 100, 1000]) == pytest.approx(1.0)
    # midranks of (1, 1, 2) are (1.5, 1.5, 3)
    np.testing.assert_array_equal(midranks([1, 1, 2]), [1.5, 1.5, 3.0])
    expected = textbook_pearson([1.5, 1.5, 3.0], [1.0, 2.0, 3.0])
    assert abs(spearman([1, 1, 2], [3, 4, 5]) - expected) <= 1e-12
    assert abs(expected - stats.spearmanr([1, 1, 2], [3, 4, 5])[0]) <= 1e-12


finite = st.integers(-1000, 1000)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(finite, finite), min_size=3, max_size=20),
       st.floats(0.1, 10), st.floats(-5, 5))
def test_correlations_invariant_under_increasing_maps(pairs, scale, shift):
    x = np.array([p[0] for p in pairs], dtype=float)
    y = np.array([p[1] for p in pairs], dtype=float)
    if np.ptp(x) < 1e-6 or np.ptp(y) < 1e-6:
        return
    r = pearson(x, y)
    assert abs(r - pearson(scale * x + shift, y)) <= 1e-9
    assert abs(spearman(x, y) - spearman(np.exp(x / 1e3), y ** 3)) <= 1e-12
    assert abs(r) <= 1 + 1e-12


def test_correlation_report():
    rep = CorrelationReport.from_pairs([1, 2, 3, 4], [1, 3, 2, 5])
    assert rep.n == 4 and -1 <= rep.spearman_rho <= 1


def test_rng_determinism():
    a = Rng(0)
    first, second = gaussian(a, (2,)), gaussian(a, (2,))
    assert not np.array_equal(first, second)
    b = Rng(0)
    np.testing.assert_array_equal(gaussian(b, (2,)), first)
    np.testing.assert_array_equal(gaussian(b, (2,)), second)
    np.testing.assert_array_equal(Rng(3, 1, 2).uniform(5), Rng(3).child(1, 2).uniform(5))
    assert not np.array_equal(Rng(3, 1).uniform(5), Rng(3, 2).uniform(5))


def test_rng_moments_and_range():
    g = gaussian(Rng(11), 100_000)
    assert -0.02 <= g.mean() <= 0.02
    assert 0.98 <= g.std() <= 1.02
    u = uniform(Rng(12), 100_000)
    assert u.min() >= 0.0 and u.max() < 1.0
