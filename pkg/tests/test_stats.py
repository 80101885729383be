import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from cognilab.stats import StatsError, betainc, paired_permutation_test, paired_t_test, t_two_sided_p


def test_equal_samples_p_one():
    r = paired_permutation_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert r.p_value == 1.0


def test_all_positive_three_exhaustive():
    r = paired_permutation_test([1, 1, 1], [0, 0, 0])
    assert r.p_value == 0.25 and r.method == "exhaustive"


def test_monte_carlo_close_to_exhaustive():
    rng = np.random.default_rng(0)
    for _ in range(3):
        a, b = rng.normal(0.4, 1, 10), rng.normal(0, 1, 10)
        ex = paired_permutation_test(a, b).p_value
        mc = paired_permutation_test(a, b, resamples=20000, method="monte_carlo").p_value
        assert abs(ex - mc) <= 0.02


def test_large_n_uses_monte_carlo():
    rng = np.random.default_rng(1)
    r = paired_permutation_test(rng.normal(size=25), rng.normal(size=25), resamples=500)
    assert r.method == "monte_carlo" and 1 / 501 <= r.p_value <= 1


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=8), st.floats(0.01, 100))
def test_permutation_scale_invariant(d, c):
    d = np.array(d)
    p1 = paired_permutation_test(d, np.zeros_like(d)).p_value
    p2 = paired_permutation_test(c * d, np.zeros_like(d)).p_value
    assert p1 == p2
    assert 0 <= p1 <= 1


def test_t_example_and_antisymmetry():
    r = paired_t_test([1, 2, 3], [0, 0, 0])
    assert r.statistic == pytest.approx(3.4641, abs=1e-4) and r.df == 2
    s = paired_t_test([0, 0, 0], [1, 2, 3])
    assert s.statistic == -r.statistic and s.p_value == r.p_value


def _t_pdf(x, df):
    c = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)) / math.sqrt(df * math.pi)
    return c * (1 + x * x / df) ** (-(df + 1) / 2)


@pytest.mark.parametrize("t,df", [(0.5, 1), (2.1, 3), (3.4641, 2), (-1.7, 9), (4.0, 30)])
def test_t_p_matches_quadrature(t, df):
    tail, _ = integrate.quad(_t_pdf, abs(t), np.inf, args=(df,), epsabs=1e-13, epsrel=1e-12)
    assert t_two_sided_p(t, df) == pytest.approx(2 * tail, abs=1e-6)


def test_betainc_edges():
    assert betainc(2, 3, 0.0) == 0.0 and betainc(2, 3, 1.0) == 1.0
    assert betainc(1, 1, 0.3) == pytest.approx(0.3)
    with pytest.raises(StatsError):
        betainc(1, 1, 1.5)


def test_errors():
    with pytest.raises(StatsError):
        paired_t_test([1, 2, 3], [0, 1, 2])
    with pytest.raises(StatsError):
        paired_permutation_test([1, 2], [1])
    with pytest.raises(StatsError):
        paired_permutation_test([1], [2])
    with pytest.raises(StatsError):
        paired_permutation_test([1, 2], [0, 0], method="bogus")
