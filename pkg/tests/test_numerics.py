import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from hetofedbandit.numerics import (
    NoncentralChiSq,
    NumericError,
    gram_rank,
    lambda_extremes,
    logdet,
    matrix_rank,
    mle_estimate,
    nc_chisq_cdf,
    nc_chisq_quantile,
    ncx2_cdf_array,
    pinv_psd,
    ridge_estimate,
)


def test_mle_recovers_noise_free_parameter():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((40, 6))
    theta = rng.standard_normal(6)
    assert np.allclose(mle_estimate(X, X @ theta), theta, atol=1e-10)


def test_mle_rank_deficient_is_minimum_norm():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((3, 5))
    y = rng.standard_normal(3)
    est = mle_estimate(X, y)
    assert np.allclose(est, np.linalg.pinv(X) @ y, atol=1e-9)
    assert np.allclose(X @ est, y, atol=1e-9)


def test_mle_shape_mismatch():
    with pytest.raises(ValueError):
        mle_estimate(np.ones((3, 2)), np.ones(4))


def test_ridge_matches_solve_and_rejects_indefinite():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((8, 4))
    V = A.T @ A + 0.1 * np.eye(4)
    b = rng.standard_normal(4)
    assert np.allclose(ridge_estimate(V, b), np.linalg.solve(V, b))
    with pytest.raises(NumericError):
        ridge_estimate(-np.eye(3), np.ones(3))
    with pytest.raises(NumericError):
        ridge_estimate(np.full((2, 2), np.nan), np.ones(2))


def test_rank_and_extremes():
    assert matrix_rank(np.zeros((3, 3))) == 0
    assert matrix_rank(np.outer([1, 2, 3], [1, 0, 1])) == 1
    assert matrix_rank(np.eye(4)) == 4
    lo, hi = lambda_extremes(np.diag([3.0, -1.0, 2.0]))
    assert (lo, hi) == (-1.0, 3.0)
    G = np.stack([np.eye(3), np.diag([1.0, 0.0, 0.0])])
    assert gram_rank(G).tolist() == [3, 1]


def test_logdet_and_pinv():
    A = np.diag([2.0, 3.0])
    assert logdet(A) == pytest.approx(math.log(6.0))
    with pytest.raises(NumericError):
        logdet(np.diag([1.0, -1.0]))
    P = np.diag([4.0, 0.0])
    assert np.allclose(pinv_psd(P), np.diag([0.25, 0.0]))


@pytest.mark.parametrize("df,psi", [(1, 0.0), (3, 1.5), (5, 3.0), (25, 100.0), (10, 2500.0)])
def test_cdf_matches_scipy(df, psi):
    dist = NoncentralChiSq(df, psi)
    grid = np.linspace(0.01, df + psi + 8 * math.sqrt(2 * (df + 2 * psi)), 30)
    ref = stats.ncx2.cdf(grid, df, psi) if psi > 0 else stats.chi2.cdf(grid, df)
    ours = np.array([nc_chisq_cdf(x, dist) for x in grid])
    assert np.max(np.abs(ours - ref)) < 1e-9
    assert np.allclose(ncx2_cdf_array(grid, df, psi), ours, atol=1e-12)


def test_cdf_edge_values():
    dist = NoncentralChiSq(4, 2.0)
    assert nc_chisq_cdf(0.0, dist) == 0.0
    assert nc_chisq_cdf(-3.0, dist) == 0.0
    assert nc_chisq_cdf(1e6, dist) == pytest.approx(1.0)
    # zero degrees of freedom with zero shift is the point mass at 0
    assert ncx2_cdf_array([0.5], [0], [0.0])[0] == 1.0


def test_distribution_validation():
    with pytest.raises(ValueError):
        NoncentralChiSq(0, 1.0)
    with pytest.raises(ValueError):
        NoncentralChiSq(2, -1.0)
    with pytest.raises(ValueError):
        nc_chisq_quantile(1.0, NoncentralChiSq(2, 1.0))
    with pytest.raises(ValueError):
        nc_chisq_quantile(0.0, NoncentralChiSq(2, 1.0))


def test_quantile_matches_scipy():
    for df, psi, p in [(1, 0.0, 0.5), (5, 3.0, 0.9), (25, 100.0, 1 - 0.1 / 900), (25, 100.0, 1e-4)]:
        q = nc_chisq_quantile(p, NoncentralChiSq(df, psi))
        ref = stats.ncx2.ppf(p, df, psi) if psi > 0 else stats.chi2.ppf(p, df)
        assert q == pytest.approx(ref, rel=1e-6)


@settings(max_examples=60, deadline=None)
@given(
    df=st.integers(1, 40),
    psi=st.floats(0.0, 500.0),
    p=st.floats(1e-6, 1 - 1e-6),
)
def test_quantile_roundtrip(df, psi, p):
    dist = NoncentralChiSq(df, psi)
    assert nc_chisq_cdf(nc_chisq_quantile(p, dist), dist) == pytest.approx(p, abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(df=st.integers(1, 30), psi=st.floats(0.0, 200.0), a=st.floats(0.0, 400.0), b=st.floats(0.0, 400.0))
def test_cdf_monotone_in_x(df, psi, a, b):
    dist = NoncentralChiSq(df, psi)
    lo, hi = min(a, b), max(a, b)
    assert nc_chisq_cdf(lo, dist) <= nc_chisq_cdf(hi, dist) + 1e-12


@settings(max_examples=40, deadline=None)
@given(df=st.integers(1, 30), psi=st.floats(0.0, 100.0), extra=st.floats(0.1, 50.0), x=st.floats(0.1, 300.0))
def test_cdf_decreasing_in_noncentrality(df, psi, extra, x):
    # a larger shift moves mass to the right
    assert nc_chisq_cdf(x, NoncentralChiSq(df, psi + extra)) <= nc_chisq_cdf(x, NoncentralChiSq(df, psi)) + 1e-12


def test_monte_carlo_oracle_small():
    rng = np.random.default_rng(3)
    df, psi = 5, 3.0
    shift = np.zeros(df)
    shift[0] = math.sqrt(psi)
    draws = np.sum((rng.standard_normal((200_000, df)) + shift) ** 2, axis=1)
    grid = np.quantile(draws, np.linspace(0.05, 0.95, 10))
    emp = np.searchsorted(np.sort(draws), grid, side="right") / draws.size
    ours = ncx2_cdf_array(grid, df, psi)
    assert np.max(np.abs(emp - ours)) < 5e-3
