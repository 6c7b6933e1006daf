"""Linear-algebra and distribution primitives shared by the bandit modules."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

# relative singular-value cutoff for generalized inverses and ranks
PINV_RTOL = 1e-10
# Poisson tail mass allowed outside the mixture series
SERIES_TAIL = 1e-12


class NumericError(ArithmeticError):
    """A factorization or solve failed (e.g. matrix not positive definite)."""


def _sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def _check_finite(A: np.ndarray) -> None:
    if not np.all(np.isfinite(A)):
        raise NumericError("matrix has non-finite entries")


def pinv_psd(G: np.ndarray, rtol: float = PINV_RTOL) -> np.ndarray:
    """Moore-Penrose inverse of a symmetric PSD matrix (batched over leading axes)."""
    w, Q = np.linalg.eigh(_sym(G))
    wmax = np.max(np.abs(w), axis=-1, keepdims=True)
    keep = w > rtol * wmax
    inv_w = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    return (Q * inv_w[..., None, :]) @ np.swapaxes(Q, -1, -2)


def gram_rank(G: np.ndarray, rtol: float = PINV_RTOL) -> np.ndarray:
    """Rank of symmetric PSD matrices from their eigenvalues (batched)."""
    w = np.linalg.eigvalsh(_sym(G))
    wmax = np.max(np.abs(w), axis=-1, keepdims=True)
    return np.sum(w > rtol * np.maximum(wmax, np.finfo(float).tiny), axis=-1)


def mle_estimate(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Minimum-norm least squares: ``pinv(X^T X) X^T y``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"design has {X.shape[0]} rows but reward vector has {y.shape[0]}")
    return mle_from_gram(X.T @ X, X.T @ y)


def mle_from_gram(G: np.ndarray, c: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", pinv_psd(G), c)


def ridge_estimate(Vbar: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``Vbar theta = b`` for symmetric positive-definite ``Vbar``."""
    Vbar = np.asarray(Vbar, dtype=float)
    _check_finite(Vbar)
    try:
        L = np.linalg.cholesky(_sym(Vbar))
    except np.linalg.LinAlgError as exc:
        raise NumericError("ridge system matrix is not positive definite") from exc
    z = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, z)


def matrix_rank(A: np.ndarray, tol: float = PINV_RTOL) -> int:
    """Number of singular values above ``tol`` times the largest one."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return 0
    s = np.linalg.svd(A, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def lambda_extremes(A: np.ndarray) -> tuple[float, float]:
    A = np.asarray(A, dtype=float)
    _check_finite(A)
    w = np.linalg.eigvalsh(_sym(A))
    return float(w[0]), float(w[-1])


def logdet(A: np.ndarray) -> float:
    """Log-determinant of a PD matrix through its Cholesky factor."""
    A = np.asarray(A, dtype=float)
    _check_finite(A)
    try:
        L = np.linalg.cholesky(_sym(A))
    except np.linalg.LinAlgError as exc:
        raise NumericError("logdet of a matrix that is not positive definite") from exc
    return float(2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1))))


@dataclass(frozen=True)
class NoncentralChiSq:
    df: int
    psi: float

    def __post_init__(self):
        if self.df < 1:
            raise ValueError(f"df must be >= 1, got {self.df}")
        if not self.psi >= 0:
            raise ValueError(f"non-centrality must be >= 0, got {self.psi}")


@functools.lru_cache(maxsize=4096)
def _poisson_window(mean: float) -> tuple[np.ndarray, np.ndarray]:
    if mean == 0.0:
        return np.zeros(1, dtype=int), np.ones(1)
    lo = int(stats.poisson.ppf(SERIES_TAIL / 4, mean))
    hi = int(stats.poisson.isf(SERIES_TAIL / 4, mean)) + 1
    js = np.arange(max(lo, 0), hi + 1)
    return js, stats.poisson.pmf(js, mean)


def ncx2_cdf_array(x, df, psi) -> np.ndarray:
    """Vectorized Poisson-mixture CDF of the non-central chi-squared law.

    ``df`` may contain zeros; a zero-df central component is the point mass at 0.
    """
    x, df, psi = np.broadcast_arrays(
        np.asarray(x, dtype=float), np.asarray(df, dtype=float), np.asarray(psi, dtype=float)
    )
    out = np.zeros(x.shape)
    pos = x > 0
    if not np.any(pos):
        return out
    xs, ks, ps = x[pos], df[pos], psi[pos]
    half = ps / 2.0
    # one shared window covering every mean keeps the evaluation vectorized
    js_lo, _ = _poisson_window(float(np.min(half)))
    js_hi, _ = _poisson_window(float(np.max(half)))
    js = np.arange(js_lo[0], js_hi[-1] + 1)
    with np.errstate(divide="ignore"):
        logw = stats.poisson.logpmf(js[None, :], half[:, None])
    w = np.exp(logw)
    shape = (ks[:, None] + 2.0 * js[None, :]) / 2.0
    central = np.where(shape > 0, special.gammainc(np.where(shape > 0, shape, 1.0), xs[:, None] / 2.0), 1.0)
    out[pos] = np.clip(np.sum(w * central, axis=1), 0.0, 1.0)
    return out


def nc_chisq_cdf(x: float, dist: NoncentralChiSq) -> float:
    if x <= 0:
        return 0.0
    js, w = _poisson_window(dist.psi / 2.0)
    central = special.gammainc((dist.df + 2.0 * js) / 2.0, x / 2.0)
    return float(min(1.0, max(0.0, np.dot(w, central))))


def nc_chisq_quantile(p: float, dist: NoncentralChiSq, atol: float = 1e-9) -> float:
    """Inverse CDF by bracketing and bisection."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    return _quantile(p, dist.df, dist.psi, atol)


@functools.lru_cache(maxsize=8192)
def _quantile(p: float, df: int, psi: float, atol: float) -> float:
    dist = NoncentralChiSq(df, psi)
    lo = 0.0
    hi = df + psi + 40.0 * math.sqrt(2.0 * (df + 2.0 * psi)) + 40.0
    while nc_chisq_cdf(hi, dist) < p:
        lo, hi = hi, 2.0 * hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f = nc_chisq_cdf(mid, dist)
        if f < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * max(1.0, hi):
            break
    x = 0.5 * (lo + hi)
    if abs(nc_chisq_cdf(x, dist) - p) > atol and hi - lo > 1e-12 * max(1.0, hi):
        raise NumericError(f"quantile bisection did not converge for p={p}, {dist}")
    return x
