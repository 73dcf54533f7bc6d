"""Pareto-smoothed importance sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.typing import NDArray
from scipy.special import logsumexp

KHAT_THRESHOLD = 0.7


class GPDFit(NamedTuple):
    khat: float
    sigma: float


def fit_generalized_pareto(sample, regularize: bool = True) -> GPDFit:
    """Shape and scale of a generalized Pareto distribution fitted to exceedances.

    Zhang & Stephens (2009) profile-likelihood estimator: the quadrature
    posterior mean of ``b = -k / sigma`` over a fixed grid of ``30 + sqrt(n)``
    points, then ``k`` given ``b``.  With ``regularize`` the shape is
    shrunk toward 0.5 with the weight of ten pseudo-observations, as in the
    reference PSIS procedure.  A constant sample returns ``khat = -inf``.

    Parameters
    ----------
    sample : array_like
        Positive exceedances over the tail threshold (at least 5 values).
    regularize : bool
        Apply the weakly informative shrinkage of ``khat``.

    Returns
    -------
    GPDFit
        ``(khat, sigma)`` in the convention where ``k > 0`` is a heavy tail.
    """
    x = np.sort(np.asarray(sample, dtype=float).ravel())
    n = x.size
    if n < 5:
        raise ValueError("need at least 5 tail values")
    if not np.isfinite(x).all() or x[0] < 0:
        raise ValueError("tail values must be finite and non-negative")
    if x[-1] == x[0]:
        return GPDFit(-math.inf, 0.0)
    m = 30 + int(math.sqrt(n))
    quartile = x[int(n / 4 + 0.5) - 1]
    if quartile <= 0:
        quartile = x[x > 0][0]
    b = 1.0 - np.sqrt(m / (np.arange(1, m + 1) - 0.5))
    b = b / (3.0 * quartile) + 1.0 / x[-1]
    k = np.log1p(-b[:, None] * x[None, :]).mean(axis=1)
    profile = n * (np.log(-b / k) - k - 1.0)
    weights = np.exp(profile - logsumexp(profile))
    keep = weights >= 10 * np.finfo(float).eps
    weights = weights[keep] / weights[keep].sum()
    b_post = float(np.sum(b[keep] * weights))
    k_post = float(np.log1p(-b_post * x).mean())
    sigma = -k_post / b_post
    if regularize:
        k_post = (n * k_post + 10 * 0.5) / (n + 10)
    if not (math.isfinite(k_post) and math.isfinite(sigma) and sigma > 0):
        return GPDFit(math.nan, math.nan)
    return GPDFit(k_post, sigma)


def gpd_quantile(p, khat: float, sigma: float):
    """Inverse CDF of the zero-location generalized Pareto distribution."""
    p = np.asarray(p, dtype=float)
    if abs(khat) < 10 * np.finfo(float).eps:
        return -sigma * np.log1p(-p)
    return sigma * np.expm1(-khat * np.log1p(-p)) / khat


def tail_length(n_draws: int) -> int:
    return int(min(math.ceil(0.2 * n_draws), math.ceil(3 * math.sqrt(n_draws))))


@dataclass
class ImportanceWeights:
    """Normalized smoothed log-weights (rows sum to one on the natural scale)."""

    log_weights: NDArray[np.float64]  # (N, S)
    khat: NDArray[np.float64]  # (N,)

    @property
    def weights(self) -> NDArray[np.float64]:
        return np.exp(self.log_weights)

    @property
    def max_khat(self) -> float:
        return float(np.max(self.khat)) if self.khat.size else -math.inf

    @property
    def n_unreliable(self) -> int:
        return int(np.sum(self.khat > KHAT_THRESHOLD))


def _smooth_row(log_ratios: NDArray) -> tuple[NDArray, float]:
    lw = log_ratios - log_ratios.max()
    S = lw.size
    M = tail_length(S)
    if M < 5 or M >= S:
        return lw - logsumexp(lw), math.inf
    order = np.argsort(lw, kind="stable")
    tail = order[-M:]
    cutoff = lw[order[-M - 1]]
    exceed = np.exp(lw[tail]) - math.exp(cutoff)
    try:
        khat, sigma = fit_generalized_pareto(exceed)
    except ValueError:
        khat, sigma = math.nan, math.nan
    if math.isnan(khat):
        # truncation only; raw weights are already at most the raw maximum
        khat = math.inf
    elif math.isfinite(khat):
        smoothed = gpd_quantile((np.arange(1, M + 1) - 0.5) / M, khat, sigma) + math.exp(cutoff)
        lw = lw.copy()
        lw[tail] = np.minimum(np.log(smoothed), 0.0)
    return lw - logsumexp(lw), khat


def smooth_importance_weights(log_ratios) -> ImportanceWeights:
    """Pareto-smooth importance log-ratios.

    ``log_ratios`` is ``(S,)`` or ``(N, S)``; for leave-one-out each row is
    the negated pointwise log-likelihood of one examinee.  The largest
    ``M = min(ceil(0.2 S), ceil(3 sqrt(S)))`` weights of each row are
    replaced by expected order statistics of the fitted generalized Pareto
    tail and truncated at the raw maximum.
    """
    r = np.atleast_2d(np.asarray(log_ratios, dtype=float))
    out = np.empty_like(r)
    khat = np.empty(r.shape[0])
    for e in range(r.shape[0]):
        out[e], khat[e] = _smooth_row(r[e])
    return ImportanceWeights(out, khat)
