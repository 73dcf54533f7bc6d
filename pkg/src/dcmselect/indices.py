"""Pointwise marginal log-likelihoods and the DIC, WAIC and PSIS-LOO indices.

The pointwise unit is the examinee: entry ``(e, s)`` of a log-likelihood
matrix is ``log p(y_e | theta^s)`` with the latent class summed out.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.special import logsumexp

from dcmselect.model import ModelStructure, ModelVariant, QMatrix, log_prob_pair
from dcmselect.psis import KHAT_THRESHOLD, smooth_importance_weights
from dcmselect.sampler import ChainConfig, FitResult, PriorSpec, run_chains
from dcmselect.simulate import derive_seed

DRAW_CHUNK = 128


def pointwise_loglik(
    coef_draws: NDArray,
    class_prob_draws: NDArray,
    responses: NDArray,
    structure: ModelStructure,
) -> NDArray[np.float64]:
    """``(N, S)`` matrix of ``log sum_c nu_c prod_i p_ic^x (1 - p_ic)^(1 - x)``."""
    coef_draws = np.asarray(coef_draws, dtype=float)
    nu = np.asarray(class_prob_draws, dtype=float)
    if coef_draws.ndim == 2:
        coef_draws, nu = coef_draws[None], nu[None]
    if coef_draws.shape[0] == 0:
        raise ValueError("no posterior draws")
    x = np.asarray(responses, dtype=float)
    out = np.empty((x.shape[0], coef_draws.shape[0]))
    with np.errstate(divide="ignore"):
        log_nu = np.log(nu)
    for s0 in range(0, coef_draws.shape[0], DRAW_CHUNK):
        s1 = min(s0 + DRAW_CHUNK, coef_draws.shape[0])
        log_p, log_q = log_prob_pair(structure.logits(coef_draws[s0:s1]))  # (s, I, C)
        joint = np.einsum("ni,sic->snc", x, log_p - log_q)
        joint += (log_q.sum(axis=1) + log_nu[s0:s1])[:, None, :]
        out[:, s0:s1] = logsumexp(joint, axis=2).T
    return np.minimum(out, 0.0)


def fit_loglik(fit: FitResult, responses: NDArray) -> NDArray[np.float64]:
    return pointwise_loglik(fit.coef_draws, fit.class_prob_draws, responses, fit.structure)


def point_loglik(fit: FitResult, responses: NDArray) -> NDArray[np.float64]:
    """Per-examinee log-likelihood at the posterior means of coefficients and class proportions."""
    ll = pointwise_loglik(
        fit.posterior_mean_coef(), fit.posterior_mean_class_probs(), responses, fit.structure
    )
    return ll[:, 0]


def compute_dic(ll: NDArray, ll_at_point: NDArray) -> tuple[float, float]:
    """``(DIC, p_DIC)``; ``p_DIC`` may come out negative."""
    ll = np.asarray(ll, dtype=float)
    ll_at_point = np.asarray(ll_at_point, dtype=float).ravel()
    if ll.ndim != 2 or ll.shape[0] != ll_at_point.size:
        raise ValueError("ll must be (N, S) and ll_at_point (N,)")
    at_point = ll_at_point.sum()
    mean_ll = ll.sum(axis=0).mean()
    p_dic = 2.0 * (at_point - mean_ll)
    return float(-2.0 * at_point + 2.0 * p_dic), float(p_dic)


@dataclass
class WAICResult:
    elpd_waic: float
    p_waic: float
    waic: float
    lpd_hat: float
    pointwise_lpd: NDArray[np.float64]
    pointwise_p: NDArray[np.float64]

    @property
    def pointwise_elpd(self) -> NDArray[np.float64]:
        return self.pointwise_lpd - self.pointwise_p


def pointwise_lpd(ll: NDArray) -> NDArray[np.float64]:
    ll = np.asarray(ll, dtype=float)
    return logsumexp(ll, axis=1) - math.log(ll.shape[1])


def compute_waic(ll: NDArray) -> WAICResult:
    ll = np.asarray(ll, dtype=float)
    if ll.ndim != 2 or ll.shape[1] < 2:
        raise ValueError("need an (N, S) matrix with S >= 2")
    lpd_i = pointwise_lpd(ll)
    p_i = ll.var(axis=1, ddof=1)
    lpd, p_waic = float(lpd_i.sum()), float(p_i.sum())
    elpd = lpd - p_waic
    return WAICResult(elpd, p_waic, -2.0 * elpd, lpd, lpd_i, p_i)


@dataclass
class LOOResult:
    elpd_psis_loo: float
    p_loo: float
    khat: NDArray[np.float64]
    pointwise_elpd: NDArray[np.float64]

    @property
    def max_khat(self) -> float:
        return float(self.khat.max()) if self.khat.size else -math.inf

    @property
    def n_unreliable(self) -> int:
        return int((self.khat > KHAT_THRESHOLD).sum())

    @property
    def reliable(self) -> bool:
        return self.n_unreliable == 0


def compute_psis_loo(ll: NDArray) -> LOOResult:
    ll = np.asarray(ll, dtype=float)
    if ll.ndim != 2 or ll.shape[1] < 2:
        raise ValueError("need an (N, S) matrix with S >= 2")
    weights = smooth_importance_weights(-ll)
    elpd_i = logsumexp(weights.log_weights + ll, axis=1)
    elpd = float(elpd_i.sum())
    lpd = float(pointwise_lpd(ll).sum())
    return LOOResult(elpd, lpd - elpd, weights.khat, elpd_i)


@dataclass
class FitIndexReport:
    dic: float
    p_dic: float
    waic: float
    p_waic: float
    elpd_waic: float
    lpd_hat: float
    elpd_psis_loo: float
    p_loo: float
    khat_max: float
    khat_n_bad: int
    pointwise: dict[str, NDArray[np.float64]] = field(default_factory=dict, repr=False)

    @property
    def negative_p_dic(self) -> bool:
        return self.p_dic < 0

    def to_json(self) -> dict:
        return {
            "dic": self.dic,
            "p_dic": self.p_dic,
            "waic": self.waic,
            "p_waic": self.p_waic,
            "elpd_waic": self.elpd_waic,
            "lpd_hat": self.lpd_hat,
            "elpd_psis_loo": self.elpd_psis_loo,
            "p_loo": self.p_loo,
            "khat_max": self.khat_max,
            "khat_n_bad": self.khat_n_bad,
        }

    def write_pointwise_csv(self, path: str | Path) -> None:
        cols = ["lpd", "elpd_waic_i", "elpd_loo_i", "khat"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["examinee"] + cols)
            n = len(self.pointwise["lpd"])
            for e in range(n):
                writer.writerow([e + 1] + [repr(float(self.pointwise[c][e])) for c in cols])


def index_report(ll: NDArray, ll_at_point: NDArray | None = None) -> FitIndexReport:
    """All three indices from a log-likelihood matrix; DIC is NaN without ``ll_at_point``."""
    waic = compute_waic(ll)
    loo = compute_psis_loo(ll)
    if ll_at_point is not None:
        dic, p_dic = compute_dic(ll, ll_at_point)
    else:
        dic = p_dic = math.nan
    return FitIndexReport(
        dic=dic,
        p_dic=p_dic,
        waic=waic.waic,
        p_waic=waic.p_waic,
        elpd_waic=waic.elpd_waic,
        lpd_hat=waic.lpd_hat,
        elpd_psis_loo=loo.elpd_psis_loo,
        p_loo=loo.p_loo,
        khat_max=loo.max_khat,
        khat_n_bad=loo.n_unreliable,
        pointwise={
            "lpd": waic.pointwise_lpd,
            "elpd_waic_i": waic.pointwise_elpd,
            "elpd_loo_i": loo.pointwise_elpd,
            "khat": loo.khat,
        },
    )


def fit_indices(fit: FitResult, responses: NDArray) -> FitIndexReport:
    return index_report(fit_loglik(fit, responses), point_loglik(fit, responses))


@dataclass
class ExactLOOResult:
    elpd: float
    pointwise: NDArray[np.float64]


def exact_loo(
    data: NDArray,
    qmatrix: QMatrix,
    variant: ModelVariant | str,
    prior: PriorSpec,
    config: ChainConfig,
    seed: int,
) -> ExactLOOResult:
    """Brute-force leave-one-out: refit without each examinee in turn.

    Meant as a reference for small data sets only.  Raises ``RuntimeError``
    when any refit fails to converge.
    """
    data = np.asarray(data)
    elpd_i = np.empty(data.shape[0])
    for e in range(data.shape[0]):
        rest = np.delete(data, e, axis=0)
        fit = run_chains(rest, qmatrix, variant, prior, config, derive_seed(seed, "loo", e))
        if not fit.converged:
            raise RuntimeError(
                f"refit without examinee {e + 1} did not converge (max R-hat {fit.convergence.max_rhat:.3f})"
            )
        ll = fit_loglik(fit, data[e : e + 1])
        elpd_i[e] = pointwise_lpd(ll)[0]
    return ExactLOOResult(float(elpd_i.sum()), elpd_i)
