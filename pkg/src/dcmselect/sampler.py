"""Metropolis-within-Gibbs estimation of LCDM, DINA and CRUM models.

One sweep of a chain:

1. latent class of every examinee from its exact categorical conditional,
2. class proportions from the conjugate Dirichlet update,
3. item coefficients one slot at a time by random-walk Metropolis against
   the Bernoulli likelihood and independent normal priors; proposals that
   break monotonicity are rejected,
4. optionally, one joint random-walk move per item whose proposal
   covariance is the item's empirical posterior covariance from the first
   half of burn-in (main effects and interactions are strongly correlated,
   which slows one-slot-at-a-time updates).

Proposal scales adapt during burn-in only (0.44 acceptance per slot,
0.234 per item block) and are frozen for the retained iterations.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from numpy.typing import NDArray

from dcmselect.model import (
    ItemParameters,
    ModelStructure,
    ModelVariant,
    QMatrix,
    log_prob_pair,
)
from dcmselect.simulate import PriorLevel

log = logging.getLogger(__name__)

INFORMATIVE_VARIANCE = 5.0
UNINFORMATIVE_VARIANCE = 1000.0
TARGET_ACCEPTANCE = 0.44
BLOCK_TARGET_ACCEPTANCE = 0.234
RHAT_THRESHOLD = 1.1


@dataclass(frozen=True)
class PriorSpec:
    """Independent normal priors on item coefficients, Dirichlet on class proportions."""

    item_variance: float = INFORMATIVE_VARIANCE
    item_mean: float = 0.0
    dirichlet_concentration: float = 1.0

    def __post_init__(self):
        if self.item_variance <= 0:
            raise ValueError("item_variance must be positive")
        if self.dirichlet_concentration <= 0:
            raise ValueError("dirichlet_concentration must be positive")

    @classmethod
    def from_level(cls, level: PriorLevel | str) -> "PriorSpec":
        level = PriorLevel.parse(level)
        if level is PriorLevel.INFORMATIVE:
            return cls(item_variance=INFORMATIVE_VARIANCE)
        return cls(item_variance=UNINFORMATIVE_VARIANCE)

    def concentration(self, n_classes: int) -> NDArray[np.float64]:
        return np.full(n_classes, float(self.dirichlet_concentration))

    def log_density(self, coef):
        return -0.5 * (coef - self.item_mean) ** 2 / self.item_variance


@dataclass(frozen=True)
class ChainConfig:
    n_chains: int = 4
    burn_in: int = 1000
    sampling: int = 1000
    max_auto_extensions: int = 2
    # burn-in iterations with proposal adaptation; None = all of burn-in
    adapt_window: int | None = None
    initial_step: float = 0.5
    # variance cap for starting values; prior draws at variance 1000 saturate every probability
    init_variance: float = 1.0
    rhat_threshold: float = RHAT_THRESHOLD
    # joint per-item moves from the second half of burn-in onward
    block_updates: bool = True

    def __post_init__(self):
        for name in ("n_chains", "burn_in", "sampling"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.max_auto_extensions < 0:
            raise ValueError("max_auto_extensions must be >= 0")
        if self.adapt_window is not None and self.adapt_window < 0:
            raise ValueError("adapt_window must be >= 0")

    def extended(self, times: int) -> "ChainConfig":
        factor = 2**times
        return replace(self, burn_in=self.burn_in * factor, sampling=self.sampling * factor)


@dataclass
class ChainState:
    coef: NDArray[np.float64]  # (I, P)
    class_probs: NDArray[np.float64]  # (C,)
    assignments: NDArray[np.int_]  # (N,)
    log_step: NDArray[np.float64]  # (I, P)
    # (I, P, P) Cholesky factors of the block proposals; None until learned
    block_chol: NDArray[np.float64] | None = None
    block_log_scale: NDArray[np.float64] | None = None  # (I,)


@dataclass
class ChainDraws:
    """Retained draws of one chain."""

    coef: NDArray[np.float64]  # (S, I, P)
    class_probs: NDArray[np.float64]  # (S, C)
    membership_probs: NDArray[np.float64]  # (N, C), mean class posterior over retained sweeps
    acceptance: NDArray[np.float64]  # (I, P), acceptance rate over retained sweeps
    step: NDArray[np.float64]  # (I, P), frozen proposal scales

    @property
    def n_draws(self) -> int:
        return self.coef.shape[0]


class PSRF(NamedTuple):
    rhat: NDArray[np.float64] | float
    degenerate: NDArray[np.bool_] | bool


def psrf(chains) -> PSRF:
    """Gelman-Rubin potential scale reduction factor.

    ``chains`` has shape ``(m, n, ...)``: ``m >= 2`` chains of ``n >= 2``
    draws; trailing axes are treated as separate scalar quantities.  Where
    the mean within-chain variance is zero, R-hat is reported as 1 and the
    quantity is flagged degenerate.
    """
    a = np.asarray(chains, dtype=float)
    if a.ndim < 2 or a.shape[0] < 2 or a.shape[1] < 2:
        raise ValueError("need at least 2 chains of at least 2 draws")
    n = a.shape[1]
    within = a.var(axis=1, ddof=1).mean(axis=0)
    between = n * a.mean(axis=1).var(axis=0, ddof=1)
    degenerate = within <= 0
    safe_w = np.where(degenerate, 1.0, within)
    rhat = np.sqrt(((n - 1) / n * safe_w + between / n) / safe_w)
    rhat = np.where(degenerate, 1.0, rhat)
    if rhat.ndim == 0:
        return PSRF(float(rhat), bool(degenerate))
    return PSRF(rhat, degenerate)


@dataclass
class ConvergenceReport:
    rhat: dict[str, float]
    degenerate: list[str] = field(default_factory=list)
    threshold: float = RHAT_THRESHOLD

    @property
    def max_rhat(self) -> float:
        return max(self.rhat.values()) if self.rhat else float("nan")

    @property
    def converged(self) -> bool:
        return bool(self.rhat) and self.max_rhat <= self.threshold

    def to_json(self) -> dict:
        return {
            "max_rhat": self.max_rhat,
            "converged": self.converged,
            "threshold": self.threshold,
            "degenerate": list(self.degenerate),
        }


def _class_log_likelihood(responses: NDArray, log_p: NDArray, log_q: NDArray) -> NDArray:
    """``(N, C)`` log P(responses | class) given ``(I, C)`` log-probabilities."""
    return responses @ (log_p - log_q) + log_q.sum(axis=0)


def class_posterior(
    responses: NDArray, structure: ModelStructure, coef: NDArray, class_probs: NDArray
) -> NDArray[np.float64]:
    """Normalized ``(N, C)`` class posterior of every examinee."""
    log_p, log_q = log_prob_pair(structure.logits(coef))
    with np.errstate(divide="ignore"):
        log_post = _class_log_likelihood(responses, log_p, log_q) + np.log(class_probs)
    log_post -= log_post.max(axis=1, keepdims=True)
    post = np.exp(log_post)
    post /= post.sum(axis=1, keepdims=True)
    return post


def sample_assignments(
    responses: NDArray, structure: ModelStructure, state: ChainState, rng: np.random.Generator
) -> tuple[NDArray[np.int_], NDArray[np.float64]]:
    """Draw each examinee's latent class; also return the class posteriors."""
    post = class_posterior(responses, structure, state.coef, state.class_probs)
    if post.shape[0] == 0:
        return np.zeros(0, dtype=np.int_), post
    cum = np.cumsum(post, axis=1)
    u = rng.random(post.shape[0])[:, None] * cum[:, -1:]
    z = np.minimum((cum <= u).sum(axis=1), post.shape[1] - 1)
    return z.astype(np.int_), post


def update_class_probs(
    counts: NDArray, prior: PriorSpec, rng: np.random.Generator
) -> NDArray[np.float64]:
    """Conjugate draw ``nu ~ Dirichlet(concentration + counts)``."""
    counts = np.asarray(counts, dtype=float)
    nu = rng.dirichlet(prior.concentration(counts.size) + counts)
    # guard against total underflow for tiny concentrations
    nu = np.maximum(nu, 0.0)
    return nu / nu.sum()


def sufficient_statistics(
    responses: NDArray, assignments: NDArray, n_classes: int
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Per item and class: number of correct and incorrect responses."""
    onehot = np.zeros((assignments.size, n_classes))
    onehot[np.arange(assignments.size), assignments] = 1.0
    correct = responses.T @ onehot  # (I, C)
    wrong = onehot.sum(axis=0)[None, :] - correct
    return correct, wrong


def _item_loglik(logits, correct, wrong):
    log_p, log_q = log_prob_pair(logits)
    return (correct * log_p + wrong * log_q).sum(axis=-1)


def update_item_params(
    responses: NDArray,
    assignments: NDArray,
    structure: ModelStructure,
    state: ChainState,
    prior: PriorSpec,
    rng: np.random.Generator,
    stats: tuple[NDArray, NDArray] | None = None,
) -> tuple[NDArray[np.float64], NDArray[np.bool_]]:
    """One random-walk Metropolis sweep over every coefficient slot.

    Items are conditionally independent given the class assignments, so
    each slot is updated for all items at once.  Returns the new
    coefficients and the ``(I, P)`` acceptance indicators (padding slots
    are reported as not accepted).
    """
    if stats is None:
        stats = sufficient_statistics(responses, assignments, structure.n_classes)
    correct, wrong = stats
    coef = state.coef.copy()
    step = np.exp(state.log_step)
    eta = structure.logits(coef)
    ll = _item_loglik(eta, correct, wrong)
    accepted = np.zeros_like(structure.mask)
    for j in range(structure.n_slots):
        active = structure.mask[:, j]
        delta = np.where(active, step[:, j] * rng.standard_normal(structure.n_items), 0.0)
        log_u = np.log(rng.random(structure.n_items))
        new_eta = eta + structure.design[:, :, j] * delta[:, None]
        new_ll = _item_loglik(new_eta, correct, wrong)
        new_coef = coef[:, j] + delta
        log_ratio = new_ll - ll + prior.log_density(new_coef) - prior.log_density(coef[:, j])
        ok = active & structure.monotone(new_eta) & (log_u < log_ratio)
        coef[ok, j] = new_coef[ok]
        eta[ok] = new_eta[ok]
        ll[ok] = new_ll[ok]
        accepted[:, j] = ok
    return coef, accepted


def update_item_blocks(
    structure: ModelStructure,
    state: ChainState,
    prior: PriorSpec,
    rng: np.random.Generator,
    stats: tuple[NDArray, NDArray],
) -> tuple[NDArray[np.float64], NDArray[np.bool_]]:
    """One joint random-walk Metropolis move per item using ``state.block_chol``."""
    correct, wrong = stats
    coef = state.coef
    z = rng.standard_normal(coef.shape)
    delta = np.einsum("ipq,iq->ip", state.block_chol, z) * np.exp(state.block_log_scale)[:, None]
    delta = np.where(structure.mask, delta, 0.0)
    new_coef = coef + delta
    new_eta = structure.logits(new_coef)
    log_ratio = _item_loglik(new_eta, correct, wrong) - _item_loglik(structure.logits(coef), correct, wrong)
    log_ratio += np.where(
        structure.mask, prior.log_density(new_coef) - prior.log_density(coef), 0.0
    ).sum(axis=1)
    ok = structure.monotone(new_eta) & (np.log(rng.random(structure.n_items)) < log_ratio)
    return np.where(ok[:, None], new_coef, coef), ok


def block_proposal(structure: ModelStructure, history: NDArray) -> NDArray[np.float64]:
    """Cholesky factors of ``2.38^2 / d`` times each item's draw covariance (``history`` is ``(T, I, P)``)."""
    chol = np.zeros((structure.n_items, structure.n_slots, structure.n_slots))
    for i in range(structure.n_items):
        active = np.flatnonzero(structure.mask[i])
        d = active.size
        cov = np.atleast_2d(np.cov(history[:, i, active], rowvar=False))
        cov = cov * 2.38**2 / d + 1e-6 * np.eye(d)
        chol[i][np.ix_(active, active)] = np.linalg.cholesky(cov)
    return chol


def initial_state(
    responses: NDArray,
    structure: ModelStructure,
    prior: PriorSpec,
    config: ChainConfig,
    rng: np.random.Generator,
) -> ChainState:
    """Starting point: coefficients from the (variance-capped) prior restricted to the monotone region."""
    sd = np.sqrt(min(prior.item_variance, config.init_variance))
    coef = np.zeros((structure.n_items, structure.n_slots))
    pending = np.ones(structure.n_items, dtype=bool)
    for _ in range(10_000):
        draw = prior.item_mean + sd * rng.standard_normal(coef.shape)
        draw = np.where(structure.mask, draw, 0.0)
        ok = pending & structure.monotone(structure.logits(draw))
        coef[ok] = draw[ok]
        pending &= ~ok
        if not pending.any():
            break
    else:
        # effects all non-negative are always monotone
        draw = np.where(structure.mask, np.abs(draw), 0.0)
        draw[:, 0] = -np.abs(draw[:, 0])
        coef[pending] = draw[pending]
    n_classes = structure.n_classes
    state = ChainState(
        coef=coef,
        class_probs=np.full(n_classes, 1.0 / n_classes),
        assignments=np.zeros(responses.shape[0], dtype=np.int_),
        log_step=np.where(structure.mask, np.log(config.initial_step), -np.inf),
    )
    state.assignments, _ = sample_assignments(responses, structure, state, rng)
    return state


def run_chain(
    responses: NDArray,
    structure: ModelStructure,
    prior: PriorSpec,
    config: ChainConfig,
    rng: np.random.Generator,
) -> ChainDraws:
    responses = np.asarray(responses, dtype=float)
    state = initial_state(responses, structure, prior, config, rng)
    n_classes = structure.n_classes
    adapt_window = config.burn_in if config.adapt_window is None else min(config.adapt_window, config.burn_in)
    total = config.burn_in + config.sampling
    coef_draws = np.empty((config.sampling, structure.n_items, structure.n_slots))
    nu_draws = np.empty((config.sampling, n_classes))
    membership = np.zeros((responses.shape[0], n_classes))
    accept_sum = np.zeros(structure.mask.shape)
    # covariance for block moves is learned on the second quarter of burn-in
    learn_from, learn_to = config.burn_in // 4, config.burn_in // 2
    use_blocks = config.block_updates and learn_to - learn_from >= 20
    history = np.empty((learn_to - learn_from, structure.n_items, structure.n_slots)) if use_blocks else None
    for t in range(total):
        state.assignments, post = sample_assignments(responses, structure, state, rng)
        stats = sufficient_statistics(responses, state.assignments, n_classes)
        counts = np.bincount(state.assignments, minlength=n_classes)
        state.class_probs = update_class_probs(counts, prior, rng)
        state.coef, accepted = update_item_params(
            responses, state.assignments, structure, state, prior, rng, stats=stats
        )
        if t < adapt_window:
            gain = (t + 1) ** -0.6
            state.log_step = np.where(
                structure.mask, state.log_step + gain * (accepted - TARGET_ACCEPTANCE), -np.inf
            )
        if use_blocks:
            if learn_from <= t < learn_to:
                history[t - learn_from] = state.coef
            if t == learn_to - 1:
                state.block_chol = block_proposal(structure, history)
                state.block_log_scale = np.zeros(structure.n_items)
            elif t >= learn_to:
                state.coef, block_ok = update_item_blocks(structure, state, prior, rng, stats)
                if t < adapt_window:
                    gain = (t - learn_to + 1) ** -0.6
                    state.block_log_scale += gain * (block_ok - BLOCK_TARGET_ACCEPTANCE)
        if t >= config.burn_in:
            s = t - config.burn_in
            coef_draws[s] = state.coef
            nu_draws[s] = state.class_probs
            membership += post
            accept_sum += accepted
    return ChainDraws(
        coef=coef_draws,
        class_probs=nu_draws,
        membership_probs=membership / config.sampling,
        acceptance=accept_sum / config.sampling,
        step=np.exp(state.log_step),
    )


@dataclass
class FitResult:
    """Pooled output of :func:`run_chains`."""

    structure: ModelStructure
    prior: PriorSpec
    config: ChainConfig  # the configuration of the final attempt
    seed: int
    chains: list[ChainDraws]
    convergence: ConvergenceReport
    attempts: int

    @property
    def variant(self) -> ModelVariant:
        return self.structure.variant

    @property
    def converged(self) -> bool:
        return self.convergence.converged

    @property
    def coef_draws(self) -> NDArray[np.float64]:
        """``(S, I, P)`` draws pooled across chains."""
        return np.concatenate([c.coef for c in self.chains], axis=0)

    @property
    def class_prob_draws(self) -> NDArray[np.float64]:
        return np.concatenate([c.class_probs for c in self.chains], axis=0)

    @property
    def n_draws(self) -> int:
        return sum(c.n_draws for c in self.chains)

    def posterior_mean_coef(self) -> NDArray[np.float64]:
        return np.mean([c.coef.mean(axis=0) for c in self.chains], axis=0)

    def posterior_mean_class_probs(self) -> NDArray[np.float64]:
        nu = np.mean([c.class_probs.mean(axis=0) for c in self.chains], axis=0)
        return nu / nu.sum()

    def item_params(self) -> list[ItemParameters]:
        return self.structure.from_array(self.posterior_mean_coef())

    def membership_probs(self) -> NDArray[np.float64]:
        return np.mean([c.membership_probs for c in self.chains], axis=0)

    def acceptance_rate(self) -> float:
        mask = self.structure.mask
        return float(np.mean([c.acceptance[mask].mean() for c in self.chains]))

    def write_draws_csv(self, path: str | Path) -> None:
        """Long-format draws: chain, iteration, parameter, value."""
        names = self.structure.parameter_names()
        nu_names = [f"class_prob[{c}]" for c in range(self.structure.n_classes)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["chain", "iteration", "parameter", "value"])
            for k, chain in enumerate(self.chains):
                for s in range(chain.n_draws):
                    flat = chain.coef[s][self.structure.mask]
                    for name, value in zip(names, flat):
                        writer.writerow([k, s, name, repr(float(value))])
                    for name, value in zip(nu_names, chain.class_probs[s]):
                        writer.writerow([k, s, name, repr(float(value))])


def convergence_report(
    chains: Sequence[ChainDraws], structure: ModelStructure, threshold: float = RHAT_THRESHOLD
) -> ConvergenceReport:
    coef = np.stack([c.coef for c in chains])  # (m, n, I, P)
    nu = np.stack([c.class_probs for c in chains])  # (m, n, C)
    names = structure.parameter_names() + [f"class_prob[{c}]" for c in range(structure.n_classes)]
    coef_r = psrf(coef)
    nu_r = psrf(nu)
    values = np.concatenate([coef_r.rhat[structure.mask], nu_r.rhat])
    degenerate = np.concatenate([coef_r.degenerate[structure.mask], nu_r.degenerate])
    return ConvergenceReport(
        rhat={n: float(v) for n, v in zip(names, values)},
        degenerate=[n for n, d in zip(names, degenerate) if d],
        threshold=threshold,
    )


def run_chains(
    data: NDArray,
    qmatrix: QMatrix,
    variant: ModelVariant | str,
    prior: PriorSpec,
    config: ChainConfig,
    seed: int,
) -> FitResult:
    """Run independent chains; restart with doubled lengths while max R-hat exceeds the threshold.

    After ``max_auto_extensions`` restarts the last run is returned with
    ``converged == False``.  Chain ``k`` of attempt ``a`` always draws from
    the same random stream, whatever the number of chains.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[1] != qmatrix.n_items:
        raise ValueError(f"data must be (N, {qmatrix.n_items})")
    if config.n_chains < 2:
        raise ValueError("at least 2 chains are needed for R-hat")
    structure = ModelStructure(qmatrix, variant)
    for attempt in range(config.max_auto_extensions + 1):
        cfg = config.extended(attempt)
        streams = np.random.SeedSequence([int(seed), attempt]).spawn(cfg.n_chains)
        chains = [
            run_chain(data, structure, prior, cfg, np.random.default_rng(s)) for s in streams
        ]
        report = convergence_report(chains, structure, cfg.rhat_threshold)
        result = FitResult(structure, prior, cfg, int(seed), chains, report, attempt + 1)
        if report.converged:
            break
        log.info(
            "%s fit: max R-hat %.3f > %.2f after %d+%d iterations",
            structure.variant.value,
            report.max_rhat,
            cfg.rhat_threshold,
            cfg.burn_in,
            cfg.sampling,
        )
    else:
        log.warning(
            "%s fit did not converge after %d extensions (max R-hat %.3f)",
            structure.variant.value,
            config.max_auto_extensions,
            report.max_rhat,
        )
    return result
