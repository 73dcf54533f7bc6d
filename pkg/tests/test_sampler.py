import math

import numpy as np
import pytest
from scipy.special import expit, logit

from dcmselect.model import ModelStructure, QMatrix, response_probability
from dcmselect.sampler import (
    ChainConfig,
    ChainState,
    PriorSpec,
    block_proposal,
    class_posterior,
    initial_state,
    psrf,
    run_chains,
    sample_assignments,
    sufficient_statistics,
    update_class_probs,
    update_item_blocks,
    update_item_params,
)
from dcmselect.simulate import PriorLevel, SimCondition, build_study_qmatrix, generate_condition


def _state(structure, coef, nu, n):
    return ChainState(
        coef=np.asarray(coef, dtype=float),
        class_probs=np.asarray(nu, dtype=float),
        assignments=np.zeros(n, dtype=np.int_),
        log_step=np.where(structure.mask, 0.0, -np.inf),
    )


class TestPSRF:
    def test_identical_chains(self):
        r = psrf([[1, 2, 3, 4], [1, 2, 3, 4]])
        assert r.rhat == pytest.approx(math.sqrt(3 / 4))
        assert not r.degenerate

    def test_equal_means(self):
        r = psrf([[1, 3, 1, 3, 2], [2, 2, 0, 4, 2]])
        assert r.rhat == pytest.approx(math.sqrt(4 / 5))

    def test_constant_chains_flagged(self):
        r = psrf([[0, 0, 0, 0], [1, 1, 1, 1]])
        assert r.rhat == 1.0 and r.degenerate

    def test_separated_chains_large(self):
        rng = np.random.default_rng(0)
        chains = np.stack([rng.normal(0, 1, 500), rng.normal(3, 1, 500)])
        assert psrf(chains).rhat > 1.5

    def test_vectorized_trailing_axes(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(3, 50, 2, 4))
        r = psrf(a)
        assert r.rhat.shape == (2, 4)
        assert r.rhat[1, 2] == pytest.approx(psrf(a[:, :, 1, 2]).rhat)

    def test_rejects_single_chain(self):
        with pytest.raises(ValueError):
            psrf([[1, 2, 3]])


class TestClassUpdates:
    def test_point_mass_nu(self):
        q = QMatrix(np.array([[1, 0], [0, 1], [1, 1]]))
        s = ModelStructure(q, "LCDM")
        x = np.random.default_rng(0).integers(0, 2, (30, 3)).astype(float)
        coef = np.where(s.mask, 0.5, 0.0)
        z, _ = sample_assignments(x, s, _state(s, coef, [0, 0, 1, 0], 30), np.random.default_rng(1))
        assert (z == 2).all()

    def test_two_class_bayes(self):
        s = ModelStructure(QMatrix(np.array([[1]])), "LCDM")
        coef = np.array([[logit(0.1), logit(0.9) - logit(0.1)]])
        post = class_posterior(np.array([[1.0]]), s, coef, np.array([0.5, 0.5]))
        np.testing.assert_allclose(post, [[0.1, 0.9]], atol=1e-14)

    def test_matches_enumeration(self):
        rng = np.random.default_rng(2)
        q = QMatrix(np.array([[1, 0], [0, 1], [1, 1], [1, 1]]))
        s = ModelStructure(q, "LCDM")
        coef = np.where(s.mask, np.abs(rng.normal(size=s.mask.shape)), 0.0)
        nu = rng.dirichlet(np.ones(4))
        x = rng.integers(0, 2, (20, 4))
        params = s.from_array(coef)
        post = class_posterior(x.astype(float), s, coef, nu)
        for e in range(20):
            joint = np.array(
                [
                    nu[c]
                    * np.prod(
                        [
                            response_probability(prof, params[i], q.row(i), "LCDM") ** x[e, i]
                            * (1 - response_probability(prof, params[i], q.row(i), "LCDM")) ** (1 - x[e, i])
                            for i in range(4)
                        ]
                    )
                    for c, prof in enumerate(s.lattice)
                ]
            )
            np.testing.assert_allclose(post[e], joint / joint.sum(), rtol=0, atol=1e-12)

    def test_assignments_valid_indices(self):
        q = build_study_qmatrix()
        s = ModelStructure(q, "CRUM")
        x = np.random.default_rng(3).integers(0, 2, (200, 28)).astype(float)
        state = initial_state(x, s, PriorSpec(), ChainConfig(), np.random.default_rng(4))
        z, post = sample_assignments(x, s, state, np.random.default_rng(5))
        assert z.min() >= 0 and z.max() < 8
        np.testing.assert_allclose(post.sum(axis=1), 1.0)

    def test_assignment_frequencies_follow_posterior(self):
        s = ModelStructure(QMatrix(np.array([[1]])), "LCDM")
        coef = np.array([[logit(0.2), logit(0.7) - logit(0.2)]])
        x = np.ones((20_000, 1))
        z, post = sample_assignments(x, s, _state(s, coef, [0.6, 0.4], 20_000), np.random.default_rng(6))
        assert z.mean() == pytest.approx(post[0, 1], abs=0.01)

    def test_dirichlet_conjugacy(self):
        rng = np.random.default_rng(7)
        counts = np.array([10, 0, 0, 0, 0, 0, 0, 0])
        draws = np.array([update_class_probs(counts, PriorSpec(), rng) for _ in range(20_000)])
        assert draws[:, 0].mean() == pytest.approx(11 / 18, abs=0.005)
        np.testing.assert_allclose(draws.sum(axis=1), 1.0)
        assert (draws >= 0).all()

    def test_dirichlet_zero_counts_is_prior(self):
        rng = np.random.default_rng(8)
        draws = np.array([update_class_probs(np.zeros(4), PriorSpec(), rng) for _ in range(20_000)])
        np.testing.assert_allclose(draws.mean(axis=0), 0.25, atol=0.005)
        assert draws[:, 0].var() == pytest.approx(3 / 80, rel=0.05)

    def test_sufficient_statistics(self):
        x = np.array([[1, 0], [1, 1], [0, 1]], dtype=float)
        correct, wrong = sufficient_statistics(x, np.array([0, 0, 1]), 2)
        np.testing.assert_array_equal(correct, [[2, 0], [1, 1]])
        np.testing.assert_array_equal(wrong, [[0, 1], [1, 0]])


class TestItemUpdate:
    def test_zero_step_keeps_state(self):
        q = QMatrix(np.array([[1, 1]]))
        s = ModelStructure(q, "LCDM")
        coef = np.array([[-1.0, 1.0, 1.0, 0.5]])
        state = _state(s, coef, np.full(4, 0.25), 5)
        state.log_step[:] = -np.inf
        x = np.ones((5, 1))
        new, _ = update_item_params(x, np.zeros(5, dtype=int), s, state, PriorSpec(), np.random.default_rng(0))
        np.testing.assert_array_equal(new, coef)

    def test_monotonicity_preserved(self):
        q = build_study_qmatrix()
        s = ModelStructure(q, "LCDM")
        x = np.random.default_rng(9).integers(0, 2, (100, 28)).astype(float)
        state = initial_state(x, s, PriorSpec(1000.0), ChainConfig(), np.random.default_rng(10))
        state.log_step = np.where(s.mask, np.log(3.0), -np.inf)
        rng = np.random.default_rng(11)
        for _ in range(50):
            state.coef, _ = update_item_params(x, state.assignments, s, state, PriorSpec(1000.0), rng)
            assert s.monotone(s.logits(state.coef)).all()
            assert (state.coef[~s.mask] == 0).all()

    def test_prior_recovery_without_data(self):
        # no examinees: the chain targets the prior (intercept free, main effect truncated at 0)
        s = ModelStructure(QMatrix(np.array([[1]])), "LCDM")
        prior = PriorSpec(item_variance=5.0)
        state = _state(s, [[0.0, 1.0]], [0.5, 0.5], 0)
        state.log_step = np.where(s.mask, np.log(4.0), -np.inf)
        empty = np.zeros((0, 1))
        rng = np.random.default_rng(12)
        draws = np.empty((50_000, 2))
        for t in range(50_000):
            state.coef, _ = update_item_params(empty, state.assignments, s, state, prior, rng)
            draws[t] = state.coef[0]
        assert draws[:, 0].var() == pytest.approx(5.0, rel=0.10)
        assert draws[:, 1].min() >= 0
        assert draws[:, 1].var() == pytest.approx(5.0 * (1 - 2 / math.pi), rel=0.10)

    def test_initial_state_is_monotone(self):
        s = ModelStructure(build_study_qmatrix(), "LCDM")
        x = np.zeros((10, 28))
        for seed in range(5):
            st = initial_state(x, s, PriorSpec(1000.0), ChainConfig(), np.random.default_rng(seed))
            assert s.monotone(s.logits(st.coef)).all()
            np.testing.assert_allclose(st.class_probs, 1 / 8)


def test_posterior_matches_grid_quadrature():
    """Two examinees, one single-attribute item: sampled vs quadrature posterior of both coefficients."""
    q = QMatrix(np.array([[1]]))
    x = np.array([[1.0], [0.0]])
    prior = PriorSpec(item_variance=5.0)
    fit = run_chains(x, q, "LCDM", prior, ChainConfig(n_chains=4, burn_in=2000, sampling=10_000, max_auto_extensions=0), 7)
    draws = fit.coef_draws[:, 0, :2]

    l0, l1 = np.meshgrid(np.linspace(-12, 12, 1201), np.linspace(0, 16, 801), indexing="ij")
    p0, p1 = expit(l0), expit(l0 + l1)
    # class proportions ~ Uniform(0, 1) integrated out analytically
    lik = p0 * (1 - p0) / 3 + (p0 * (1 - p1) + p1 * (1 - p0)) / 6 + p1 * (1 - p1) / 3
    w = np.exp(-0.5 * (l0**2 + l1**2) / 5.0) * lik
    w /= w.sum()
    for k, grid in enumerate((l0, l1)):
        mean = (w * grid).sum()
        sd = math.sqrt((w * (grid - mean) ** 2).sum())
        assert draws[:, k].mean() == pytest.approx(mean, abs=0.05)
        assert draws[:, k].std() == pytest.approx(sd, rel=0.10)


@pytest.fixture(scope="module")
def data():
    return generate_condition(SimCondition("CRUM", 200, "high", "informative"), 21)


class TestRunChains:
    def test_deterministic(self, data):
        cfg = ChainConfig(n_chains=2, burn_in=50, sampling=50, max_auto_extensions=0)
        a = run_chains(data.data, data.qmatrix, "CRUM", PriorSpec(), cfg, 5)
        b = run_chains(data.data, data.qmatrix, "CRUM", PriorSpec(), cfg, 5)
        np.testing.assert_array_equal(a.coef_draws, b.coef_draws)
        np.testing.assert_array_equal(a.class_prob_draws, b.class_prob_draws)

    def test_chain_streams_do_not_depend_on_chain_count(self, data):
        two = run_chains(data.data, data.qmatrix, "DINA", PriorSpec(), ChainConfig(2, 30, 30, 0), 6)
        three = run_chains(data.data, data.qmatrix, "DINA", PriorSpec(), ChainConfig(3, 30, 30, 0), 6)
        np.testing.assert_array_equal(two.chains[1].coef, three.chains[1].coef)

    def test_auto_extension_flags_non_convergence(self, data):
        cfg = ChainConfig(n_chains=2, burn_in=5, sampling=5, max_auto_extensions=1, rhat_threshold=1.0)
        fit = run_chains(data.data, data.qmatrix, "LCDM", PriorSpec(1000.0), cfg, 8)
        assert fit.attempts == 2
        assert (fit.config.burn_in, fit.config.sampling) == (10, 10)
        assert not fit.converged

    def test_draws_on_simplex_and_acceptance(self, data):
        cfg = ChainConfig(n_chains=2, burn_in=300, sampling=200, max_auto_extensions=0)
        fit = run_chains(data.data, data.qmatrix, "CRUM", PriorSpec(), cfg, 9)
        nu = fit.class_prob_draws
        assert (nu >= 0).all()
        np.testing.assert_allclose(nu.sum(axis=1), 1.0)
        assert 0.2 <= fit.acceptance_rate() <= 0.5
        np.testing.assert_allclose(fit.membership_probs().sum(axis=1), 1.0)

    def test_write_draws_csv(self, data, tmp_path):
        fit = run_chains(data.data, data.qmatrix, "DINA", PriorSpec(), ChainConfig(2, 5, 3, 0), 10)
        fit.write_draws_csv(tmp_path / "d.csv")
        lines = (tmp_path / "d.csv").read_text().splitlines()
        per_draw = fit.structure.n_params + 8
        assert lines[0] == "chain,iteration,parameter,value"
        assert len(lines) == 1 + 2 * 3 * per_draw

    def test_rejects_bad_shapes(self, data):
        with pytest.raises(ValueError):
            run_chains(data.data[:, :5], data.qmatrix, "LCDM", PriorSpec(), ChainConfig(), 1)
        with pytest.raises(ValueError):
            run_chains(data.data, data.qmatrix, "LCDM", PriorSpec(), ChainConfig(n_chains=1), 1)


def test_block_proposal_recovers_covariance():
    s = ModelStructure(QMatrix(np.array([[1, 1]])), "LCDM")
    rng = np.random.default_rng(13)
    cov = np.array([[1.0, 0.5, 0, 0], [0.5, 2.0, -1.0, 0], [0, -1.0, 1.5, 0], [0, 0, 0, 0.5]])
    hist = rng.multivariate_normal(np.zeros(4), cov, size=20_000)[:, None, :]
    chol = block_proposal(s, hist)[0]
    np.testing.assert_allclose(chol @ chol.T, cov * 2.38**2 / 4, atol=0.05)


def test_block_moves_keep_prior_target():
    s = ModelStructure(QMatrix(np.array([[1, 1]])), "LCDM")
    prior = PriorSpec(item_variance=2.0)
    state = _state(s, [[0.0, 1.0, 1.0, 0.5]], np.full(4, 0.25), 0)
    state.block_chol = np.eye(4)[None] * 1.5
    state.block_log_scale = np.zeros(1)
    stats = (np.zeros((1, 4)), np.zeros((1, 4)))
    rng = np.random.default_rng(14)
    draws = np.empty(40_000)
    for t in range(40_000):
        state.coef, _ = update_item_blocks(s, state, prior, rng, stats)
        draws[t] = state.coef[0, 0]
    # the intercept is unconstrained by monotonicity
    assert draws.var() == pytest.approx(2.0, rel=0.12)
    assert abs(draws.mean()) < 0.1


def test_prior_levels():
    assert PriorSpec.from_level(PriorLevel.INFORMATIVE).item_variance == 5
    assert PriorSpec.from_level("uninformative").item_variance == 1000
    with pytest.raises(ValueError):
        PriorSpec(item_variance=0)


@pytest.mark.slow
def test_convergence_smoke_medium_lcdm():
    converged = 0
    for rep in range(5):
        data = generate_condition(SimCondition("LCDM", 500, "medium", "informative"), 100 + rep)
        cfg = ChainConfig(n_chains=4, burn_in=1000, sampling=1000, max_auto_extensions=0)
        fit = run_chains(data.data, data.qmatrix, "LCDM", PriorSpec(), cfg, 200 + rep)
        converged += fit.convergence.max_rhat <= 1.1
    assert converged >= 4
