import math

import numpy as np
import pytest
from scipy.special import expit

from dcmselect.indices import (
    compute_dic,
    compute_psis_loo,
    compute_waic,
    exact_loo,
    fit_indices,
    fit_loglik,
    index_report,
    pointwise_loglik,
    pointwise_lpd,
)
from dcmselect.model import ModelStructure, QMatrix
from dcmselect.sampler import ChainConfig, PriorSpec, run_chains

LOG_HALF, LOG_QUARTER = math.log(0.5), math.log(0.25)


def _normal_model_loglik(n=100, s=1000, seed=0):
    y = np.random.default_rng(12345).normal(0.3, 1.0, n)
    theta = np.random.default_rng(seed).normal(y.mean() * n / (n + 1), math.sqrt(1 / (n + 1)), s)
    return -0.5 * (y[:, None] - theta[None, :]) ** 2 - 0.5 * math.log(2 * math.pi)


class TestPointwiseLoglik:
    def test_single_class_coin(self):
        s = ModelStructure(QMatrix(np.array([[1]])), "LCDM")
        coef = np.zeros((3, 1, 2))
        nu = np.tile([1.0, 0.0], (3, 1))
        ll = pointwise_loglik(coef, nu, np.array([[1], [0]]), s)
        np.testing.assert_allclose(ll, LOG_HALF, atol=1e-15)

    def test_non_positive(self):
        rng = np.random.default_rng(1)
        s = ModelStructure(QMatrix(np.array([[1, 0], [0, 1], [1, 1]])), "LCDM")
        coef = np.where(s.mask, rng.normal(0, 5, (200, *s.mask.shape)), 0.0)
        nu = rng.dirichlet(np.ones(4), 200)
        x = rng.integers(0, 2, (30, 3))
        assert (pointwise_loglik(coef, nu, x, s) <= 0).all()

    def test_single_draw_shape(self):
        s = ModelStructure(QMatrix(np.array([[1]])), "DINA")
        ll = pointwise_loglik(np.zeros((1, 2)), np.array([0.5, 0.5]), np.ones((4, 1)), s)
        assert ll.shape == (4, 1)

    def test_chunking_does_not_change_values(self):
        rng = np.random.default_rng(2)
        s = ModelStructure(QMatrix(np.array([[1, 0], [1, 1]])), "CRUM")
        coef = np.where(s.mask, np.abs(rng.normal(size=(300, *s.mask.shape))), 0.0)
        nu = rng.dirichlet(np.ones(4), 300)
        x = rng.integers(0, 2, (7, 2))
        full = pointwise_loglik(coef, nu, x, s)
        np.testing.assert_array_equal(full[:, 200:], pointwise_loglik(coef[200:], nu[200:], x, s))


class TestDIC:
    def test_hand_arithmetic(self):
        dic, p_dic = compute_dic(np.array([[LOG_HALF, LOG_QUARTER]]), np.array([LOG_HALF]))
        assert p_dic == pytest.approx(0.6931, abs=1e-4)
        assert dic == pytest.approx(2.7726, abs=1e-4)

    def test_degenerate_posterior(self):
        ll = np.tile([[-1.0], [-2.5]], (1, 50))
        dic, p_dic = compute_dic(ll, ll[:, 0])
        assert p_dic == 0.0
        assert dic == pytest.approx(7.0)

    def test_negative_penalty_is_allowed_and_flagged(self):
        ll = np.array([[-1.0, -1.2]])
        report = index_report(ll, np.array([-1.5]))
        assert report.p_dic < 0 and report.negative_p_dic

    def test_shape_check(self):
        with pytest.raises(ValueError):
            compute_dic(np.zeros((3, 4)), np.zeros(2))


class TestWAIC:
    def test_hand_arithmetic(self):
        w = compute_waic(np.array([[LOG_HALF, LOG_QUARTER]]))
        assert w.lpd_hat == pytest.approx(math.log(0.375), abs=1e-12)
        assert w.p_waic == pytest.approx(0.2402, abs=1e-4)
        assert w.elpd_waic == pytest.approx(-1.2210, abs=1e-4)
        assert w.waic == -2 * w.elpd_waic

    def test_identical_draws(self):
        w = compute_waic(np.full((4, 10), -0.7))
        assert w.p_waic == 0.0
        assert w.elpd_waic == pytest.approx(w.lpd_hat)

    def test_single_draw_rejected(self):
        with pytest.raises(ValueError):
            compute_waic(np.zeros((3, 1)))


class TestPSISLOO:
    def test_identical_draws(self):
        loo = compute_psis_loo(np.full((5, 200), -1.3))
        assert loo.elpd_psis_loo == pytest.approx(5 * -1.3)
        assert loo.p_loo == pytest.approx(0.0, abs=1e-12)

    def test_penalty_non_negative_when_reliable(self):
        loo = compute_psis_loo(_normal_model_loglik())
        assert loo.reliable
        assert loo.p_loo >= 0

    def test_close_to_analytic_loo(self):
        # conjugate normal mean: leave-one-out predictive is available in closed form
        n = 100
        y = np.random.default_rng(12345).normal(0.3, 1.0, n)
        loo = compute_psis_loo(_normal_model_loglik(n=n, s=4000))
        exact = 0.0
        for e in range(n):
            rest = np.delete(y, e)
            mean, var = rest.sum() / n, 1 / n
            exact += -0.5 * math.log(2 * math.pi * (1 + var)) - 0.5 * (y[e] - mean) ** 2 / (1 + var)
        assert loo.elpd_psis_loo == pytest.approx(exact, abs=0.05)


class TestIndexProperties:
    def test_row_shift(self):
        ll = _normal_model_loglik(n=20, s=500)
        base = index_report(ll, ll.mean(axis=1))
        shifted_ll = ll.copy()
        shifted_ll[3] += 0.75
        shifted = index_report(shifted_ll, ll.mean(axis=1))
        for key in ("lpd", "elpd_waic_i", "elpd_loo_i"):
            diff = shifted.pointwise[key] - base.pointwise[key]
            assert diff[3] == pytest.approx(0.75, abs=1e-10)
            np.testing.assert_allclose(np.delete(diff, 3), 0.0, atol=1e-12)

    def test_permutations(self):
        ll = _normal_model_loglik(n=15, s=400)
        rng = np.random.default_rng(5)
        base = index_report(ll)
        cols = index_report(ll[:, rng.permutation(400)])
        rows_perm = rng.permutation(15)
        rows = index_report(ll[rows_perm])
        for name in ("waic", "p_waic", "elpd_psis_loo", "p_loo"):
            assert getattr(cols, name) == pytest.approx(getattr(base, name), abs=1e-9)
            assert getattr(rows, name) == pytest.approx(getattr(base, name), abs=1e-9)
        np.testing.assert_allclose(rows.pointwise["elpd_loo_i"], base.pointwise["elpd_loo_i"][rows_perm])

    def test_waic_and_loo_agree_more_with_more_draws(self):
        gaps = []
        for s in (100, 1000, 10_000):
            g = [
                abs(compute_waic(ll).elpd_waic - compute_psis_loo(ll).elpd_psis_loo)
                for ll in (_normal_model_loglik(s=s, seed=seed) for seed in range(10))
            ]
            gaps.append(np.mean(g))
        assert gaps[0] > gaps[1] > gaps[2]

    def test_report_json_and_pointwise_csv(self, tmp_path):
        ll = _normal_model_loglik(n=6, s=200)
        report = index_report(ll, ll.mean(axis=1))
        assert set(report.to_json()) >= {"dic", "waic", "elpd_psis_loo", "khat_max"}
        report.write_pointwise_csv(tmp_path / "p.csv")
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines[0] == "examinee,lpd,elpd_waic_i,elpd_loo_i,khat"
        assert len(lines) == 7

    def test_dic_missing_without_point_loglik(self):
        assert math.isnan(index_report(_normal_model_loglik(n=5, s=100)).dic)


@pytest.fixture(scope="module")
def toy():
    rng = np.random.default_rng(6)
    q = QMatrix(np.array([[1, 0], [0, 1], [1, 1]]))
    alpha = rng.integers(0, 2, (40, 2))
    mastered = np.column_stack([alpha[:, 0], alpha[:, 1], alpha[:, 0] * alpha[:, 1]])
    p = expit(-1.5 + 3.0 * mastered)
    x = (rng.random((40, 3)) < p).astype(int)
    return x, q


class TestOnFits:
    def test_duplicate_row_stability(self, toy):
        x, q = toy
        twin = np.vstack([x, x[-1:]])
        cfg = ChainConfig(n_chains=4, burn_in=500, sampling=1000, max_auto_extensions=1)
        with_twin = run_chains(twin, q, "LCDM", PriorSpec(), cfg, 1)
        without = run_chains(x, q, "LCDM", PriorSpec(), cfg, 1)
        lpd_with = pointwise_lpd(fit_loglik(with_twin, x[-1:]))[0]
        lpd_without = pointwise_lpd(fit_loglik(without, x[-1:]))[0]
        assert abs(lpd_with - lpd_without) < 0.05

    def test_fit_indices_consistency(self, toy):
        x, q = toy
        fit = run_chains(x, q, "CRUM", PriorSpec(), ChainConfig(4, 300, 300, 0), 2)
        report = fit_indices(fit, x)
        assert report.waic == pytest.approx(-2 * report.elpd_waic)
        assert report.p_waic >= 0
        assert report.khat_n_bad == int((report.pointwise["khat"] > 0.7).sum())

    def test_exact_loo_on_one_examinee_is_prior_predictive(self):
        q = QMatrix(np.array([[1]]))
        cfg = ChainConfig(n_chains=4, burn_in=500, sampling=5000, max_auto_extensions=2)
        res = exact_loo(np.array([[1]]), q, "LCDM", PriorSpec(item_variance=2.0), cfg, 3)
        # prior predictive P(x = 1): uniform class split, intercept normal, main effect half-normal
        l0, l1 = np.meshgrid(np.linspace(-9, 9, 901), np.linspace(0, 9, 451), indexing="ij")
        w = np.exp(-0.25 * (l0**2 + l1**2))
        p = 0.5 * expit(l0) + 0.5 * expit(l0 + l1)
        expected = math.log((w * p).sum() / w.sum())
        assert res.elpd == pytest.approx(expected, abs=0.03)
        assert res.pointwise.shape == (1,)

