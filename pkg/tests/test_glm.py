import numpy as np
import pytest
import scipy.optimize
import statsmodels.api as sm

from relabund.estimators import closed_form_mle
from relabund.glm import (
    DataInsufficiencyError,
    EstimationError,
    FitOptions,
    Penalty,
    build_design,
    design_rank,
    estimate_dispersion,
    fit,
    kernel_dimension_unconstrained,
    penalized_objective,
    poisson_loglik,
    unconstrained_incidence,
)
from relabund.model import CountTable, EffortSpec, IndexSpace, ParameterSet

from conftest import draw_table, effort_of, random_params


def _fitted(table, effort, **kw):
    return fit(build_design(table, effort, **kw), table)


class TestBuildDesign:
    def test_column_count_full(self, rng):
        params = random_params(rng, 3, 4)
        design = build_design(draw_table(rng, params), effort_of(params))
        assert design.n_cols == 3 * 4 + 4 + 2
        assert design.n_rows == 2 * 3 * 4

    def test_column_count_one_unmonitored(self, rng):
        params = random_params(rng, 3, 4, unmonitored=[2])
        design = build_design(draw_table(rng, params), effort_of(params))
        assert design.n_cols == 12 + 4 + 1
        assert not np.any((design.cells[:, 0] == 2) & (design.cells[:, 2] == 0))
        assert design.n_rows == 2 * 12 - 4

    def test_minimal_instance(self):
        table = CountTable.from_arrays([[3]], [[5]])
        design = build_design(table, EffortSpec([1.0]))
        assert design.n_cols == 2
        assert design.n_rows == 2

    def test_offsets(self, rng):
        params = random_params(rng, 2, 3)
        design = build_design(draw_table(rng, params), effort_of(params))
        std = design.cells[:, 2] == 0
        np.testing.assert_allclose(design.offset[std], np.log(params.e_tilde[design.cells[std, 1], 0]))
        np.testing.assert_array_equal(design.offset[~std], 0.0)

    def test_rows_touch_at_most_three_columns(self, rng):
        params = random_params(rng, 3, 4)
        X = build_design(draw_table(rng, params), effort_of(params)).matrix()
        nnz = (X != 0).sum(axis=1)
        assert nnz.min() >= 1 and nnz.max() <= 3

    def test_missing_effort(self, rng):
        params = random_params(rng, 2, 3)
        with pytest.raises(ValueError):
            build_design(draw_table(rng, params), EffortSpec([1.0, 1.0]))

    def test_no_species_in_both(self):
        table = CountTable.from_arrays([[0]], [[3]], monitored0=[False])
        with pytest.raises(ValueError):
            build_design(table, EffortSpec([1.0]))

    def test_zero_standardized_site(self):
        table = CountTable.from_arrays([[2, 0], [3, 0]], [[5, 4], [1, 7]])
        with pytest.raises(DataInsufficiencyError):
            build_design(table, EffortSpec([1.0, 1.0]))

    def test_full_column_rank_on_generic_data(self, rng):
        for I, J in [(2, 2), (3, 5), (5, 4)]:
            params = random_params(rng, I, J, equal_p0=False)
            design = build_design(draw_table(rng, params), effort_of(params))
            assert design_rank(design) == design.n_cols


class TestKernelDimension:
    @pytest.mark.parametrize("I,J,expected", [(3, 4, 8), (1, 1, 3), (5, 12, 18)])
    def test_examples(self, I, J, expected):
        assert kernel_dimension_unconstrained(I, J).dimension == expected

    def test_parameter_balance(self):
        assert kernel_dimension_unconstrained(5, 12).overdetermined
        assert not kernel_dimension_unconstrained(2, 3).overdetermined

    def test_incidence_shape(self):
        X = unconstrained_incidence(3, 4)
        assert X.shape == (24, 12 + 8 + 6)
        np.testing.assert_array_equal(X.sum(axis=1), 3)


def _nll_direct(theta, x, e0):
    """Negative log-likelihood of the I=2 model written out cell by cell."""
    I, J = x.shape[:2]
    n = np.exp(theta[: I * J]).reshape(I, J)
    e1 = np.exp(theta[I * J : I * J + J])
    p0 = np.concatenate([[1.0], np.exp(theta[I * J + J :])])
    lam0 = n * e0[None, :] * p0[:, None]
    lam1 = n * e1[None, :]
    return float(np.sum(lam0 - x[:, :, 0] * np.log(lam0)) + np.sum(lam1 - x[:, :, 1] * np.log(lam1)))


class TestFitOracles:
    def test_closed_form_agreement(self, rng):
        for _ in range(10):
            I, J = rng.integers(2, 6), rng.integers(2, 8)
            params = random_params(rng, I, J)
            table = draw_table(rng, params)
            eff = effort_of(params)
            res = _fitted(table, eff, p0=np.ones(I))
            cf = closed_form_mle(table, eff)
            np.testing.assert_allclose(res.n_tilde, cf.values, rtol=1e-8)
            np.testing.assert_allclose(res.params.e_tilde[:, 1], cf.e1, rtol=1e-8)

    def test_matches_statsmodels_on_dense_design(self, rng):
        params = random_params(rng, 4, 5, equal_p0=False)
        table = draw_table(rng, params)
        design = build_design(table, effort_of(params))
        res = fit(design, table)
        y = design.response(table)
        ref = sm.GLM(y, design.matrix(), family=sm.families.Poisson(), offset=design.offset).fit(tol=1e-12)
        np.testing.assert_allclose(res.coef, ref.params, rtol=1e-7, atol=1e-9)
        np.testing.assert_allclose(res.deviance, ref.deviance, rtol=1e-9)
        np.testing.assert_allclose(res.coef_cov, ref.cov_params(), rtol=1e-5, atol=1e-10)

    def test_brute_force_two_by_two(self, rng):
        for _ in range(3):
            params = random_params(rng, 2, 2, equal_p0=False)
            table = draw_table(rng, params)
            x = table.counts.astype(float)
            e0 = params.e_tilde[:, 0]
            best = None
            for _ in range(5):
                start = rng.normal(0.0, 1.0, 7) + np.log(x.mean() + 1)
                r = scipy.optimize.minimize(_nll_direct, start, args=(x, e0), method="BFGS", options={"gtol": 1e-10})
                r = scipy.optimize.minimize(
                    _nll_direct, r.x, args=(x, e0), method="Nelder-Mead",
                    options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000, "maxfev": 40000},
                )
                if best is None or r.fun < best.fun:
                    best = r
            res = _fitted(table, effort_of(params))
            np.testing.assert_allclose(res.n_tilde.ravel(), np.exp(best.x[:4]), rtol=1e-3)
            np.testing.assert_allclose(res.params.e_tilde[:, 1], np.exp(best.x[4:6]), rtol=1e-3)
            np.testing.assert_allclose(res.params.p_tilde[1, 0], np.exp(best.x[6]), rtol=1e-3)


class TestFitProperties:
    def test_score_and_moment_equations(self, rng):
        params = random_params(rng, 4, 6, equal_p0=False, unmonitored=[3])
        table = draw_table(rng, params)
        res = _fitted(table, effort_of(params))
        assert res.converged
        x = table.counts.astype(float)
        assert res.score_max < 1e-6 * (1 + x.sum())
        lam = res.params.intensities()
        np.testing.assert_allclose(lam.sum(axis=2), x.sum(axis=2), rtol=1e-9)
        np.testing.assert_allclose(lam[:, :, 1].sum(axis=0), x[:, :, 1].sum(axis=0), rtol=1e-9)

    def test_deviance_non_increasing(self, rng):
        params = random_params(rng, 5, 8, equal_p0=False)
        res = _fitted(draw_table(rng, params), effort_of(params))
        trace = np.array(res.deviance_trace)
        assert np.all(np.diff(trace) <= 1e-9 * trace[0])

    def test_constraints_hold(self, rng):
        params = random_params(rng, 3, 4, equal_p0=False)
        res = _fitted(draw_table(rng, params), effort_of(params))
        np.testing.assert_array_equal(res.params.p_tilde[:, 1], 1.0)
        assert res.params.p_tilde[0, 0] == 1.0
        np.testing.assert_array_equal(res.params.e_tilde[:, 0], params.e_tilde[:, 0])

    def test_covariance_symmetric_psd(self, rng):
        params = random_params(rng, 3, 5, equal_p0=False)
        res = _fitted(draw_table(rng, params), effort_of(params))
        cov = res.coef_cov
        np.testing.assert_allclose(cov, cov.T, atol=1e-14)
        assert np.linalg.eigvalsh(cov).min() > 0

    def test_separation_flagged(self):
        x0 = np.array([[4, 0, 5], [6, 3, 2]])
        x1 = np.array([[40, 0, 55], [60, 33, 21]])
        table = CountTable.from_arrays(x0, x1)
        res = _fitted(table, EffortSpec(np.ones(3)))
        assert res.separation_flags == frozenset({(0, 1)})
        assert res.n_tilde[0, 1] == 0.0
        assert np.isnan(res.se_n()[0, 1])

    def test_unmonitored_species_has_finite_se(self, rng):
        params = random_params(rng, 4, 5, equal_p0=False, unmonitored=[2])
        res = _fitted(draw_table(rng, params), effort_of(params))
        assert np.all(np.isfinite(res.se_n()[2])) and np.all(res.n_tilde[2] > 0)
        assert res.params.p_tilde[2, 0] == 0.0

    def test_parametric_bootstrap_recovers_fit(self, rng):
        params = random_params(rng, 3, 4, equal_p0=False, scale=60.0)
        table = draw_table(rng, params)
        eff = effort_of(params)
        res = _fitted(table, eff)
        boot = np.array([_fitted(draw_table(rng, res.params), eff).n_tilde for _ in range(200)])
        se = boot.std(axis=0) / np.sqrt(len(boot))
        assert np.all(np.abs(boot.mean(axis=0) - res.n_tilde) < 4 * se + 1e-3 * res.n_tilde)

    def test_standard_errors_match_sampling_spread(self, rng):
        params = random_params(rng, 3, 4, equal_p0=False, scale=50.0)
        eff = effort_of(params)
        fits = [_fitted(draw_table(rng, params), eff) for _ in range(400)]
        spread = np.std([np.log(f.n_tilde) for f in fits], axis=0)
        se = np.mean([f.se_log_n() for f in fits], axis=0)
        np.testing.assert_allclose(se / spread, 1.0, atol=0.2)

    def test_reference_override(self, rng):
        params = random_params(rng, 3, 4, equal_p0=False)
        table = draw_table(rng, params)
        a = _fitted(table, effort_of(params))
        b = _fitted(table, effort_of(params), reference=2)
        # abundance of each species is fixed up to its own constant
        ratio = b.n_tilde / a.n_tilde
        np.testing.assert_allclose(ratio, ratio[:, :1] * np.ones((1, 4)), rtol=1e-8)
        assert b.params.p_tilde[2, 0] == 1.0


class TestDispersion:
    def test_poisson_data(self):
        # X2/df has sd sqrt(2/df) ~ 0.11 per replicate at this size, so the
        # band applies to the Monte Carlo mean; single replicates get 4 sd
        vals = []
        for r in range(20):
            rng = np.random.default_rng(r)
            params = random_params(rng, 10, 20, equal_p0=False, scale=30.0)
            table = draw_table(rng, params)
            res = _fitted(table, effort_of(params))
            vals.append(estimate_dispersion(res, table))
            assert vals[-1] == pytest.approx(res.dispersion)
        df = res.df_resid
        assert 0.85 <= np.mean(vals) <= 1.15
        assert np.all(np.abs(np.array(vals) - 1.0) < 4 * np.sqrt(2.0 / df))

    def test_duplicated_draws(self, rng):
        params = random_params(rng, 10, 20, equal_p0=False, scale=30.0)
        a = draw_table(rng, params)
        b = draw_table(rng, params)
        # two independent draws per cell become two sites with identical parameters
        x0 = np.concatenate([a.dataset(0), b.dataset(0)], axis=1)
        x1 = np.concatenate([a.dataset(1), b.dataset(1)], axis=1)
        table = CountTable.from_arrays(x0, x1)
        e0 = np.tile(params.e_tilde[:, 0], 2)
        res = fit(build_design(table, EffortSpec(e0)), table)
        assert 0.85 <= res.dispersion <= 1.15

    def test_quasi_poisson_scales_covariance(self, rng):
        params = random_params(rng, 4, 6, equal_p0=False)
        table = draw_table(rng, params)
        design = build_design(table, effort_of(params))
        plain = fit(design, table)
        quasi = fit(design, table, FitOptions(dispersion_mode="quasi_poisson"))
        np.testing.assert_allclose(quasi.coef_cov, plain.coef_cov * plain.dispersion, rtol=1e-12)

    def test_no_residual_df(self):
        table = CountTable.from_arrays([[3]], [[5]])
        res = fit(build_design(table, EffortSpec([1.0])), table)
        assert res.df_resid == 0
        with pytest.raises(EstimationError):
            estimate_dispersion(res, table)


class TestPenalty:
    def test_worked_example(self):
        pen = Penalty(2.0, np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert pen.value(np.array([[3.0, 5.0]])) == pytest.approx(16.0)

    def test_constant_rows_free(self):
        pen = Penalty(3.0, np.ones((3, 3)) - np.eye(3))
        assert pen.value(np.array([[2.0, 2.0, 2.0], [7.0, 7.0, 7.0]])) == 0.0

    def test_invalid_proximity(self):
        with pytest.raises(ValueError):
            Penalty(1.0, np.array([[0.0, 1.0], [2.0, 0.0]]))
        with pytest.raises(ValueError):
            Penalty(1.0, np.array([[1.0, 1.0], [1.0, 0.0]]))
        with pytest.raises(ValueError):
            Penalty(-1.0, np.zeros((2, 2)))

    def test_objective_nu_zero_is_loglik(self, rng):
        params = random_params(rng, 3, 4, unmonitored=[1])
        table = draw_table(rng, params)
        design = build_design(table, effort_of(params))
        res = fit(design, table)
        val = penalized_objective(design, table, res.params, 0.0, np.zeros((4, 4)))
        assert val == pytest.approx(res.loglik, rel=1e-12)
        mask = np.broadcast_to(table.monitored[:, None, :], table.counts.shape)
        assert val == pytest.approx(poisson_loglik(table.counts[mask], res.params.intensities()[mask]))

    def test_objective_subtracts_penalty(self, rng):
        params = random_params(rng, 1, 2)
        table = draw_table(rng, params)
        design = build_design(table, effort_of(params))
        p = ParameterSet(np.array([[3.0, 5.0]]), params.e_tilde, params.p_tilde)
        prox = np.array([[0.0, 1.0], [1.0, 0.0]])
        diff = penalized_objective(design, table, p, 0.0, prox) - penalized_objective(design, table, p, 2.0, prox)
        assert diff == pytest.approx(16.0)

    def test_dimension_mismatch(self, rng):
        params = random_params(rng, 2, 3)
        table = draw_table(rng, params)
        design = build_design(table, effort_of(params))
        with pytest.raises(ValueError):
            penalized_objective(design, table, params, 1.0, np.zeros((2, 2)))

    def test_nu_zero_equals_unpenalized(self, rng):
        params = random_params(rng, 3, 5, equal_p0=False)
        table = draw_table(rng, params)
        design = build_design(table, effort_of(params))
        a = fit(design, table)
        b = fit(design, table, FitOptions(penalty=Penalty(0.0, np.ones((5, 5)) - np.eye(5))))
        np.testing.assert_array_equal(a.coef, b.coef)

    def test_penalized_optimum_is_stationary(self, rng):
        params = random_params(rng, 3, 4, equal_p0=False)
        table = draw_table(rng, params)
        design = build_design(table, effort_of(params))
        prox = np.ones((4, 4)) - np.eye(4)
        res = fit(design, table, FitOptions(penalty=Penalty(0.01, prox)))
        assert res.converged

        def objective(beta):
            return penalized_objective(design, table, design.params_from_coef(beta), 0.01, prox)

        base = objective(res.coef)
        for d in np.eye(design.n_cols)[:: max(1, design.n_cols // 6)]:
            for h in (1e-4, -1e-4):
                assert objective(res.coef + h * d) <= base + 1e-9
