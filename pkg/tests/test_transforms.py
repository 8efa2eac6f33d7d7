"""Transformations, step sizes and Jacobian determinants."""

import math

import numpy as np
import pytest

from looadapt import (
    DomainError,
    PosteriorDraws,
    TransformSpec,
    WeightVector,
    apply_gradient_transform,
    apply_pmm,
    exact_logdet_logistic,
    exact_logdet_relu1,
    finite_difference_jacobian,
    first_order_logdet,
    marginal_stats,
    q_divergence,
    q_kl,
    q_ll,
    q_var,
    step_size,
)
from looadapt.data import Dataset
from looadapt.models import GaussianPrior, LogisticModel, evaluate_posterior, log_posterior_unnorm

from conftest import make_logistic_toy, make_relu_toy


def _toy_for_direction(x, y):
    """One-observation logistic instance with a near-flat prior.

    With log_ref anchored at theta itself the density factor is exactly 1,
    so Q equals its displayed closed form.
    """
    dataset = Dataset(
        features=np.asarray(x, dtype=float)[None, :],
        labels=np.array([y]),
        feature_names=tuple(f"x{j}" for j in range(len(x))),
    )
    model = LogisticModel(p=len(x))
    prior = GaussianPrior.isotropic(len(x), 1e6)
    return model, dataset, prior


class TestDirections:
    def test_kl_sign_and_magnitude_at_mu_zero(self):
        model, dataset, prior = _toy_for_direction([1.0, 1.0], 1)
        theta = np.zeros(2)
        np.testing.assert_allclose(q_kl(model, theta, dataset, prior, 0), [-1.0, -1.0])

    def test_kl_sign_flip_for_negative_label(self):
        model, dataset, prior = _toy_for_direction([1.0, 1.0], 0)
        np.testing.assert_allclose(q_kl(model, np.zeros(2), dataset, prior, 0), [1.0, 1.0])

    def test_kl_zero_feature_vector(self):
        model, dataset, prior = _toy_for_direction([0.0, 0.0], 1)
        np.testing.assert_allclose(q_kl(model, np.ones(2), dataset, prior, 0), [0.0, 0.0])

    def test_var_matches_kl_at_mu_zero(self):
        model, dataset, prior = _toy_for_direction([1.0, 1.0], 1)
        np.testing.assert_allclose(q_var(model, np.zeros(2), dataset, prior, 0), [-1.0, -1.0])

    def test_var_doubles_exponent(self):
        # y = 0, mu = ln 2, x = [1, 0]: Q = e^{2 ln 2} x = [4, 0]
        model, dataset, prior = _toy_for_direction([1.0, 0.0], 0)
        theta = np.array([math.log(2.0), 0.0])
        np.testing.assert_allclose(
            q_var(model, theta, dataset, prior, 0), [4.0, 0.0], rtol=1e-12
        )

    def test_ll_is_negative_likelihood_gradient(self):
        model, dataset, prior = _toy_for_direction([1.0, 2.0], 1)
        np.testing.assert_allclose(q_ll(model, np.zeros(2), dataset, 0), [-0.5, -1.0])
        model0, dataset0, _ = _toy_for_direction([1.0, 2.0], 0)
        np.testing.assert_allclose(q_ll(model0, np.zeros(2), dataset0, 0), [0.5, 1.0])

    def test_ll_relu_inactive_only_bias_moves(self):
        model, dataset, prior, draws = make_relu_toy(seed=21, d=2, p=2, n=3)
        theta = np.concatenate([[-1.0, -1.0, -2.0, -2.0], [1.0, 1.0], [0.3]])
        x = np.abs(dataset.features[0])  # positive features, negative W1: inactive
        ds = Dataset(features=x[None, :], labels=np.array([1]), feature_names=("a", "b"))
        q = q_ll(model, theta, ds, 0)
        assert q[-1] != 0.0
        np.testing.assert_array_equal(q[:-1], 0.0)

    def test_label_flip_sign_covariance(self):
        model, dataset, prior = _toy_for_direction([0.7, -0.4], 1)
        model0, dataset0, prior0 = _toy_for_direction([0.7, -0.4], 0)
        theta = np.zeros(2)  # mu = 0 keeps the exponential factor equal
        for qf in (q_kl, q_var):
            plus = qf(model, theta, dataset, prior, 0)
            minus = qf(model0, theta, dataset0, prior0, 0)
            np.testing.assert_allclose(plus, -minus, atol=1e-12)


class TestStepSize:
    def _stats(self, sd):
        values = np.vstack([np.zeros_like(sd), 2.0 * np.asarray(sd, dtype=float)])
        draws = PosteriorDraws(values=values, param_names=tuple(f"p{j}" for j in range(len(sd))))
        return marginal_stats(draws)

    def test_direct_evaluation(self):
        stats = self._stats([1.0, 1.0])
        assert step_size(np.array([[2.0, 1.0]]), stats, 0.5) == pytest.approx(0.25)

    def test_all_zero_q_returns_zero(self):
        stats = self._stats([1.0, 1.0])
        assert step_size(np.zeros((3, 2)), stats, 1.0) == 0.0

    def test_zero_sd_with_moving_component(self):
        stats = self._stats([1.0, 0.0])
        assert step_size(np.array([[1.0, 1.0]]), stats, 1.0) == 0.0

    def test_zero_components_excluded(self):
        stats = self._stats([1.0, 1.0])
        h = step_size(np.array([[0.0, 2.0]]), stats, 1.0)
        assert h == pytest.approx(0.5)


class TestApplyGradientTransform:
    def test_zero_direction_yields_identity(self):
        # single-observation dataset with x = 0: Q vanishes for KL/Var/LL
        dataset = Dataset(features=np.zeros((1, 2)), labels=np.array([1]), feature_names=("a", "b"))
        model = LogisticModel(p=2)
        prior = GaussianPrior.isotropic(2, 1.0)
        rng = np.random.default_rng(0)
        draws = PosteriorDraws(values=rng.normal(size=(20, 2)), param_names=("a", "b"))
        stats = marginal_stats(draws)
        spec = TransformSpec(kind="KL", hbar=0.5, observation_index=0)
        out = apply_gradient_transform(spec, model, draws, dataset, prior, stats)
        assert out.degenerate
        assert out.h_used == 0.0
        np.testing.assert_array_equal(out.phi, draws.values)
        np.testing.assert_array_equal(out.log_jac_det, 0.0)

    def test_step_bound_holds(self):
        model, dataset, prior, draws = make_logistic_toy(seed=31)
        stats = marginal_stats(draws)
        ev = evaluate_posterior(model, draws.values, dataset, prior)
        for kind in ("KL", "Var", "LL"):
            for hbar in (1.0, 0.25):
                spec = TransformSpec(kind=kind, hbar=hbar, observation_index=1)
                out = apply_gradient_transform(spec, model, draws, dataset, prior, stats, ev)
                if out.degenerate:
                    continue
                moving = stats.sd > 0
                disp = np.abs(out.phi - draws.values)[:, moving] / stats.sd[moving]
                assert disp.max() <= hbar + 1e-9
                assert out.max_step_sd <= hbar + 1e-9

    @pytest.mark.parametrize("kind", ["KL", "Var", "LL"])
    def test_logistic_determinant_matches_fd(self, kind):
        model, dataset, prior, draws = make_logistic_toy(seed=32, n=6, p=2)
        stats = marginal_stats(draws)
        ev = evaluate_posterior(model, draws.values, dataset, prior)
        spec = TransformSpec(kind=kind, hbar=0.25, observation_index=2)
        out = apply_gradient_transform(spec, model, draws, dataset, prior, stats, ev)
        assert not out.degenerate and out.exact_jacobian
        ref = ev.log_ref

        def map_fn(theta):
            if kind == "KL":
                q = q_kl(model, theta, dataset, prior, 2, log_ref=ref)
            elif kind == "Var":
                q = q_var(model, theta, dataset, prior, 2, log_ref=ref)
            else:
                q = q_ll(model, theta, dataset, 2)
            return theta + out.h_used * q

        for k in (0, 7, 19):
            jac = finite_difference_jacobian(map_fn, draws.values[k], 1e-6 * stats.sd)
            fd_logdet = math.log(abs(np.linalg.det(jac)))
            if abs(fd_logdet) < 1e-4:
                continue
            assert out.log_jac_det[k] == pytest.approx(fd_logdet, rel=1e-4)

    @pytest.mark.parametrize("kind", ["KL", "Var", "LL"])
    def test_relu_determinant_matches_fd(self, kind):
        model, dataset, prior, draws = make_relu_toy(seed=33, d=2, p=2, n=5)
        stats = marginal_stats(draws)
        ev = evaluate_posterior(model, draws.values, dataset, prior)
        spec = TransformSpec(kind=kind, hbar=0.25, observation_index=1)
        out = apply_gradient_transform(spec, model, draws, dataset, prior, stats, ev)
        assert not out.degenerate and out.exact_jacobian
        ref = ev.log_ref

        def map_fn(theta):
            if kind == "KL":
                q = q_kl(model, theta, dataset, prior, 1, log_ref=ref)
            elif kind == "Var":
                q = q_var(model, theta, dataset, prior, 1, log_ref=ref)
            else:
                q = q_ll(model, theta, dataset, 1)
            return theta + out.h_used * q

        checked = 0
        for k in range(draws.num_draws):
            margin = min(abs(model.relu_forward(draws.values[k], x)[1]).min() for x in dataset.features)
            if margin < 1e-3:
                continue
            jac = finite_difference_jacobian(map_fn, draws.values[k], 1e-7 * stats.sd)
            fd_logdet = math.log(abs(np.linalg.det(jac)))
            if abs(fd_logdet) < 1e-4:
                continue
            assert out.log_jac_det[k] == pytest.approx(fd_logdet, rel=2e-4)
            checked += 1
            if checked >= 5:
                break
        assert checked >= 3


class TestExactLogdetOps:
    def test_zero_step_is_identity(self):
        model, dataset, prior, draws = make_logistic_toy(seed=34)
        assert exact_logdet_logistic("KL", model, draws.values[0], dataset, prior, 0, 0.0) == 0.0
        rmodel, rdataset, rprior, rdraws = make_relu_toy(seed=35)
        assert exact_logdet_relu1("Var", rmodel, rdraws.values[0], rdataset, rprior, 0, 0.0) == 0.0

    def test_zero_feature_vector_gives_zero_logdet(self):
        dataset = Dataset(features=np.zeros((1, 3)), labels=np.array([1]), feature_names=("a", "b", "c"))
        model = LogisticModel(p=3)
        prior = GaussianPrior.isotropic(3, 1.0)
        assert exact_logdet_logistic("KL", model, np.ones(3), dataset, prior, 0, 0.3) == 0.0

    def test_logistic_matches_fd_random_instance(self):
        model, dataset, prior, draws = make_logistic_toy(seed=36, p=3)
        theta = draws.values[4]
        i = 2
        ref = log_posterior_unnorm(model, theta, dataset, prior)
        h = 0.05
        exact = exact_logdet_logistic("KL", model, theta, dataset, prior, i, h, log_ref=ref)
        map_fn = lambda t: t + h * q_kl(model, t, dataset, prior, i, log_ref=ref)
        jac = finite_difference_jacobian(map_fn, theta, 1e-6 * np.ones(3))
        assert exact == pytest.approx(math.log(abs(np.linalg.det(jac))), rel=1e-4)

    def test_relu_inactive_reduces_to_rank_one(self):
        model, dataset, prior, draws = make_relu_toy(seed=37, d=2, p=2, n=3)
        theta = np.concatenate([[-1.0, -1.0, -2.0, -2.0], [0.5, 0.5], [0.2]])
        x = np.abs(dataset.features[0]) + 0.1
        ds = Dataset(features=x[None, :], labels=np.array([0]), feature_names=("a", "b"))
        h = 0.1
        # only the bias moves: grad_mu = e_last, so det = 1 + h sigma'(mu)
        mu = model.mu(theta, x)
        from looadapt.models import sigmoid_slope

        expected = math.log(1.0 + h * float(sigmoid_slope(mu)))
        got = exact_logdet_relu1("LL", model, theta, ds, prior, 0, h)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_model_kind_guards(self):
        model, dataset, prior, draws = make_logistic_toy(seed=38)
        with pytest.raises(DomainError):
            exact_logdet_relu1("KL", model, draws.values[0], dataset, prior, 0, 0.1)
        with pytest.raises(DomainError):
            exact_logdet_logistic("PMM1", model, draws.values[0], dataset, prior, 0, 0.1)


class TestFirstOrderLogdet:
    def test_zero_step(self):
        assert first_order_logdet(3.7, 0.0) == 0.0

    def test_forced_singularity(self):
        assert first_order_logdet(-1.0, 1.0) == -math.inf

    def test_small_h_remainder_is_quadratic(self):
        """The O(h) truncation of the log-determinant has an h^2 remainder.

        For a linear mean function the Jacobian of Q is rank one, so
        |1 + h div Q| IS the exact determinant and the remainder of
        first_order_logdet is zero; the quadratic remainder appears between
        the truncated log-determinant h * div Q and the exact log.
        """
        model, dataset, prior, draws = make_logistic_toy(seed=39, p=2)
        theta = draws.values[1]
        i = 0
        ref = log_posterior_unnorm(model, theta, dataset, prior)
        div = q_divergence("KL", model, theta, dataset, prior, i, log_ref=ref)
        assert abs(div) > 1e-3
        hs = np.array([1e-2, 1e-3, 1e-4])
        exact = np.array(
            [exact_logdet_logistic("KL", model, theta, dataset, prior, i, h, log_ref=ref) for h in hs]
        )
        # Eq-form first order equals exact for rank-one Jacobians.
        first = np.array([first_order_logdet(div, h) for h in hs])
        np.testing.assert_allclose(first, exact, atol=1e-13)
        # log-space truncation: remainder scales as h^2
        remainder = np.abs(hs * div - exact)
        slope = np.polyfit(np.log(hs), np.log(remainder), 1)[0]
        assert slope == pytest.approx(2.0, abs=0.2)


class TestApplyPmm:
    def _setup(self, seed=40, num_draws=60, p=2):
        rng = np.random.default_rng(seed)
        values = rng.normal(size=(num_draws, p))
        draws = PosteriorDraws(values=values, param_names=tuple(f"b{j}" for j in range(p)))
        stats = marginal_stats(draws)
        raw = rng.uniform(0.5, 2.0, size=num_draws)
        weights = WeightVector.from_log_weights(np.log(raw))
        return draws, stats, weights

    def test_identity_when_weighted_mean_matches(self):
        draws, stats, _ = self._setup()
        uniform = WeightVector.from_log_weights(np.zeros(draws.num_draws))
        spec = TransformSpec(kind="PMM1", hbar=1.0, observation_index=0)
        out = apply_pmm(spec, draws, uniform, stats)
        np.testing.assert_allclose(out.phi, draws.values, atol=1e-12)
        np.testing.assert_array_equal(out.log_jac_det, 0.0)

    def test_pmm1_shifts_every_draw_and_recenters(self):
        draws, stats, weights = self._setup()
        spec = TransformSpec(kind="PMM1", hbar=1.0, observation_index=0)
        out = apply_pmm(spec, draws, weights, stats)
        shift = out.phi - draws.values
        assert np.ptp(shift, axis=0).max() < 1e-12  # same shift for every draw
        wstats = marginal_stats(draws, weights.normalized)
        np.testing.assert_allclose(out.phi.mean(axis=0), wstats.weighted_mean, atol=1e-12)
        np.testing.assert_array_equal(out.log_jac_det, 0.0)

    def test_pmm2_quadrupled_weighted_variance(self):
        # eight symmetric draws with mass on the extremes: v = a^2 / 4 while
        # v_w = a^2, so the sd ratio is exactly 2 in both components
        column = np.array([-1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0])
        values = np.stack([column, column], axis=1)
        draws = PosteriorDraws(values=values, param_names=("a", "b"))
        stats = marginal_stats(draws)
        log_w = np.full(8, -np.inf)
        log_w[0] = log_w[-1] = math.log(0.5)
        weights = WeightVector.from_log_weights(log_w)
        spec = TransformSpec(kind="PMM2", hbar=1.0, observation_index=0)
        out = apply_pmm(spec, draws, weights, stats)
        # log det = P log 2 with P = 2
        np.testing.assert_allclose(out.log_jac_det, 2.0 * math.log(2.0), atol=1e-12)
        # each centered coordinate doubled, recentered at the weighted mean (0)
        np.testing.assert_allclose(out.phi, 2.0 * values, atol=1e-12)

    def test_pmm2_unavailable_with_constant_column(self):
        values = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
        draws = PosteriorDraws(values=values, param_names=("a", "b"))
        stats = marginal_stats(draws)
        weights = WeightVector.from_log_weights(np.zeros(3))
        spec = TransformSpec(kind="PMM2", hbar=0.5, observation_index=0)
        out = apply_pmm(spec, draws, weights, stats)
        assert out.degenerate
        assert "pmm2-unavailable" in out.flags

    def test_kind_guard(self):
        draws, stats, weights = self._setup()
        with pytest.raises(DomainError):
            apply_pmm(TransformSpec(kind="KL", hbar=1.0, observation_index=0), draws, weights, stats)


class TestQDivergence:
    def test_matches_fd_divergence(self):
        model, dataset, prior, draws = make_logistic_toy(seed=41, p=3)
        theta = draws.values[2]
        i = 1
        ref = log_posterior_unnorm(model, theta, dataset, prior)
        for kind, qf in (("KL", q_kl), ("Var", q_var)):
            div = q_divergence(kind, model, theta, dataset, prior, i, log_ref=ref)
            jac = finite_difference_jacobian(
                lambda t: qf(model, t, dataset, prior, i, log_ref=ref), theta, 1e-6 * np.ones(3)
            )
            assert div == pytest.approx(np.trace(jac), rel=1e-5)

    def test_ll_divergence(self):
        model, dataset, prior, draws = make_logistic_toy(seed=42, p=2)
        theta = draws.values[0]
        div = q_divergence("LL", model, theta, dataset, prior, 0)
        jac = finite_difference_jacobian(
            lambda t: q_ll(model, t, dataset, 0), theta, 1e-6 * np.ones(2)
        )
        assert div == pytest.approx(np.trace(jac), rel=1e-5)
