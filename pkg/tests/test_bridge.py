import numpy as np
import pytest

from conftest import random_mgp
from dpdl.bridge import (CondGMM, conditional_plan, drift, drift_batch,
                         log_partition, posterior_mode_index,
                         quadrature_oracle_log_bridge_potential,
                         quadrature_oracle_log_partition, sample_endpoint,
                         simulate_sde, simulate_sde_batch, sinkhorn_eot_oracle,
                         terminal_plan, tilted_log_weights)
from dpdl.errors import (DomainError, NumericError, UnsupportedError,
                         ValidationError)
from dpdl.prototypes import MGP


def single_component(mu=0.8, sigma=0.6, epsilon=0.5):
    return MGP(alpha=np.array([1.0]), mu=np.array([[mu]]),
               sigma=np.array([[sigma]]), epsilon=epsilon)


class TestLogPartition:
    def test_zero_point_gives_zero(self, rng):
        # At x = 0 every tilt vanishes and the weights sum to one.
        for c in (1, 2, 5):
            mgp = random_mgp(rng, c, 3)
            assert abs(log_partition(mgp, np.zeros(3))) < 1e-12

    def test_single_component_closed_form(self):
        mgp = single_component(mu=0.8, sigma=0.6, epsilon=0.5)
        x = np.array([1.3])
        want = 0.8 * 1.3 / 0.5 + 0.6 * 1.3 ** 2 / (2 * 0.5 ** 2)
        assert abs(log_partition(mgp, x) - want) < 1e-12

    def test_matches_quadrature_1d(self, rng):
        for eps in (0.01, 0.3, 1.0):
            mgp = random_mgp(rng, 3, 1, epsilon=eps)
            x = rng.uniform(-1.5, 1.5, 1)
            closed = log_partition(mgp, x)
            brute = quadrature_oracle_log_partition(mgp, x)
            assert abs(closed - brute) <= 1e-8 * max(1.0, abs(brute))

    def test_matches_quadrature_2d(self, rng):
        mgp = random_mgp(rng, 2, 2, epsilon=1.0)
        x = rng.uniform(-1.0, 1.0, 2)
        closed = log_partition(mgp, x)
        brute = quadrature_oracle_log_partition(mgp, x, n_nodes=1500)
        assert abs(closed - brute) <= 1e-7 * max(1.0, abs(brute))

    def test_input_validation(self, rng):
        mgp = random_mgp(rng, 2, 2)
        with pytest.raises(ValidationError):
            log_partition(mgp, np.zeros(3))
        with pytest.raises(ValidationError):
            log_partition(mgp, np.array([np.nan, 0.0]))


class TestConditionalPlan:
    def test_component_structure(self, rng):
        mgp = random_mgp(rng, 4, 3, epsilon=0.7)
        x = rng.normal(size=3)
        cond = conditional_plan(mgp, x)
        assert abs(cond.weights.sum() - 1.0) < 1e-12
        assert np.all(cond.weights > 0)
        assert np.allclose(cond.means, mgp.mu + mgp.sigma * x / 0.7, atol=1e-14)
        assert np.array_equal(cond.variances, mgp.sigma)
        lw = tilted_log_weights(mgp, x)
        want = np.exp(lw - lw.max())
        assert np.allclose(cond.weights, want / want.sum(), atol=1e-13)

    def test_density_identity_on_grid(self, rng):
        # exp(x y / eps) phi(y), renormalized on a wide grid, must equal the
        # conditional plan's own density.
        from dpdl.prototypes import mgp_log_density
        mgp = random_mgp(rng, 3, 1, epsilon=0.8)
        x = rng.uniform(-1.5, 1.5, 1)
        cond = conditional_plan(mgp, x)
        lo = float((cond.means - 12 * np.sqrt(cond.variances)).min())
        hi = float((cond.means + 12 * np.sqrt(cond.variances)).max())
        grid = np.linspace(lo, hi, 8192)
        tilted = grid * x[0] / mgp.epsilon + mgp_log_density(mgp, grid[:, None])
        dens = np.exp(tilted - tilted.max())
        dens /= np.trapezoid(dens, grid)
        model = np.exp(cond.log_density(grid[:, None]))
        assert np.max(np.abs(model - dens)) < 1e-9

    def test_deterministic_endpoint_is_posterior_mean(self, rng):
        mgp = random_mgp(rng, 3, 2)
        cond = conditional_plan(mgp, rng.normal(size=2))
        assert np.array_equal(sample_endpoint(cond), cond.weights @ cond.means)
        assert np.array_equal(sample_endpoint(cond), cond.mean())

    def test_sampled_endpoints_have_right_mean(self, rng):
        mgp = random_mgp(rng, 2, 1, epsilon=0.6)
        cond = conditional_plan(mgp, np.array([0.4]))
        draws = np.array([sample_endpoint(cond, rng)[0] for _ in range(20000)])
        want = float(cond.mean()[0])
        var = float(cond.weights @ (cond.variances[:, 0] + cond.means[:, 0] ** 2) - want ** 2)
        assert abs(draws.mean() - want) < 5 * np.sqrt(var / 20000)


class TestPosteriorMode:
    def test_ignores_mixture_weights(self):
        mgp = MGP(alpha=np.array([0.99, 0.01]),
                  mu=np.array([[-2.0], [2.0]]),
                  sigma=np.array([[1.0], [1.0]]), epsilon=1.0)
        assert posterior_mode_index(mgp, np.array([1.9])) == 1
        assert posterior_mode_index(mgp, np.array([-1.9])) == 0

    def test_tie_breaks_to_lowest_index(self):
        mgp = MGP(alpha=np.array([0.5, 0.5]),
                  mu=np.array([[-1.0], [1.0]]),
                  sigma=np.array([[1.0], [1.0]]), epsilon=1.0)
        assert posterior_mode_index(mgp, np.array([0.0])) == 0


class TestDrift:
    def test_single_component_closed_form(self):
        mgp = single_component(mu=1.1, sigma=0.4, epsilon=0.3)
        x, t = 0.25, 0.6
        tau = 0.3 * (1 - t)
        prec = t / tau + 1 / 0.4
        lin = x / tau + 1.1 / 0.4
        want = (lin / prec - x) / (1 - t)
        got = drift(mgp, np.array([x]), t)[0]
        assert abs(got - want) < 1e-12

    def test_symmetric_mixture_zero_at_origin(self):
        mgp = MGP(alpha=np.array([0.5, 0.5]),
                  mu=np.array([[-1.5], [1.5]]),
                  sigma=np.array([[0.5], [0.5]]), epsilon=0.8)
        for t in (0.0, 0.3, 0.7):
            assert abs(drift(mgp, np.zeros(1), t)[0]) < 1e-12

    def test_batch_agrees_with_single(self, rng):
        mgp = random_mgp(rng, 3, 2, epsilon=0.5)
        xs = rng.normal(size=(6, 2))
        batch = drift_batch(mgp, xs, 0.4)
        for i in range(6):
            assert np.allclose(batch[i], drift(mgp, xs[i], 0.4), atol=0)

    def test_matches_finite_difference_of_potential(self, rng):
        mgp = random_mgp(rng, 2, 1, epsilon=0.5)
        for t in (0.0, 0.5):
            x = rng.uniform(-1.0, 1.0, 1)
            h = 1e-5
            up = quadrature_oracle_log_bridge_potential(mgp, x + h, t)
            down = quadrature_oracle_log_bridge_potential(mgp, x - h, t)
            fd = mgp.epsilon * (up - down) / (2 * h)
            got = float(drift(mgp, x, t)[0])
            assert abs(got - fd) <= 1e-5 * max(1.0, abs(fd))

    def test_time_validation(self, rng):
        mgp = random_mgp(rng, 2, 1)
        with pytest.raises(ValidationError):
            drift(mgp, np.zeros(1), -0.1)
        with pytest.raises(DomainError):
            drift(mgp, np.zeros(1), 1.0)
        with pytest.raises(DomainError):
            drift(mgp, np.zeros(1), 1.5)


class TestTerminalPlan:
    def test_time_zero_equals_conditional(self, rng):
        mgp = random_mgp(rng, 3, 2, epsilon=0.7)
        x = rng.normal(size=2)
        a = conditional_plan(mgp, x)
        b = terminal_plan(mgp, x, 0.0)
        assert np.allclose(a.weights, b.weights, atol=1e-12)
        assert np.allclose(a.means, b.means, atol=1e-10)
        assert np.allclose(a.variances, b.variances, atol=1e-12)

    def test_variances_shrink_near_one(self, rng):
        mgp = random_mgp(rng, 2, 1, epsilon=0.5)
        x = np.array([0.3])
        v_half = terminal_plan(mgp, x, 0.5).variances
        v_late = terminal_plan(mgp, x, 0.99).variances
        assert np.all(v_late < v_half)
        assert np.all(v_late < 0.01)


class TestSimulate:
    def test_shapes_and_times(self, rng):
        mgp = random_mgp(rng, 2, 3, epsilon=0.4)
        traj = simulate_sde(mgp, np.zeros(3), 8, rng)
        assert traj.states.shape == (9, 3)
        assert np.allclose(traj.times, np.arange(9) / 8)
        assert np.array_equal(traj.states[0], np.zeros(3))
        batch = simulate_sde_batch(mgp, np.zeros((5, 3)), 8, rng)
        assert batch.states.shape == (9, 5, 3)

    def test_deterministic_given_generator(self, rng):
        mgp = random_mgp(rng, 2, 1, epsilon=0.4)
        a = simulate_sde(mgp, np.array([0.1]), 16, np.random.default_rng(9))
        b = simulate_sde(mgp, np.array([0.1]), 16, np.random.default_rng(9))
        assert np.array_equal(a.states, b.states)

    def test_single_step_draw_is_exact(self, rng):
        # n_steps=1 samples straight from the conditional plan.
        mgp = random_mgp(rng, 2, 1, epsilon=0.5)
        x0 = np.array([0.2])
        cond = conditional_plan(mgp, x0)
        want = float(cond.mean()[0])
        second = float(cond.weights @ (cond.variances[:, 0] + cond.means[:, 0] ** 2))
        var = second - want ** 2
        traj = simulate_sde_batch(mgp, np.tile(x0, (20000, 1)), 1, rng)
        got = traj.states[-1, :, 0]
        assert abs(got.mean() - want) < 5 * np.sqrt(var / 20000)
        assert abs(got.var() - var) < 0.1 * var

    def test_tight_prototype_pins_terminal(self, rng):
        mgp = MGP(alpha=np.array([1.0]), mu=np.array([[-0.4]]),
                  sigma=np.array([[1e-12]]), epsilon=1e-4)
        traj = simulate_sde_batch(mgp, np.full((32, 1), 0.7), 16, rng)
        assert np.max(np.abs(traj.states[-1, :, 0] + 0.4)) < 1e-3

    def test_validation(self, rng):
        mgp = random_mgp(rng, 2, 1)
        with pytest.raises(ValidationError):
            simulate_sde(mgp, np.zeros(1), 0, rng)
        with pytest.raises(ValidationError):
            simulate_sde_batch(mgp, np.zeros((2, 3)), 4, rng)


class TestQuadratureOracle:
    def test_unsupported_dimension(self, rng):
        mgp = random_mgp(rng, 2, 3)
        with pytest.raises(UnsupportedError):
            quadrature_oracle_log_partition(mgp, np.zeros(3))
        with pytest.raises(UnsupportedError):
            quadrature_oracle_log_bridge_potential(mgp, np.zeros(3), 0.5)

    def test_too_stiff_integrand(self):
        mgp = MGP(alpha=np.array([0.5, 0.5]),
                  mu=np.array([[-50.0], [50.0]]),
                  sigma=np.array([[1e-14], [1e-14]]), epsilon=1.0)
        with pytest.raises(NumericError):
            quadrature_oracle_log_partition(mgp, np.array([0.1]))


class TestSinkhorn:
    def test_single_pair_trivial_plan(self):
        result = sinkhorn_eot_oracle(np.zeros((1, 1)), np.ones((1, 1)), 0.5)
        assert np.allclose(result.plan, [[1.0]], atol=1e-12)
        assert result.marginal_residual < 1e-12

    def test_symmetric_two_by_two(self):
        src = np.array([[-1.0], [1.0]])
        tgt = np.array([[-1.0], [1.0]])
        result = sinkhorn_eot_oracle(src, tgt, 1.0)
        # symmetry forces a symmetric doubly stochastic plan / 2
        assert np.allclose(result.plan, result.plan.T, atol=1e-10)
        assert np.allclose(result.plan.sum(axis=0), 0.5, atol=1e-10)
        assert result.plan[0, 0] > result.plan[0, 1]

    def test_marginals_match_uniform(self, rng):
        src = rng.normal(size=(7, 2))
        tgt = rng.normal(size=(11, 2))
        result = sinkhorn_eot_oracle(src, tgt, 0.7)
        assert np.allclose(result.plan.sum(axis=1), 1 / 7, atol=1e-9)
        assert np.allclose(result.plan.sum(axis=0), 1 / 11, atol=1e-9)
        assert result.iterations >= 1

    def test_validation(self, rng):
        with pytest.raises(ValidationError):
            sinkhorn_eot_oracle(np.zeros((2, 1)), np.zeros((2, 2)), 0.5)
        with pytest.raises(ValidationError):
            sinkhorn_eot_oracle(np.zeros((0, 1)), np.zeros((2, 1)), 0.5)
        with pytest.raises(ValidationError):
            sinkhorn_eot_oracle(np.zeros((2, 1)), np.zeros((2, 1)), 0.0)
