import numpy as np
import pytest

from drpets import envsim
from drpets.drcore import (DRConfig, GradientEstimate, OracleLimitError, PNorm,
                           dr_objective, dr_value, dual_function, dual_optimizers,
                           grad_estimate, penalty, worstcase_oracle)
from drpets.planner import PlannerConfig, TrajectoryBatch, member_returns, propagate, pets_objective

PEND = envsim.EnvKind.PENDULUM


def estimate(g_rows):
    g = np.asarray(g_rows, dtype=float)
    return GradientEstimate(per_member=g, norms=np.linalg.norm(g, axis=1))


def make_batch(rewards, scores):
    rewards = np.asarray(rewards, dtype=float)
    scores = np.asarray(scores, dtype=float)
    b, q, t = rewards.shape
    return TrajectoryBatch(observations=np.zeros((b, q, t, 1)), rewards=rewards,
                           scores=scores, diverged_at=np.full((b, q), -1))


class TestGradEstimate:
    def test_zero_rewards_give_zero_gradient(self, rng):
        scores = rng.normal(0, 1, (2, 5, 4, 2))
        scores[:, :, 0, :] = 0.0
        batch = make_batch(np.zeros((2, 5, 4)), scores)
        est = grad_estimate(batch, 0.9)
        assert np.array_equal(est.per_member, np.zeros((2, 2)))
        assert np.array_equal(est.norms, np.zeros(2))

    def test_single_step_horizon_gives_zero(self, rng):
        batch = make_batch(rng.normal(0, 1, (2, 3, 1)), np.zeros((2, 3, 1, 2)))
        est = grad_estimate(batch, 0.9)
        assert np.array_equal(est.per_member, np.zeros((2, 2)))

    def test_matches_manual_formula(self, rng):
        b, q, t, dim = 2, 4, 5, 3
        rewards = rng.normal(0, 1, (b, q, t))
        scores = rng.normal(0, 1, (b, q, t, 2 * dim))
        scores[:, :, 0, :] = 0.0
        batch = TrajectoryBatch(observations=np.zeros((b, q, t, dim)), rewards=rewards,
                                scores=scores, diverged_at=np.full((b, q), -1))
        gamma = 0.85
        manual = np.zeros((b, q, 2 * dim))
        for k in range(1, t):
            togo = sum(gamma ** (i - k) * rewards[:, :, i] for i in range(k, t))
            manual += gamma ** k * scores[:, :, k] * togo[..., None]
        est = grad_estimate(batch, gamma)
        assert np.allclose(est.per_member, manual.mean(axis=1), atol=1e-12)
        assert np.allclose(est.norms, np.linalg.norm(est.per_member, axis=1), atol=1e-12)

    def test_two_step_linear_gaussian_chain_oracle(self):
        # x1 = x0 + m + sigma z with quadratic state reward r(x) = -(x - c)^2:
        #   dJ/dm = -2 gamma (x0 + m - c),  dJ/d(logvar) = -gamma sigma^2
        x0, m, c, gamma = 0.3, 0.2, 1.0, 0.9
        logvar = np.log(0.25)
        sigma = np.sqrt(0.25)
        q_count = 10_000
        rng = np.random.default_rng(321)
        z = rng.standard_normal(q_count)
        x1 = x0 + m + sigma * z
        rewards = np.stack([np.full(q_count, -(x0 - c) ** 2), -(x1 - c) ** 2])[None].transpose(0, 2, 1)
        scores = np.zeros((1, q_count, 2, 2))
        scores[0, :, 1, 0] = z / sigma
        scores[0, :, 1, 1] = 0.5 * (z ** 2 - 1.0)
        batch = TrajectoryBatch(observations=np.zeros((1, q_count, 2, 1)),
                                rewards=rewards, scores=scores,
                                diverged_at=np.full((1, q_count), -1))
        est = grad_estimate(batch, gamma)
        expected_mean = -2.0 * gamma * (x0 + m - c)
        expected_logvar = -gamma * sigma ** 2
        assert est.per_member[0, 0] == pytest.approx(expected_mean, rel=0.15)
        assert est.per_member[0, 1] == pytest.approx(expected_logvar, rel=0.15)


class TestDrValue:
    def test_epsilon_zero_is_plain_mean(self, rng):
        j = rng.normal(0, 1, 4)
        est = estimate(rng.normal(0, 1, (4, 3)))
        assert dr_value(j, est, DRConfig(epsilon=0.0, p=PNorm.TWO)) == np.mean(j)

    def test_worked_two_member_example(self):
        j = np.array([1.0, 3.0])
        est = estimate([[2.0, 0.0, 0.0], [0.0, 4.0, 0.0]])
        assert dr_value(j, est, DRConfig(0.5, PNorm.TWO)) == pytest.approx(
            2.0 - 0.5 * np.sqrt(10.0), abs=1e-12)
        assert dr_value(j, est, DRConfig(0.5, PNorm.ONE)) == pytest.approx(0.0, abs=1e-12)
        assert dr_value(j, est, DRConfig(0.5, PNorm.INFINITY)) == pytest.approx(0.5, abs=1e-12)

    def test_single_member(self):
        est = estimate([[3.0, 0.0]])
        assert dr_value(np.array([5.0]), est, DRConfig(1.0, PNorm.TWO)) == pytest.approx(2.0, abs=1e-12)

    def test_monotone_nonincreasing_in_epsilon(self, rng):
        j = rng.normal(0, 2, 3)
        est = estimate(rng.normal(0, 1, (3, 4)))
        for p in PNorm:
            values = [dr_value(j, est, DRConfig(e, p)) for e in (0.0, 0.1, 0.5, 1.0)]
            assert all(a > b for a, b in zip(values, values[1:]))

    def test_penalty_ordering_across_p(self, rng):
        for _ in range(20):
            j = rng.normal(0, 2, 5)
            est = estimate(rng.normal(0, 1, (5, 3)))
            cfgs = {p: DRConfig(0.3, p) for p in PNorm}
            v1 = dr_value(j, est, cfgs[PNorm.ONE])
            v2 = dr_value(j, est, cfgs[PNorm.TWO])
            vinf = dr_value(j, est, cfgs[PNorm.INFINITY])
            assert v1 <= v2 + 1e-12
            assert v2 <= vinf + 1e-12

    def test_member_count_mismatch_rejected(self):
        est = estimate([[1.0, 0.0]])
        with pytest.raises(ValueError):
            dr_value(np.array([1.0, 2.0]), est, DRConfig(0.1, PNorm.TWO))


class TestDualOptimizers:
    def test_worked_example(self):
        diag = dual_optimizers(np.array([2.0, 4.0]), DRConfig(0.5, PNorm.TWO))
        assert diag.lambda_star == pytest.approx(np.sqrt(10.0), abs=1e-12)
        assert np.allclose(diag.delta_star, [2 / (2 * np.sqrt(10)), 4 / (2 * np.sqrt(10))],
                           atol=1e-12)
        assert not diag.degenerate

    def test_ball_saturation(self, rng):
        for _ in range(20):
            norms = rng.uniform(0.01, 5, int(rng.integers(1, 6)))
            eps = float(rng.uniform(0.05, 2))
            diag = dual_optimizers(norms, DRConfig(eps, PNorm.TWO))
            assert np.mean(diag.delta_star ** 2) == pytest.approx(eps ** 2, abs=1e-9)

    def test_equal_norms_saturate_uniformly(self):
        diag = dual_optimizers(np.array([1.7, 1.7, 1.7]), DRConfig(0.25, PNorm.TWO))
        assert np.allclose(diag.delta_star, 0.25, atol=1e-12)

    def test_epsilon_scaling(self):
        a = dual_optimizers(np.array([2.0, 4.0]), DRConfig(0.5, PNorm.TWO))
        b = dual_optimizers(np.array([2.0, 4.0]), DRConfig(1.0, PNorm.TWO))
        assert b.lambda_star == pytest.approx(a.lambda_star / 2, abs=1e-12)
        assert np.allclose(b.delta_star, 2 * a.delta_star, atol=1e-12)

    def test_degenerate_zero_gradients(self):
        diag = dual_optimizers(np.zeros(3), DRConfig(0.5, PNorm.TWO))
        assert diag.degenerate
        assert diag.lambda_star == 0.0
        assert np.array_equal(diag.delta_star, np.zeros(3))

    def test_requires_p_two_and_positive_epsilon(self):
        with pytest.raises(ValueError):
            dual_optimizers(np.ones(2), DRConfig(0.5, PNorm.ONE))
        with pytest.raises(ValueError):
            dual_optimizers(np.ones(2), DRConfig(0.0, PNorm.TWO))

    def test_dual_function_reproduces_penalty_and_concavity(self, rng):
        norms = rng.uniform(0.1, 4, 4)
        cfg = DRConfig(0.7, PNorm.TWO)
        diag = dual_optimizers(norms, cfg)
        at_star = dual_function(diag.lambda_star, norms, cfg)
        assert at_star == pytest.approx(-cfg.epsilon * np.sqrt(np.mean(norms ** 2)), abs=1e-9)
        assert dual_function(1.1 * diag.lambda_star, norms, cfg) < at_star
        assert dual_function(0.9 * diag.lambda_star, norms, cfg) < at_star


class TestWorstcaseOracle:
    def test_epsilon_zero(self):
        est = estimate([[1.0, 2.0]])
        assert worstcase_oracle(np.array([4.0]), est, DRConfig(0.0, PNorm.TWO)) == 4.0

    def test_single_member_closed_form(self):
        est = estimate([[3.0, 4.0]])  # norm 5
        for p in PNorm:
            got = worstcase_oracle(np.array([1.0]), est, DRConfig(0.2, p), 200)
            assert got == pytest.approx(1.0 - 0.2 * 5.0, abs=1e-3)

    def test_agrees_with_dr_value_on_worked_example(self):
        j = np.array([1.0, 3.0])
        est = estimate([[2.0, 0.0, 0.0], [0.0, 4.0, 0.0]])
        for p in PNorm:
            cfg = DRConfig(0.5, p)
            assert worstcase_oracle(j, est, cfg, 200) == pytest.approx(
                dr_value(j, est, cfg), abs=1e-3)

    def test_agreement_on_random_instances(self, rng):
        for _ in range(30):
            b = int(rng.integers(1, 3))
            dim = int(rng.integers(1, 4))
            est = estimate(rng.normal(0, 2, (b, dim)))
            j = rng.normal(0, 3, b)
            eps = float(rng.uniform(0.05, 1.0))
            for p in PNorm:
                cfg = DRConfig(eps, p)
                assert worstcase_oracle(j, est, cfg, 200) == pytest.approx(
                    dr_value(j, est, cfg), abs=1e-3)

    def test_refuses_large_instances(self):
        est = estimate(np.ones((3, 2)))
        with pytest.raises(OracleLimitError):
            worstcase_oracle(np.ones(3), est, DRConfig(0.1, PNorm.TWO))
        est = estimate(np.ones((1, 6)))
        with pytest.raises(OracleLimitError):
            worstcase_oracle(np.ones(1), est, DRConfig(0.1, PNorm.TWO))


class TestDrObjective:
    def reward_fn(self):
        return envsim.reward_from_obs(PEND, envsim.default_params(PEND))

    def test_epsilon_zero_equals_pets_objective_exactly(self, tiny_pendulum_model):
        cfg = PlannerConfig(horizon=6, population=10, elite_count=2, cem_iterations=1,
                            particles=3, discount=0.95, init_action_var=1.0)
        seq = np.linspace(-1, 1, 6)
        start = np.array([1.0, 0.0, 0.0])
        value = dr_objective(tiny_pendulum_model, start, seq, cfg,
                             DRConfig(0.0, PNorm.TWO), self.reward_fn(),
                             np.random.default_rng(5), angle_pair=0)
        batch = propagate(tiny_pendulum_model, start, seq, cfg.particles,
                          self.reward_fn(), np.random.default_rng(5), angle_pair=0)
        assert value == pets_objective(batch, cfg.discount)

    def test_single_step_equals_pets_for_any_epsilon(self, tiny_pendulum_model):
        cfg = PlannerConfig(horizon=1, population=10, elite_count=2, cem_iterations=1,
                            particles=3, discount=0.95, init_action_var=1.0)
        start = np.array([1.0, 0.0, 0.0])
        for eps in (0.0, 0.3, 2.0):
            value = dr_objective(tiny_pendulum_model, start, np.array([0.5]), cfg,
                                 DRConfig(eps, PNorm.TWO), self.reward_fn(),
                                 np.random.default_rng(6), angle_pair=0)
            batch = propagate(tiny_pendulum_model, start, np.array([0.5]), cfg.particles,
                              self.reward_fn(), np.random.default_rng(6), angle_pair=0)
            assert value == pets_objective(batch, cfg.discount)

    def test_positive_epsilon_strictly_below_zero_epsilon(self, tiny_pendulum_model):
        cfg = PlannerConfig(horizon=6, population=10, elite_count=2, cem_iterations=1,
                            particles=4, discount=0.95, init_action_var=1.0)
        seq = np.linspace(-1, 1, 6)
        start = np.array([0.8, 0.6, -0.5])
        v0 = dr_objective(tiny_pendulum_model, start, seq, cfg, DRConfig(0.0, PNorm.TWO),
                          self.reward_fn(), np.random.default_rng(7), angle_pair=0)
        v1 = dr_objective(tiny_pendulum_model, start, seq, cfg, DRConfig(0.2, PNorm.TWO),
                          self.reward_fn(), np.random.default_rng(7), angle_pair=0)
        assert v1 < v0


class TestPenalty:
    def test_batch_axis(self):
        norms = np.array([[1.0, 2.0], [3.0, 3.0]])
        assert np.allclose(penalty(norms, PNorm.TWO),
                           [np.sqrt(2.5), 3.0], atol=1e-12)
        assert np.allclose(penalty(norms, PNorm.ONE), [2.0, 3.0], atol=1e-12)
        assert np.allclose(penalty(norms, PNorm.INFINITY), [1.5, 3.0], atol=1e-12)
