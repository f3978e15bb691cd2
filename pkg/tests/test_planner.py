import numpy as np
import pytest

from drpets import envsim, seeds
from drpets.drcore import DRConfig, PNorm
from drpets.ensemble import LOG_VAR_MIN, NormStats, init_ensemble
from drpets.planner import (CEMState, PlannerConfig, PlanningError, TrajectoryBatch,
                            cem_plan, init_cem_state, member_returns, mpc_act,
                            pets_objective, propagate, shift_cem_state,
                            vectorize_objective)

PEND = envsim.EnvKind.PENDULUM


def make_batch(rewards, scores=None):
    rewards = np.asarray(rewards, dtype=float)
    b, q, t = rewards.shape
    if scores is None:
        scores = np.zeros((b, q, t, 2))
    return TrajectoryBatch(observations=np.zeros((b, q, t, 1)), rewards=rewards,
                           scores=np.asarray(scores, dtype=float),
                           diverged_at=np.full((b, q), -1))


def floor_variance_model(obs_dim=3, members=2):
    """Zero-weight ensemble whose predictions are exactly zero-mean deltas at
    the variance floor: rollouts stay at the start observation."""
    model = init_ensemble(obs_dim, members=members, hidden=(8,), seed=0)
    for m in model.members:
        for w in m.weights:
            w[:] = 0.0
        m.biases[-1][obs_dim:] = LOG_VAR_MIN - 5.0  # clamps to the floor
    norm = NormStats.identity(obs_dim + 1, obs_dim)
    return type(model)(model.members, norm, obs_dim, 1)


class TestPropagate:
    def test_one_step_has_rewards_but_no_scores(self, tiny_pendulum_model, rng):
        fn = envsim.reward_from_obs(PEND, envsim.default_params(PEND))
        start = np.array([1.0, 0.0, 0.0])
        batch = propagate(tiny_pendulum_model, start, np.array([0.5]), 4, fn, rng,
                          angle_pair=0)
        assert batch.rewards.shape == (3, 4, 1)
        assert np.all(batch.scores == 0.0)

    def test_floor_variance_constant_reward(self, rng):
        model = floor_variance_model()
        fn = lambda obs, u: np.full(obs.shape[:-1], 2.5)
        batch = propagate(model, np.array([1.0, 0.0, 0.3]), np.zeros(6), 3, fn, rng)
        assert np.allclose(batch.rewards, 2.5)
        assert pets_objective(batch, 1.0) == pytest.approx(6 * 2.5, abs=1e-9)

    def test_deterministic_given_stream(self, tiny_pendulum_model):
        fn = envsim.reward_from_obs(PEND, envsim.default_params(PEND))
        start = np.array([0.0, 1.0, 0.5])
        seq = np.linspace(-1, 1, 5)
        a = propagate(tiny_pendulum_model, start, seq, 3, fn,
                      np.random.default_rng(42), angle_pair=0)
        b = propagate(tiny_pendulum_model, start, seq, 3, fn,
                      np.random.default_rng(42), angle_pair=0)
        assert np.array_equal(a.observations, b.observations)
        assert np.array_equal(a.rewards, b.rewards)
        assert np.array_equal(a.scores, b.scores)

    def test_angle_pair_respected(self, tiny_pendulum_model, rng):
        fn = envsim.reward_from_obs(PEND, envsim.default_params(PEND))
        batch = propagate(tiny_pendulum_model, np.array([1.0, 0.0, 0.0]),
                          np.zeros(4), 2, fn, rng, angle_pair=0)
        circ = batch.observations[..., 0] ** 2 + batch.observations[..., 1] ** 2
        assert np.abs(circ - 1.0).max() < 1e-9


class TestPetsObjective:
    def test_unit_rewards_undiscounted(self):
        batch = make_batch(np.ones((2, 3, 3)))
        assert pets_objective(batch, 1.0) == pytest.approx(3.0, abs=1e-12)

    def test_unit_rewards_halved_discount(self):
        batch = make_batch(np.ones((2, 3, 3)))
        assert pets_objective(batch, 0.5) == pytest.approx(1.75, abs=1e-12)

    def test_two_member_average(self):
        batch = make_batch(np.array([[[2.0]], [[4.0]]]))
        assert pets_objective(batch, 0.9) == pytest.approx(3.0, abs=1e-12)

    def test_zero_discount_gives_first_step_mean(self, rng):
        rewards = rng.normal(0, 1, (3, 5, 7))
        batch = make_batch(rewards)
        assert pets_objective(batch, 0.0) == pytest.approx(rewards[:, :, 0].mean(), abs=1e-12)

    def test_reward_shift_moves_objective_by_discount_sum(self, rng):
        rewards = rng.normal(0, 1, (2, 4, 6))
        shift = 1.7
        base = pets_objective(make_batch(rewards), 0.9)
        shifted = pets_objective(make_batch(rewards + shift), 0.9)
        assert shifted - base == pytest.approx(shift * np.sum(0.9 ** np.arange(6)), abs=1e-9)


class TestCemPlan:
    def quad_config(self, horizon=6):
        return PlannerConfig(horizon=horizon, population=200, elite_count=20,
                             cem_iterations=5, alpha=0.1, particles=1, discount=0.99,
                             init_action_var=1.0)

    def test_recovers_quadratic_optimum(self):
        cfg = self.quad_config()
        target = np.array([0.6, -0.8, 0.2, 1.1, -0.3, 0.0])
        objective = lambda cands: -np.sum((cands - target) ** 2, axis=1)
        best, _ = cem_plan(objective, cfg, init_cem_state(cfg, -2, 2),
                           np.random.default_rng(0), -2.0, 2.0)
        assert np.abs(best - target).max() < 0.05

    def test_init_at_optimum_stays(self):
        cfg = self.quad_config(horizon=4)
        target = np.array([0.5, -0.5, 0.25, 0.0])
        objective = lambda cands: -np.sum((cands - target) ** 2, axis=1)
        init = CEMState(mean=target.copy(), variance=np.full(4, 1e-6))
        best, _ = cem_plan(objective, cfg, init, np.random.default_rng(1), -2.0, 2.0)
        assert np.abs(best - target).max() < 1e-2

    def test_full_population_elites_mean_recursion(self):
        cfg = PlannerConfig(horizon=3, population=50, elite_count=50, cem_iterations=1,
                            alpha=0.25, particles=1, discount=0.99, init_action_var=1.0)
        init = init_cem_state(cfg, -2, 2)
        rng = np.random.default_rng(2)
        draws = np.random.default_rng(2).standard_normal((50, 3))
        cands = np.clip(init.mean + np.sqrt(init.variance) * draws, -2, 2)
        _, state = cem_plan(lambda c: np.zeros(len(c)), cfg, init, rng, -2.0, 2.0)
        expect_mean = 0.25 * init.mean + 0.75 * cands.mean(axis=0)
        expect_var = np.maximum(0.25 * init.variance + 0.75 * cands.var(axis=0), 1e-6)
        assert np.allclose(state.mean, expect_mean, atol=1e-12)
        assert np.allclose(state.variance, expect_var, atol=1e-12)

    def test_elite_best_nondecreasing_for_deterministic_objective(self):
        cfg = self.quad_config()
        target = np.zeros(6)
        best_per_iter = []

        def objective(cands):
            vals = -np.sum((cands - target) ** 2, axis=1)
            best_per_iter.append(vals.max())
            return vals

        cem_plan(objective, cfg, init_cem_state(cfg, -2, 2), np.random.default_rng(3),
                 -2.0, 2.0)
        running = np.maximum.accumulate(best_per_iter)
        assert np.all(np.diff(running) >= 0)

    def test_nonfinite_candidates_ranked_worst(self):
        cfg = PlannerConfig(horizon=2, population=40, elite_count=4, cem_iterations=2,
                            particles=1, discount=0.99, init_action_var=1.0)

        def objective(cands):
            vals = -np.sum(cands ** 2, axis=1)
            vals[::2] = np.nan
            return vals

        best, _ = cem_plan(objective, cfg, init_cem_state(cfg, -2, 2),
                           np.random.default_rng(4), -2.0, 2.0)
        assert np.all(np.isfinite(best))

    def test_all_nonfinite_raises(self):
        cfg = PlannerConfig(horizon=2, population=10, elite_count=2, cem_iterations=1,
                            particles=1, discount=0.99, init_action_var=1.0)
        with pytest.raises(PlanningError):
            cem_plan(lambda c: np.full(len(c), np.nan), cfg, init_cem_state(cfg, -2, 2),
                     np.random.default_rng(5), -2.0, 2.0)

    def test_candidates_respect_bounds(self):
        cfg = self.quad_config(horizon=3)
        seen = []

        def objective(cands):
            seen.append(cands.copy())
            return np.zeros(len(cands))

        cem_plan(objective, cfg, init_cem_state(cfg, -0.5, 0.5), np.random.default_rng(6),
                 -0.5, 0.5)
        allc = np.concatenate(seen)
        assert allc.min() >= -0.5 and allc.max() <= 0.5

    def test_vectorize_objective_wrapper(self):
        fn = vectorize_objective(lambda seq: -float(np.sum(seq ** 2)))
        out = fn(np.array([[1.0, 2.0], [0.0, 0.0]]))
        assert np.allclose(out, [-5.0, 0.0])

    def test_argmax_invariant_to_constant_shift(self):
        cfg = self.quad_config()
        target = np.array([0.3, -0.3, 0.9, -0.9, 0.1, 0.0])
        base = lambda cands: -np.sum((cands - target) ** 2, axis=1)
        shifted = lambda cands: base(cands) + 123.0
        b1, _ = cem_plan(base, cfg, init_cem_state(cfg, -2, 2), np.random.default_rng(7),
                         -2.0, 2.0)
        b2, _ = cem_plan(shifted, cfg, init_cem_state(cfg, -2, 2), np.random.default_rng(7),
                         -2.0, 2.0)
        assert np.array_equal(b1, b2)


class TestMpcAct:
    def cfg(self):
        return PlannerConfig(horizon=6, population=24, elite_count=4, cem_iterations=2,
                             particles=2, discount=0.99, init_action_var=1.0)

    def test_epsilon_zero_matches_pets_action(self, tiny_pendulum_model):
        params = envsim.default_params(PEND)
        cfg = self.cfg()
        obs = np.array([0.9, np.sqrt(1 - 0.81), 0.2])
        warm = init_cem_state(cfg, params.action_low, params.action_high)
        a1, _ = mpc_act(tiny_pendulum_model, obs, cfg, DRConfig(epsilon=0.0, p=PNorm.TWO),
                        PEND, params, warm, np.random.default_rng(11))
        a2, _ = mpc_act(tiny_pendulum_model, obs, cfg, DRConfig(epsilon=0.0, p=PNorm.ONE),
                        PEND, params, warm, np.random.default_rng(11))
        assert a1 == a2

    def test_deterministic(self, tiny_pendulum_model):
        params = envsim.default_params(PEND)
        cfg = self.cfg()
        obs = np.array([1.0, 0.0, 0.0])
        warm = init_cem_state(cfg, params.action_low, params.action_high)
        dr = DRConfig(epsilon=0.1, p=PNorm.TWO)
        a1, s1 = mpc_act(tiny_pendulum_model, obs, cfg, dr, PEND, params, warm,
                         np.random.default_rng(13))
        a2, s2 = mpc_act(tiny_pendulum_model, obs, cfg, dr, PEND, params, warm,
                         np.random.default_rng(13))
        assert a1 == a2
        assert np.array_equal(s1.mean, s2.mean)

    def test_action_in_bounds_and_warm_shifted(self, tiny_pendulum_model):
        params = envsim.default_params(PEND)
        cfg = self.cfg()
        warm = CEMState(mean=np.arange(6, dtype=float) / 10, variance=np.full(6, 0.5))
        action, nxt = mpc_act(tiny_pendulum_model, np.array([1.0, 0.0, 0.0]), cfg,
                              DRConfig(epsilon=0.0, p=PNorm.TWO), PEND, params, warm,
                              np.random.default_rng(17))
        assert params.action_low <= action <= params.action_high
        assert nxt.mean.shape == (6,)
        assert nxt.mean[-1] == 0.0
        assert np.allclose(nxt.variance, cfg.init_action_var)

    def test_shift_cem_state(self):
        cfg = self.cfg()
        state = CEMState(mean=np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
                         variance=np.full(6, 0.123))
        shifted = shift_cem_state(state, cfg)
        assert np.array_equal(shifted.mean, [2.0, 3.0, 4.0, 5.0, 6.0, 0.0])
        assert np.allclose(shifted.variance, cfg.init_action_var)


class TestTrueModelPlanning:
    def test_swingup_beats_random_policy(self):
        """CEM planning through the true pendulum dynamics must dominate a
        random policy by a wide margin over 10 seeds."""
        params = envsim.default_params(PEND)
        cfg = PlannerConfig(horizon=16, population=64, elite_count=8, cem_iterations=3,
                            particles=1, discount=0.99, init_action_var=1.0)

        def true_objective(state):
            def fn(cands):
                m, horizon = cands.shape
                theta = np.full(m, state[0])
                omega = np.full(m, state[1])
                total = np.zeros(m)
                disc = cfg.discount ** np.arange(horizon)
                for k in range(horizon):
                    u = cands[:, k]
                    total += disc[k] * -(envsim.wrap_angle(theta) ** 2
                                         + 0.1 * omega ** 2 + 0.001 * u ** 2)
                    h = params.dt / 2.0
                    for _ in range(2):
                        k1t, k1o = omega, 1.5 * params.gravity / params.pendulum_length * np.sin(theta) + 3 * u / (params.pendulum_mass * params.pendulum_length ** 2)
                        k2t = omega + 0.5 * h * k1o
                        k2o = 1.5 * params.gravity / params.pendulum_length * np.sin(theta + 0.5 * h * k1t) + 3 * u / (params.pendulum_mass * params.pendulum_length ** 2)
                        k3t = omega + 0.5 * h * k2o
                        k3o = 1.5 * params.gravity / params.pendulum_length * np.sin(theta + 0.5 * h * k2t) + 3 * u / (params.pendulum_mass * params.pendulum_length ** 2)
                        k4t = omega + h * k3o
                        k4o = 1.5 * params.gravity / params.pendulum_length * np.sin(theta + h * k3t) + 3 * u / (params.pendulum_mass * params.pendulum_length ** 2)
                        theta = theta + h / 6 * (k1t + 2 * k2t + 2 * k3t + k4t)
                        omega = np.clip(omega + h / 6 * (k1o + 2 * k2o + 2 * k3o + k4o), -8, 8)
                return total
            return fn

        mpc_totals, random_totals = [], []
        for seed in range(10):
            state = envsim.reset(PEND, seed)
            warm = init_cem_state(cfg, params.action_low, params.action_high)
            rng = np.random.default_rng(seed)
            total = 0.0
            for _ in range(120):
                best, st = cem_plan(true_objective(state), cfg, warm, rng,
                                    params.action_low, params.action_high)
                warm = shift_cem_state(st, cfg)
                action = float(best[0])
                total += envsim.reward(PEND, state, action, params)
                state = envsim.step(PEND, state, action, params)
            mpc_totals.append(total)
            rng_pol = np.random.default_rng(1000 + seed)
            record = envsim.run_episode(PEND, params,
                                        lambda s: rng_pol.uniform(-2, 2), 120, seed=seed)
            random_totals.append(record.total_reward)
        assert np.mean(mpc_totals) > np.mean(random_totals) + 300.0


class TestMemberReturns:
    def test_matches_manual_computation(self, rng):
        rewards = rng.normal(0, 1, (2, 3, 4))
        batch = make_batch(rewards)
        disc = 0.9 ** np.arange(4)
        manual = (rewards * disc).sum(axis=2).mean(axis=1)
        assert np.allclose(member_returns(batch, 0.9), manual, atol=1e-12)
