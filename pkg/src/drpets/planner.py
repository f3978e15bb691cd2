"""Planning loop: particle propagation, Monte-Carlo objectives, CEM, MPC.

Each ensemble member propagates its own block of Q particles, so one rollout
batch serves both the nominal objective (per-member mean discounted return)
and the robust penalty (per-member score-weighted reward-to-go sums). The
CEM optimizer evaluates whole candidate populations through the rollout
kernel; all randomness flows through explicitly passed generators.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import envsim
from ._kernels import rollout_returns
from .ensemble import (LOG_VAR_MAX, LOG_VAR_MIN, EnsembleModel, GaussianPrediction,
                       forward, sample_next, score)

VARIANCE_FLOOR = 1e-6


class PlanningError(RuntimeError):
    pass


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = 25
    population: int = 400
    elite_count: int = 40
    cem_iterations: int = 5
    alpha: float = 0.1
    particles: int = 10
    discount: float = 0.99
    init_action_var: float = 1.0
    threads: int = 1  # OpenMP threads inside the rollout kernel

    def __post_init__(self) -> None:
        if not 1 <= self.elite_count <= self.population:
            raise ValueError("need 1 <= elite_count <= population")
        if self.horizon < 1 or self.particles < 1 or self.cem_iterations < 1:
            raise ValueError("horizon, particles and cem_iterations must be >= 1")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


@dataclass(frozen=True)
class CEMState:
    mean: np.ndarray      # (T,)
    variance: np.ndarray  # (T,)


@dataclass(frozen=True)
class TrajectoryBatch:
    """Per-member, per-particle rollout data.

    ``scores[:, :, k]`` is the score of the k-th sampled transition under
    the member that produced it (k >= 1; the k = 0 slice is zero because no
    transition precedes the first step). ``diverged_at[b, q]`` is the first
    step whose observation went non-finite, or -1.
    """

    observations: np.ndarray  # (B, Q, T, D)
    rewards: np.ndarray       # (B, Q, T)
    scores: np.ndarray        # (B, Q, T, 2*D)
    diverged_at: np.ndarray   # (B, Q) int


def init_cem_state(config: PlannerConfig, action_low: float, action_high: float) -> CEMState:
    mid = 0.5 * (action_low + action_high)
    return CEMState(mean=np.full(config.horizon, mid),
                    variance=np.full(config.horizon, config.init_action_var))


def shift_cem_state(state: CEMState, config: PlannerConfig) -> CEMState:
    """Receding-horizon warm start: shift the mean by one step, zero the new
    tail entry, reset the variance."""
    mean = np.concatenate([state.mean[1:], [0.0]])
    return CEMState(mean=mean, variance=np.full_like(mean, config.init_action_var))


def propagate(model: EnsembleModel, start: np.ndarray, seq: np.ndarray, particles: int,
              reward_fn, rng: np.random.Generator, min_rew: float = -np.inf,
              angle_pair: int | None = None) -> TrajectoryBatch:
    """Reference rollout of one action sequence: per member, ``particles``
    particles sampled from that member's own predictions.

    Scores are taken at the raw Gaussian draw, before the (cos, sin) pair is
    projected back to the unit circle, so they are the exact score of the
    sampled transition. Deterministic given the generator state; normals are
    drawn once as (B, Q, T-1, D) to match the batched kernel's layout.
    """
    if particles < 1:
        raise ValueError("particles must be >= 1")
    seq = np.asarray(seq, dtype=float)
    horizon = len(seq)
    b_count, d = model.size, model.obs_dim
    normals = rng.standard_normal((b_count, particles, max(horizon - 1, 0), d))

    obs = np.broadcast_to(np.asarray(start, dtype=float), (b_count, particles, d)).copy()
    alive = np.ones((b_count, particles), dtype=bool)
    diverged_at = np.full((b_count, particles), -1, dtype=int)
    observations = np.zeros((b_count, particles, horizon, d))
    rewards = np.zeros((b_count, particles, horizon))
    scores = np.zeros((b_count, particles, horizon, 2 * d))

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for k in range(horizon):
            observations[:, :, k] = obs
            r = reward_fn(obs, seq[k])
            ok_r = np.isfinite(r)
            if k >= 1:
                # reward overflow kills the particle and drops the score that
                # led into the dead state
                scores[:, :, k][alive & ~ok_r] = 0.0
            rewards[:, :, k] = np.where(alive & ok_r, r, min_rew)
            newly_bad = alive & ~ok_r
            diverged_at[newly_bad] = k
            alive &= ok_r
            if k == horizon - 1:
                break
            preds = [forward(member, obs[b], seq[k], model.norm)
                     for b, member in enumerate(model.members)]
            mean = np.stack([p.mean for p in preds])
            logvar = np.stack([p.log_variance for p in preds])
            sig = np.exp(0.5 * logvar)
            z = normals[:, :, k, :]
            nxt = obs + mean + sig * z
            if angle_pair is not None:
                c, s = nxt[..., angle_pair], nxt[..., angle_pair + 1]
                scale = np.hypot(c, s)
                nxt[..., angle_pair] = c / scale
                nxt[..., angle_pair + 1] = s / scale
            ok = np.all(np.isfinite(nxt), axis=-1)
            valid = (alive & ok)[..., None]
            scores[:, :, k + 1, :d] = np.where(valid, z / sig, 0.0)
            scores[:, :, k + 1, d:] = np.where(valid, 0.5 * (z ** 2 - 1.0), 0.0)
            newly = alive & ~ok
            diverged_at[newly] = k + 1
            alive &= ok
            obs = np.where(alive[..., None], nxt, obs)

    return TrajectoryBatch(observations=observations, rewards=rewards, scores=scores,
                           diverged_at=diverged_at)


def member_returns(batch: TrajectoryBatch, discount: float) -> np.ndarray:
    """Per-member Monte-Carlo estimate of the discounted return, (B,)."""
    horizon = batch.rewards.shape[2]
    disc = discount ** np.arange(horizon)
    totals = np.tensordot(batch.rewards, disc, axes=(2, 0))  # (B, Q)
    return totals.mean(axis=1)


def pets_objective(batch: TrajectoryBatch, discount: float) -> float:
    """Monte-Carlo estimate of the expected discounted return under the
    ensemble mixture: the mean over members of per-member particle means."""
    if batch.rewards.size == 0:
        raise ValueError("empty trajectory batch")
    return float(np.mean(member_returns(batch, discount)))


def cem_plan(objective, config: PlannerConfig, init: CEMState, rng: np.random.Generator,
             action_low: float, action_high: float) -> tuple[np.ndarray, CEMState]:
    """Cross-entropy optimization of an action sequence.

    ``objective`` maps a candidate matrix (M, T) to values (M,); use
    :func:`vectorize_objective` to lift a per-sequence callable. Candidates
    evaluating non-finite rank worst; if a whole population is non-finite
    the planner raises. Returns the best candidate ever sampled plus the
    final sampling distribution.
    """
    mean = init.mean.copy()
    var = np.maximum(init.variance.copy(), VARIANCE_FLOOR)
    best_value = -np.inf
    best_seq = np.clip(mean.copy(), action_low, action_high)
    for _ in range(config.cem_iterations):
        draws = rng.standard_normal((config.population, config.horizon))
        cands = np.clip(mean + np.sqrt(var) * draws, action_low, action_high)
        values = np.asarray(objective(cands), dtype=float)
        finite = np.isfinite(values)
        if not finite.any():
            raise PlanningError("all candidate evaluations were non-finite")
        ranked = np.where(finite, values, -np.inf)
        order = np.argsort(-ranked, kind="stable")
        elites = cands[order[:config.elite_count]]
        if ranked[order[0]] > best_value:
            best_value = float(ranked[order[0]])
            best_seq = cands[order[0]].copy()
        mean = config.alpha * mean + (1.0 - config.alpha) * elites.mean(axis=0)
        var = config.alpha * var + (1.0 - config.alpha) * elites.var(axis=0)
        var = np.maximum(var, VARIANCE_FLOOR)
    # the converged distribution center competes as a final candidate
    center = np.clip(mean, action_low, action_high)
    center_value = float(np.asarray(objective(center[None, :]), dtype=float)[0])
    if np.isfinite(center_value) and center_value > best_value:
        best_seq = center
    return best_seq, CEMState(mean=mean, variance=var)


def vectorize_objective(fn):
    """Lift a single-sequence objective to the (M, T) -> (M,) contract."""
    def batched(cands: np.ndarray) -> np.ndarray:
        return np.array([fn(c) for c in cands], dtype=float)
    return batched


def _kernel_inputs(model: EnsembleModel, kind: envsim.EnvKind, params: envsim.EnvParams):
    theta, dims = model.pack()
    return dict(
        theta=theta, dims=dims,
        input_mean=model.norm.input_mean, input_std=model.norm.input_std,
        target_mean=model.norm.target_mean, target_std=model.norm.target_std,
        log_target_var=2.0 * np.log(model.norm.target_std),
        env_id=0 if kind is envsim.EnvKind.PENDULUM else 1,
        angle_pair=envsim.angle_pair_index(kind),
        pole_length=params.pole_length,
        min_rew=envsim.min_reward(kind, params),
        logvar_min=LOG_VAR_MIN, logvar_max=LOG_VAR_MAX,
    )


def evaluate_candidates(model: EnsembleModel, kind: envsim.EnvKind, params: envsim.EnvParams,
                        start_obs: np.ndarray, cands: np.ndarray, config: PlannerConfig,
                        rng: np.random.Generator, with_scores: bool):
    """Kernel-backed evaluation of a candidate population: per-member returns
    ``j (M, B)`` and score-weighted gradient sums ``g (M, B, 2*D)``."""
    m_count, horizon = cands.shape
    normals = rng.standard_normal(
        (m_count, model.size, config.particles, max(horizon - 1, 0), model.obs_dim))
    return rollout_returns(
        start_obs=np.asarray(start_obs, dtype=float), seqs=cands, normals=normals,
        gamma=config.discount, with_scores=with_scores, threads=config.threads,
        **_kernel_inputs(model, kind, params))


def mpc_act(model: EnsembleModel, current_obs: np.ndarray, config: PlannerConfig,
            dr_config, kind: envsim.EnvKind, params: envsim.EnvParams,
            warm_start: CEMState, rng: np.random.Generator) -> tuple[float, CEMState]:
    """One receding-horizon step: optimize the planning objective from the
    current observation, return the first action and the shifted warm start.

    With ``dr_config.epsilon == 0`` the objective is the plain ensemble
    return and the code path is identical for PETS and DR-PETS, draw for
    draw, so the two algorithms emit identical actions under shared seeds.
    """
    from .drcore import penalty  # local import to avoid a cycle

    eps = dr_config.epsilon
    with_scores = eps > 0.0

    def objective(cands: np.ndarray) -> np.ndarray:
        j, g = evaluate_candidates(model, kind, params, current_obs, cands, config,
                                   rng, with_scores)
        values = j.mean(axis=1)
        if with_scores:
            norms = np.linalg.norm(g, axis=2)
            values = values - eps * penalty(norms, dr_config.p)
        return values

    best, final_state = cem_plan(objective, config, warm_start, rng,
                                 params.action_low, params.action_high)
    return float(best[0]), shift_cem_state(final_state, config)


class MPCPolicy:
    """Stateful per-episode policy: plans with :func:`mpc_act`, carrying the
    warm start across steps and deriving one fresh rng stream per step."""

    def __init__(self, model: EnsembleModel, config: PlannerConfig, dr_config,
                 kind: envsim.EnvKind, params: envsim.EnvParams,
                 seed_seq: np.random.SeedSequence):
        self.model = model
        self.config = config
        self.dr_config = dr_config
        self.kind = kind
        self.params = params
        self._seed_seq = seed_seq
        self._warm = init_cem_state(config, params.action_low, params.action_high)
        self._step = 0

    def __call__(self, state: np.ndarray) -> float:
        obs = envsim.observe(self.kind, state)
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=self._seed_seq.entropy,
                                   spawn_key=(*self._seed_seq.spawn_key, self._step)))
        action, self._warm = mpc_act(self.model, obs, self.config, self.dr_config,
                                     self.kind, self.params, self._warm, rng)
        self._step += 1
        return action
