"""Distributionally robust planning mathematics.

The robust objective is the ensemble-mean return minus epsilon times an
ensemble norm of per-member objective gradients, where the gradient of the
return with respect to a member's Gaussian head outputs is estimated by the
likelihood-ratio form: discounted transition scores weighted by the reward
to go from that transition. The p in {1, 2, inf} variants differ only in
how the per-member gradient norms are pooled into the penalty. A brute-force
worst-case oracle over explicit per-member perturbations independently
validates the closed forms on small instances.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass

import numpy as np

from .planner import TrajectoryBatch, member_returns


class PNorm(enum.Enum):
    ONE = "1"
    TWO = "2"
    INFINITY = "inf"


@dataclass(frozen=True)
class DRConfig:
    epsilon: float = 0.0
    p: PNorm = PNorm.TWO

    def __post_init__(self) -> None:
        if self.epsilon < 0.0:
            raise ValueError("epsilon must be non-negative")
        if not isinstance(self.p, PNorm):
            raise ValueError("p must be a PNorm value")


@dataclass(frozen=True)
class GradientEstimate:
    per_member: np.ndarray  # (B, 2*obs_dim)
    norms: np.ndarray       # (B,) Euclidean norms of the rows


@dataclass(frozen=True)
class DualDiagnostics:
    lambda_star: float
    delta_star: np.ndarray  # (B,)
    degenerate: bool = False


class OracleLimitError(ValueError):
    pass


def grad_estimate(batch: TrajectoryBatch, discount: float) -> GradientEstimate:
    """Likelihood-ratio gradient of each member's Monte-Carlo return w.r.t.
    that member's per-step Gaussian head outputs:

        g_b = (1/Q) sum_q sum_{k>=1} discount^k * score_{b,q,k} * togo_{b,q,k}

    with togo the discounted reward to go from step k. A one-step horizon
    has no sampled transition, so the gradient is zero by definition.
    """
    b_count, q_count, horizon, _ = batch.scores.shape
    if horizon < 2:
        g = np.zeros((b_count, batch.scores.shape[3]))
        return GradientEstimate(per_member=g, norms=np.zeros(b_count))
    acc = np.zeros((b_count, q_count, batch.scores.shape[3]))
    togo = np.zeros((b_count, q_count))
    disc = discount ** np.arange(horizon)
    for k in range(horizon - 1, 0, -1):
        togo = batch.rewards[:, :, k] + discount * togo
        acc += disc[k] * batch.scores[:, :, k] * togo[..., None]
    g = acc.mean(axis=1)
    return GradientEstimate(per_member=g, norms=np.linalg.norm(g, axis=1))


def penalty(norms: np.ndarray, p: PNorm) -> np.ndarray:
    """Pooled gradient-norm penalty (without the epsilon factor); operates on
    the last axis so the planner can evaluate whole populations at once."""
    norms = np.asarray(norms, dtype=float)
    if p is PNorm.TWO:
        return np.sqrt(np.mean(norms ** 2, axis=-1))
    if p is PNorm.ONE:
        return np.max(norms, axis=-1)
    return np.mean(norms, axis=-1)


def dr_value(j_values: np.ndarray, grads: GradientEstimate, config: DRConfig) -> float:
    """Closed-form worst case over the epsilon-ball: the ensemble-mean
    objective minus the epsilon-scaled pooled gradient norm."""
    j_values = np.asarray(j_values, dtype=float)
    if j_values.shape[0] != grads.norms.shape[0]:
        raise ValueError("j_values and gradient estimate disagree on member count")
    if config.epsilon == 0.0:
        return float(np.mean(j_values))
    return float(np.mean(j_values) - config.epsilon * penalty(grads.norms, config.p))


def dual_optimizers(grad_norms: np.ndarray, config: DRConfig) -> DualDiagnostics:
    """Optimal dual variables for the p = 2 case:

        lambda* = sqrt(mean_b ||g_b||^2) / (2 epsilon)
        delta*_b = ||g_b|| / (2 lambda*)

    which saturate the ball: mean_b delta*_b^2 = epsilon^2. An all-zero
    gradient makes both formulas 0/0; that case returns zeros flagged
    degenerate rather than raising.
    """
    if config.p is not PNorm.TWO:
        raise ValueError("dual diagnostics are defined for p = 2 only")
    if config.epsilon <= 0.0:
        raise ValueError("dual diagnostics need epsilon > 0")
    norms = np.asarray(grad_norms, dtype=float)
    if np.all(norms == 0.0):
        return DualDiagnostics(lambda_star=0.0, delta_star=np.zeros_like(norms),
                               degenerate=True)
    lam = float(np.sqrt(np.mean(norms ** 2)) / (2.0 * config.epsilon))
    return DualDiagnostics(lambda_star=lam, delta_star=norms / (2.0 * lam))


def dual_function(lam: float, grad_norms: np.ndarray, config: DRConfig) -> float:
    """The p = 2 dual objective after the inner minimization,
    D(lambda) = -mean ||g||^2 / (4 lambda) - lambda eps^2; concave on
    lambda > 0 and maximized at lambda*."""
    if config.p is not PNorm.TWO:
        raise ValueError("dual function implemented for p = 2 only")
    norms = np.asarray(grad_norms, dtype=float)
    return float(-np.mean(norms ** 2) / (4.0 * lam) - lam * config.epsilon ** 2)


def dr_objective(model, start, seq, planner_config, dr_config: DRConfig,
                 reward_fn, rng: np.random.Generator, min_rew: float = -np.inf,
                 angle_pair: int | None = None) -> float:
    """Reference evaluation of the robust objective for one action sequence:
    propagate, estimate per-member returns and gradients, apply the closed
    form. At epsilon = 0 this equals :func:`planner.pets_objective` on the
    same batch exactly (same accumulation path, penalty skipped)."""
    from .planner import propagate

    batch = propagate(model, start, seq, planner_config.particles, reward_fn, rng,
                      min_rew=min_rew, angle_pair=angle_pair)
    j = member_returns(batch, planner_config.discount)
    if dr_config.epsilon == 0.0:
        return float(np.mean(j))
    grads = grad_estimate(batch, planner_config.discount)
    return dr_value(j, grads, dr_config)


def _p_exponent(p: PNorm) -> float:
    return {PNorm.ONE: 1.0, PNorm.TWO: 2.0}[p]


def worstcase_oracle(j0: np.ndarray, grads: GradientEstimate, config: DRConfig,
                     grid_resolution: int = 200) -> float:
    """Direct minimization of the linearized objective over explicit
    per-member perturbations:

        min_v (1/B) sum_b [ j0_b + <g_b, v_b> ]
        s.t.  (1/B) sum_b ||v_b||^p <= eps^p   (p = inf: ||v_b|| <= eps each)

    by coarse grid search over perturbation components plus a fine sweep of
    the budget split along the analytic descent directions -g_b/||g_b||.
    Brute force only: refuses more than two members or four dimensions.
    """
    j0 = np.asarray(j0, dtype=float)
    g = np.asarray(grads.per_member, dtype=float)
    b_count, dim = g.shape
    if b_count > 2 or dim > 4:
        raise OracleLimitError("oracle supports B <= 2 and dimension <= 4 only")
    if j0.shape[0] != b_count:
        raise ValueError("j0 and gradients disagree on member count")
    eps = config.epsilon
    if eps == 0.0:
        return float(np.mean(j0))

    # Coarse grid over each member's perturbation cube.
    n_coarse = 7 if b_count == 2 else min(grid_resolution, 41)
    radius = eps if config.p is PNorm.INFINITY else eps * b_count ** (1.0 / _p_exponent(config.p))
    axis = np.linspace(-radius, radius, n_coarse)
    cube = np.array(list(itertools.product(axis, repeat=dim)))  # (G, dim)
    lin = cube @ g.T                                            # (G, B)
    vnorm = np.linalg.norm(cube, axis=1)                        # (G,)

    if config.p is PNorm.INFINITY:
        feasible = vnorm <= eps * (1.0 + 1e-12)
        best = sum(lin[feasible, b].min() for b in range(b_count))
    elif b_count == 1:
        feasible = vnorm <= eps * (1.0 + 1e-12)
        best = lin[feasible, 0].min()
    else:
        p_exp = _p_exponent(config.p)
        budget = b_count * eps ** p_exp
        n1 = vnorm ** p_exp
        # For each first-member choice, the cheapest feasible second choice.
        order = np.argsort(n1)
        sorted_budget = n1[order]
        running_min = np.minimum.accumulate(lin[order, 1])
        remaining = budget - n1
        pos = np.searchsorted(sorted_budget, remaining * (1.0 + 1e-12), side="right") - 1
        valid = pos >= 0
        best = np.min(lin[valid, 0] + running_min[pos[valid]])

    # Refinement: perturbations along -g_b/||g_b|| with a fine budget split,
    # then a ternary-search polish of the split around the best grid point.
    gnorm = grads.norms
    if config.p is PNorm.INFINITY:
        refined = -eps * gnorm.sum()
    elif b_count == 1:
        refined = -eps * gnorm[0]
    else:
        p_exp = _p_exponent(config.p)
        budget = b_count * eps ** p_exp

        def split_value(t):
            d1 = (budget * t) ** (1.0 / p_exp)
            d2 = (budget * (1.0 - t)) ** (1.0 / p_exp)
            return -(d1 * gnorm[0] + d2 * gnorm[1])

        t_grid = np.linspace(0.0, 1.0, grid_resolution + 1)
        values = split_value(t_grid)
        i_best = int(np.argmin(values))
        lo = t_grid[max(i_best - 1, 0)]
        hi = t_grid[min(i_best + 1, grid_resolution)]
        for _ in range(80):
            m1 = lo + (hi - lo) / 3.0
            m2 = hi - (hi - lo) / 3.0
            if split_value(m1) <= split_value(m2):
                hi = m2
            else:
                lo = m1
        refined = float(min(values[i_best], split_value(0.5 * (lo + hi))))
    best = min(best, refined)
    return float(np.mean(j0) + best / b_count)
