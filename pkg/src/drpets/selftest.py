"""Built-in verification suites behind ``drpets selftest``.

Each suite re-derives an expected result through an independent route
(brute-force minimization, finite differences, closed-form optima, or a
replayed twin run) and checks the production code against it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import envsim, seeds
from .drcore import (DRConfig, GradientEstimate, PNorm, dr_value, dual_function,
                     dual_optimizers, worstcase_oracle)
from .ensemble import (GaussianPrediction, TrainConfig, TransitionDataset,
                       init_ensemble, score, train)
from .planner import MPCPolicy, PlannerConfig


@dataclass(frozen=True)
class SuiteResult:
    name: str
    passed: bool
    detail: str


def duality_agreement(instances: int = 40, seed: int = 0) -> SuiteResult:
    """dr_value against the brute-force worst-case oracle on random instances."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        b_count = int(rng.integers(1, 3))
        dim = int(rng.integers(1, 4))
        g = rng.normal(0.0, 2.0, size=(b_count, dim))
        j0 = rng.normal(0.0, 3.0, size=b_count)
        eps = float(rng.uniform(0.05, 1.0))
        grads = GradientEstimate(per_member=g, norms=np.linalg.norm(g, axis=1))
        for p in (PNorm.ONE, PNorm.TWO, PNorm.INFINITY):
            cfg = DRConfig(epsilon=eps, p=p)
            gap = abs(dr_value(j0, grads, cfg) - worstcase_oracle(j0, grads, cfg, 200))
            worst = max(worst, gap)
    return SuiteResult("duality-agreement", worst < 1e-3, f"max gap {worst:.2e}")


def score_finite_difference(triples: int = 200, seed: int = 0) -> SuiteResult:
    """Analytic score against central finite differences of the log-density."""
    rng = np.random.default_rng(seed)
    h = 1e-6
    worst = 0.0

    def logpdf(mean, logvar, x):
        var = np.exp(logvar)
        return -0.5 * np.sum((x - mean) ** 2 / var + logvar + np.log(2 * np.pi))

    for _ in range(triples):
        d = int(rng.integers(1, 5))
        mean = rng.normal(0, 1, d)
        logvar = rng.uniform(-3, 2, d)
        x = mean + rng.normal(0, 1, d) * np.exp(0.5 * logvar)
        s = score(GaussianPrediction(mean, logvar), x)
        for i in range(d):
            dm = np.zeros(d)
            dm[i] = h
            fd_mean = (logpdf(mean + dm, logvar, x) - logpdf(mean - dm, logvar, x)) / (2 * h)
            fd_lv = (logpdf(mean, logvar + dm, x) - logpdf(mean, logvar - dm, x)) / (2 * h)
            scale_m = max(1.0, abs(fd_mean))
            scale_v = max(1.0, abs(fd_lv))
            worst = max(worst, abs(s.d_mean[i] - fd_mean) / scale_m,
                        abs(s.d_logvar[i] - fd_lv) / scale_v)
    return SuiteResult("score-finite-difference", worst < 1e-4, f"max rel err {worst:.2e}")


def dual_optimality(seed: int = 0) -> SuiteResult:
    """Ball saturation, closed-form penalty reproduction, strict concavity."""
    rng = np.random.default_rng(seed)
    ok = True
    detail = []
    for _ in range(20):
        b_count = int(rng.integers(1, 6))
        norms = rng.uniform(0.1, 5.0, b_count)
        eps = float(rng.uniform(0.05, 2.0))
        cfg = DRConfig(epsilon=eps, p=PNorm.TWO)
        diag = dual_optimizers(norms, cfg)
        saturation = abs(np.mean(diag.delta_star ** 2) - eps ** 2)
        penalty = -eps * np.sqrt(np.mean(norms ** 2))
        at_star = dual_function(diag.lambda_star, norms, cfg)
        reproduce = abs(at_star - penalty)
        concave = (dual_function(1.1 * diag.lambda_star, norms, cfg) < at_star
                   and dual_function(0.9 * diag.lambda_star, norms, cfg) < at_star)
        if saturation > 1e-9 or reproduce > 1e-9 or not concave:
            ok = False
            detail.append(f"saturation={saturation:.1e} reproduce={reproduce:.1e} concave={concave}")
    return SuiteResult("dual-optimality", ok, detail[0] if detail else "20 instances ok")


def epsilon_zero_equivalence(steps: int = 20, seed: int = 3) -> SuiteResult:
    """PETS and DR-PETS with epsilon = 0 emit identical actions, bit for bit."""
    kind = envsim.EnvKind.PENDULUM
    params = envsim.default_params(kind)
    data_rng = np.random.default_rng(seed)
    obs = data_rng.normal(0, 1, (256, 3))
    act = data_rng.uniform(-2, 2, 256)
    nxt = obs + 0.1 * data_rng.normal(0, 1, (256, 3))
    model, _ = train(init_ensemble(3, members=2, hidden=(16, 16), seed=seed),
                     TransitionDataset.from_transitions(obs, act, nxt),
                     TrainConfig(epochs=3, batch_size=64, seed=seed))
    cfg = PlannerConfig(horizon=8, population=24, elite_count=4, cem_iterations=2,
                        particles=2, discount=0.99, init_action_var=1.0)

    def actions(p_enum):
        policy = MPCPolicy(model, cfg, DRConfig(epsilon=0.0, p=p_enum), kind, params,
                           seeds.child_sequence(seed, "selftest-plan"))
        record = envsim.run_episode(kind, params, policy, steps, seed=seed)
        return record.actions

    a_pets = actions(PNorm.TWO)
    a_dr = actions(PNorm.ONE)  # p is irrelevant at epsilon 0
    identical = bool(np.array_equal(a_pets, a_dr))
    return SuiteResult("epsilon-zero-equivalence", identical,
                       "identical action sequences" if identical else "sequences differ")


def run_all() -> list[SuiteResult]:
    return [duality_agreement(), score_finite_difference(), dual_optimality(),
            epsilon_zero_equivalence()]
