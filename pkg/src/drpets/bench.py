"""Experiment harness: data collection, training rounds, perturbation sweeps.

Every episode gets its own rng stream derived from a master seed and its
(purpose, grid index, seed index) coordinates, so sweeps are reproducible
byte for byte, grid points can run in any order or in parallel, and PETS
versus DR-PETS comparisons share environment seeds exactly.
"""

from __future__ import annotations

import json
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import envsim, seeds
from .drcore import DRConfig, PNorm
from .ensemble import EnsembleModel, TrainConfig, TransitionDataset, init_ensemble, train
from .planner import MPCPolicy, PlannerConfig

ALGORITHMS = ("pets", "drpets")


@dataclass(frozen=True)
class SweepSpec:
    kind: envsim.EnvKind
    parameter: str                      # pendulum_mass | pole_length
    grid: tuple[float, ...]
    seeds_per_point: int
    algorithm: str                      # pets | drpets
    dr_config: DRConfig
    planner_config: PlannerConfig
    horizon: int = 200
    base_params: envsim.EnvParams | None = None
    master_seed: int = 0

    def __post_init__(self) -> None:
        if len(self.grid) == 0 or any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ValueError("grid must be nonempty and strictly increasing")
        if self.seeds_per_point < 1:
            raise ValueError("seeds_per_point must be >= 1")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.parameter not in ("pendulum_mass", "pole_length"):
            raise ValueError("perturbed parameter must be pendulum_mass or pole_length")


@dataclass(frozen=True)
class SweepRow:
    param: float
    mean_reward: float
    stderr: float
    n_seeds: int
    algorithm: str
    epsilon: float
    p: str


@dataclass(frozen=True)
class SweepResult:
    rows: tuple[SweepRow, ...]

    def merged_with(self, other: "SweepResult") -> "SweepResult":
        return SweepResult(rows=self.rows + other.rows)


@dataclass(frozen=True)
class EpisodeOutcome:
    param: float
    seed: int
    total_reward: float
    status: str  # "ok" | "failed"


@dataclass(frozen=True)
class TrainRunConfig:
    episodes: int = 30
    steps_per_episode: int = 200
    random_episodes: int = 5
    train_config: TrainConfig = field(default_factory=TrainConfig)
    planner_config: PlannerConfig = field(default_factory=PlannerConfig)
    members: int = 5
    hidden: tuple[int, ...] = (64, 64, 64)
    master_seed: int = 0

    def __post_init__(self) -> None:
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if not 1 <= self.random_episodes <= self.episodes:
            raise ValueError("need 1 <= random_episodes <= episodes")


def collect_random(kind: envsim.EnvKind, params: envsim.EnvParams, episodes: int,
                   horizon: int, seed: int) -> TransitionDataset:
    """Episodes under uniform-random actions; returns all transition triples."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    all_obs, all_act, all_next = [], [], []
    for e in range(episodes):
        rng = seeds.substream(seed, "collect-policy", e)
        policy = lambda state: rng.uniform(params.action_low, params.action_high)
        record = envsim.run_episode(kind, params, policy, horizon,
                                    seeds.substream_seed(seed, "collect-env", e))
        all_obs.append(record.observations[:-1])
        all_act.append(record.actions)
        all_next.append(record.observations[1:])
    return TransitionDataset.from_transitions(
        np.concatenate(all_obs), np.concatenate(all_act), np.concatenate(all_next))


def _dataset_from_record(record: envsim.EpisodeRecord) -> TransitionDataset:
    return TransitionDataset.from_transitions(
        record.observations[:-1], record.actions, record.observations[1:])


def train_agent(config: TrainRunConfig, kind: envsim.EnvKind,
                params: envsim.EnvParams | None = None,
                ) -> tuple[EnsembleModel, list[float]]:
    """PETS training loop: seeded random episodes first, then alternating
    ensemble refits (on all data so far) and MPC episodes on the nominal
    environment with epsilon = 0. Returns the final model, refit on
    everything, and the per-episode total-reward log."""
    params = envsim.default_params(kind) if params is None else params
    master = config.master_seed
    dr0 = DRConfig(epsilon=0.0, p=PNorm.TWO)
    dataset: TransitionDataset | None = None
    model = None
    rewards: list[float] = []
    for episode in range(config.episodes):
        if episode < config.random_episodes:
            rng = seeds.substream(master, "train-policy", episode)
            policy = lambda state: rng.uniform(params.action_low, params.action_high)
        else:
            policy = MPCPolicy(model, config.planner_config, dr0, kind, params,
                               seeds.child_sequence(master, "train-plan", episode))
        record = envsim.run_episode(kind, params, policy, config.steps_per_episode,
                                    seeds.substream_seed(master, "train-env", episode))
        rewards.append(record.total_reward)
        new_data = _dataset_from_record(record)
        dataset = new_data if dataset is None else dataset.extend(new_data)
        fresh = init_ensemble(envsim.obs_dim(kind), config.members, config.hidden,
                              seed=seeds.substream_seed(master, "model-init", episode))
        model, _ = train(fresh, dataset, replace(
            config.train_config, seed=seeds.substream_seed(master, "model-train", episode)))
    return model, rewards


def aggregate(values) -> tuple[float, float]:
    """Sample mean and standard error (n-1 denominator); n = 1 gives (v, 0)."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("aggregate requires at least one value")
    if values.size == 1:
        return float(values[0]), 0.0
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(values.size))


def _episode_task(args) -> EpisodeOutcome:
    model, spec, grid_index, seed_index = args
    value = spec.grid[grid_index]
    base = spec.base_params if spec.base_params is not None else envsim.default_params(spec.kind)
    params = envsim.perturbed(base, spec.parameter, value)
    dr = spec.dr_config if spec.algorithm == "drpets" else DRConfig(epsilon=0.0, p=spec.dr_config.p)
    policy = MPCPolicy(model, spec.planner_config, dr, spec.kind, params,
                       seeds.child_sequence(spec.master_seed, "sweep-plan", grid_index, seed_index))
    try:
        record = envsim.run_episode(
            spec.kind, params, policy, spec.horizon,
            seeds.substream_seed(spec.master_seed, "sweep-env", grid_index, seed_index))
    except envsim.EpisodeAborted:
        return EpisodeOutcome(value, seed_index, float("nan"), "failed")
    return EpisodeOutcome(value, seed_index, record.total_reward, "ok")


def sweep(model: EnsembleModel, spec: SweepSpec, workers: int = 1,
          ) -> tuple[SweepResult, list[EpisodeOutcome]]:
    """Run the perturbation sweep; returns aggregated rows (ordered by grid)
    plus the per-episode outcome records for the diagnostics sidecar.

    Episode seeds depend only on (master_seed, grid index, seed index), never
    on the algorithm or epsilon, so PETS and DR-PETS sweeps share seeds; the
    aggregation order is fixed by seed index, so worker count cannot change
    any output byte.
    """
    if workers > 1 and spec.planner_config.threads > 1:
        # one kernel thread per worker, or the pool oversubscribes the cores
        spec = replace(spec, planner_config=replace(spec.planner_config, threads=1))
    tasks = [(model, spec, gi, si)
             for gi in range(len(spec.grid)) for si in range(spec.seeds_per_point)]
    if workers > 1:
        # spawn, not fork: the GNU OpenMP runtime is not fork-safe once the
        # parent has entered a parallel region (e.g. during training)
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            outcomes = list(pool.map(_episode_task, tasks, chunksize=1))
    else:
        outcomes = [_episode_task(t) for t in tasks]

    eps = spec.dr_config.epsilon if spec.algorithm == "drpets" else 0.0
    # with a zero radius the robust planner degenerates to plain planning,
    # so the rows are tagged pets and epsilon-zero runs are byte-identical
    tag = "pets" if eps == 0.0 else spec.algorithm
    rows = []
    per_point = spec.seeds_per_point
    for gi, value in enumerate(spec.grid):
        point = outcomes[gi * per_point:(gi + 1) * per_point]
        good = [o.total_reward for o in point if o.status == "ok"]
        if not good:
            raise RuntimeError(f"all episodes failed at grid point {value}")
        mean, stderr = aggregate(good)
        rows.append(SweepRow(param=float(value), mean_reward=mean, stderr=stderr,
                             n_seeds=len(good), algorithm=tag,
                             epsilon=float(eps), p=spec.dr_config.p.value))
    return SweepResult(rows=tuple(rows)), outcomes


CSV_HEADER = "param,mean_reward,stderr,n_seeds,algorithm,epsilon,p"


def _g17(x: float) -> str:
    return format(float(x), ".17g")


def export_csv(result: SweepResult, path) -> None:
    lines = [CSV_HEADER]
    for r in result.rows:
        lines.append(",".join([
            _g17(r.param), _g17(r.mean_reward), _g17(r.stderr), str(r.n_seeds),
            r.algorithm, _g17(r.epsilon), r.p]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_sweep_csv(path) -> SweepResult:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: missing sweep CSV header")
    rows = []
    for ln in lines[1:]:
        param, mean, stderr, n, algo, eps, p = ln.split(",")
        rows.append(SweepRow(param=float(param), mean_reward=float(mean),
                             stderr=float(stderr), n_seeds=int(n), algorithm=algo,
                             epsilon=float(eps), p=p))
    return SweepResult(rows=tuple(rows))


def export_episode_log(outcomes: list[EpisodeOutcome], path) -> None:
    """Diagnostics sidecar: one JSON record per episode."""
    with open(path, "w") as fh:
        for o in outcomes:
            fh.write(json.dumps({"param": o.param, "seed": o.seed,
                                 "total_reward": o.total_reward, "status": o.status},
                                allow_nan=True) + "\n")


def export_svg(result: SweepResult, path, width: int = 640, height: int = 420) -> None:
    """Line plot with a shaded band of half a standard error per algorithm;
    hand-rolled SVG so the output is byte-deterministic."""
    groups: dict[str, list[SweepRow]] = {}
    for r in result.rows:
        groups.setdefault(r.algorithm, []).append(r)
    if not groups:
        raise ValueError("cannot plot an empty sweep result")
    xs = [r.param for r in result.rows]
    los = [r.mean_reward - 0.5 * r.stderr for r in result.rows]
    his = [r.mean_reward + 0.5 * r.stderr for r in result.rows]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(los), max(his)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pad = 50.0

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    colors = {"pets": "#1f77b4", "drpets": "#d62728"}
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>']
    for algo, rows in groups.items():
        rows = sorted(rows, key=lambda r: r.param)
        color = colors.get(algo, "#2ca02c")
        band = [(sx(r.param), sy(r.mean_reward + 0.5 * r.stderr)) for r in rows] + \
               [(sx(r.param), sy(r.mean_reward - 0.5 * r.stderr)) for r in reversed(rows)]
        band_pts = " ".join(f"{px:.2f},{py:.2f}" for px, py in band)
        parts.append(f'<polygon points="{band_pts}" fill="{color}" opacity="0.2"/>')
        line_pts = " ".join(f"{sx(r.param):.2f},{sy(r.mean_reward):.2f}" for r in rows)
        parts.append(f'<polyline points="{line_pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{width - pad - 120}" y="{pad + 18 * (list(groups).index(algo) + 1)}" '
                     f'fill="{color}">{algo} (eps={rows[0].epsilon:g})</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
