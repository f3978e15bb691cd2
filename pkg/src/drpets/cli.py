"""Command-line front end: collect / train / sweep / plot / selftest.

Configuration lives in a YAML file with one section per subsystem; every
field has a default, unknown keys are errors, and each run echoes the fully
resolved configuration to ``<out>/config.resolved`` so any run can be
reproduced byte for byte from its own output directory.

Exit codes: 0 success, 1 configuration/validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import envsim, selftest
from .bench import (SweepSpec, TrainRunConfig, collect_random, export_csv,
                    export_episode_log, export_svg, load_sweep_csv, sweep, train_agent)
from .checkpoint import load_checkpoint, save_checkpoint
from .drcore import DRConfig, PNorm
from .ensemble import TrainConfig
from .planner import PlannerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnvSection:
    kind: str = "pendulum"
    pendulum_mass: float = 1.0
    pendulum_length: float = 0.5
    pole_mass: float = 1.0
    pole_length: float = 0.5
    cart_mass: float = 1.0
    gravity: float = 9.81
    dt: float | None = None        # per-kind default when omitted
    action_low: float | None = None
    action_high: float | None = None
    max_angular_velocity: float = 8.0


@dataclass(frozen=True)
class EnsembleSection:
    members: int = 5
    hidden: tuple[int, ...] = (64, 64, 64)
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3


@dataclass(frozen=True)
class PlannerSection:
    horizon: int = 25
    population: int = 400
    elite_count: int = 40
    cem_iterations: int = 5
    alpha: float = 0.1
    particles: int = 10
    discount: float = 0.99
    init_action_var: float | None = None  # default: ((high - low) / 4)^2
    threads: int = 1


@dataclass(frozen=True)
class DRSection:
    epsilon: float = 0.0
    p: str = "2"  # "1" | "2" | "inf"


@dataclass(frozen=True)
class TrainSection:
    episodes: int = 30
    steps_per_episode: int = 200
    random_episodes: int = 5
    master_seed: int = 0


@dataclass(frozen=True)
class SweepSection:
    parameter: str = "pendulum_mass"
    grid: tuple[float, ...] = (0.5, 0.75, 1.0, 1.25, 1.5)
    seeds_per_point: int = 10
    algorithm: str = "pets"
    horizon: int = 200
    master_seed: int = 0
    workers: int = 1


@dataclass(frozen=True)
class CollectSection:
    episodes: int = 5
    horizon: int = 200
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    env: EnvSection = field(default_factory=EnvSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    planner: PlannerSection = field(default_factory=PlannerSection)
    dr: DRSection = field(default_factory=DRSection)
    train: TrainSection = field(default_factory=TrainSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    collect: CollectSection = field(default_factory=CollectSection)
    model_path: str = "model.ckpt"


_SECTIONS = {f.name: f.type for f in RunConfig.__dataclass_fields__.values()}


def _build_section(cls, mapping, where: str):
    fields = cls.__dataclass_fields__
    for key in mapping:
        if key not in fields:
            raise ConfigError(f"unknown key {where}.{key}")
    kwargs = {}
    for key, value in mapping.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value in section {where}: {exc}") from exc


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return resolve_config(RunConfig())
    raw = yaml.safe_load(Path(path).read_text())
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("configuration root must be a mapping")
    sections = {}
    for key, value in raw.items():
        if key == "model_path":
            sections[key] = str(value)
            continue
        if key not in _SECTIONS:
            raise ConfigError(f"unknown key {key}")
        if not isinstance(value, dict):
            raise ConfigError(f"section {key} must be a mapping")
        cls = type(getattr(RunConfig(), key))
        sections[key] = _build_section(cls, value, key)
    return resolve_config(RunConfig(**sections))


def resolve_config(cfg: RunConfig) -> RunConfig:
    """Fill in per-kind defaults so the echoed config is fully explicit."""
    kind = parse_kind(cfg.env.kind)
    base = envsim.default_params(kind)
    env = cfg.env
    env = replace(env,
                  dt=base.dt if env.dt is None else env.dt,
                  action_low=base.action_low if env.action_low is None else env.action_low,
                  action_high=base.action_high if env.action_high is None else env.action_high)
    planner = cfg.planner
    if planner.init_action_var is None:
        planner = replace(planner,
                          init_action_var=((env.action_high - env.action_low) / 4.0) ** 2)
    if cfg.dr.p not in ("1", "2", "inf"):
        raise ConfigError(f"dr.p must be one of 1|2|inf, got {cfg.dr.p!r}")
    if cfg.sweep.algorithm not in ("pets", "drpets"):
        raise ConfigError(f"sweep.algorithm must be pets|drpets, got {cfg.sweep.algorithm!r}")
    return replace(cfg, env=env, planner=planner)


def parse_kind(name: str) -> envsim.EnvKind:
    table = {"pendulum": envsim.EnvKind.PENDULUM,
             "cartpole": envsim.EnvKind.CARTPOLE_SWINGUP}
    if name not in table:
        raise ConfigError(f"env.kind must be pendulum|cartpole, got {name!r}")
    return table[name]


def env_params(cfg: RunConfig) -> envsim.EnvParams:
    e = cfg.env
    return envsim.EnvParams(
        pendulum_mass=e.pendulum_mass, pendulum_length=e.pendulum_length,
        pole_mass=e.pole_mass, pole_length=e.pole_length, cart_mass=e.cart_mass,
        gravity=e.gravity, dt=e.dt, action_low=e.action_low, action_high=e.action_high,
        max_angular_velocity=e.max_angular_velocity)


def planner_config(cfg: RunConfig) -> PlannerConfig:
    p = cfg.planner
    return PlannerConfig(horizon=p.horizon, population=p.population,
                         elite_count=p.elite_count, cem_iterations=p.cem_iterations,
                         alpha=p.alpha, particles=p.particles, discount=p.discount,
                         init_action_var=p.init_action_var, threads=p.threads)


def dr_config(cfg: RunConfig) -> DRConfig:
    return DRConfig(epsilon=cfg.dr.epsilon,
                    p={"1": PNorm.ONE, "2": PNorm.TWO, "inf": PNorm.INFINITY}[cfg.dr.p])


def echo_config(cfg: RunConfig, out_dir: Path) -> None:
    data = asdict(cfg)
    for section in data.values():
        if isinstance(section, dict):
            for key, value in section.items():
                if isinstance(value, tuple):
                    section[key] = list(value)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved").write_text(
        yaml.safe_dump(data, sort_keys=True, default_flow_style=False))


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg,
                      train=replace(cfg.train, master_seed=args.seed),
                      sweep=replace(cfg.sweep, master_seed=args.seed),
                      collect=replace(cfg.collect, seed=args.seed))
    if getattr(args, "epsilon", None) is not None:
        cfg = replace(cfg, dr=replace(cfg.dr, epsilon=args.epsilon))
    if getattr(args, "p", None) is not None:
        cfg = replace(cfg, dr=replace(cfg.dr, p=args.p))
    if getattr(args, "algorithm", None) is not None:
        cfg = replace(cfg, sweep=replace(cfg.sweep, algorithm=args.algorithm))
    if getattr(args, "workers", None) is not None:
        cfg = replace(cfg, sweep=replace(cfg.sweep, workers=args.workers))
    if getattr(args, "model", None) is not None:
        cfg = replace(cfg, model_path=args.model)
    return resolve_config(cfg)


def _cmd_collect(cfg: RunConfig, out: Path) -> int:
    kind = parse_kind(cfg.env.kind)
    data = collect_random(kind, env_params(cfg), cfg.collect.episodes,
                          cfg.collect.horizon, cfg.collect.seed)
    np.save(out / "dataset_obs.npy", data.observations)
    np.save(out / "dataset_act.npy", data.actions)
    np.save(out / "dataset_next.npy", data.next_observations)
    print(f"collected {len(data)} transitions -> {out}")
    return 0


def _cmd_train(cfg: RunConfig, out: Path) -> int:
    kind = parse_kind(cfg.env.kind)
    run_cfg = TrainRunConfig(
        episodes=cfg.train.episodes, steps_per_episode=cfg.train.steps_per_episode,
        random_episodes=cfg.train.random_episodes,
        train_config=TrainConfig(epochs=cfg.ensemble.epochs,
                                 batch_size=cfg.ensemble.batch_size,
                                 learning_rate=cfg.ensemble.learning_rate),
        planner_config=planner_config(cfg), members=cfg.ensemble.members,
        hidden=cfg.ensemble.hidden, master_seed=cfg.train.master_seed)
    model, rewards = train_agent(run_cfg, kind, env_params(cfg))
    save_checkpoint(model, out / "model.ckpt")
    with open(out / "episodes.log", "w") as fh:
        for episode, total in enumerate(rewards):
            fh.write(f'{{"episode": {episode}, "total_reward": {total!r}}}\n')
    print(f"trained {cfg.train.episodes} episodes -> {out / 'model.ckpt'}")
    print("episode totals:", " ".join(f"{r:.1f}" for r in rewards))
    return 0


def _cmd_sweep(cfg: RunConfig, out: Path) -> int:
    kind = parse_kind(cfg.env.kind)
    model_path = Path(cfg.model_path)
    if not model_path.is_absolute() and not model_path.exists() and (out / model_path).exists():
        model_path = out / model_path
    if not model_path.exists():
        print(f"error: checkpoint {model_path} not found (run `drpets train` first "
              f"or pass --model)", file=sys.stderr)
        return 1
    model = load_checkpoint(model_path)
    spec = SweepSpec(kind=kind, parameter=cfg.sweep.parameter,
                     grid=tuple(float(g) for g in cfg.sweep.grid),
                     seeds_per_point=cfg.sweep.seeds_per_point,
                     algorithm=cfg.sweep.algorithm, dr_config=dr_config(cfg),
                     planner_config=planner_config(cfg), horizon=cfg.sweep.horizon,
                     base_params=env_params(cfg), master_seed=cfg.sweep.master_seed)
    result, outcomes = sweep(model, spec, workers=cfg.sweep.workers)
    export_csv(result, out / "sweep.csv")
    export_svg(result, out / "sweep.svg")
    export_episode_log(outcomes, out / "episodes.log")
    for row in result.rows:
        print(f"{spec.parameter}={row.param:g}: mean={row.mean_reward:.2f} "
              f"stderr={row.stderr:.2f} n={row.n_seeds}")
    return 0


def _cmd_plot(cfg: RunConfig, out: Path, csv_paths: list[str]) -> int:
    paths = csv_paths or [str(out / "sweep.csv")]
    result = load_sweep_csv(paths[0])
    for extra in paths[1:]:
        result = result.merged_with(load_sweep_csv(extra))
    export_svg(result, out / "sweep.svg")
    print(f"wrote {out / 'sweep.svg'} from {len(paths)} csv file(s)")
    return 0


def _cmd_selftest() -> int:
    rows = selftest.run_all()
    width = max(len(r.name) for r in rows)
    failed = 0
    for r in rows:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {status}  {r.detail}")
        failed += 0 if r.passed else 1
    print(f"{len(rows) - failed}/{len(rows)} suites passed")
    return 0 if failed == 0 else 2


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="drpets",
                                     description="PETS / DR-PETS planning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("collect", "train", "sweep", "plot"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None)
        sp.add_argument("--out", default="runs/latest")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--epsilon", type=float, default=None)
        sp.add_argument("--p", choices=("1", "2", "inf"), default=None)
        sp.add_argument("--algorithm", choices=("pets", "drpets"), default=None)
        sp.add_argument("--workers", type=int, default=None)
        sp.add_argument("--model", default=None)
        if name == "plot":
            sp.add_argument("--csv", action="append", default=[])
    sub.add_parser("selftest")

    args = parser.parse_args(argv)
    if args.command == "selftest":
        return _cmd_selftest()
    try:
        cfg = _apply_overrides(load_config(args.config), args)
    except (ConfigError, FileNotFoundError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    try:
        if args.command == "collect":
            return _cmd_collect(cfg, out)
        if args.command == "train":
            return _cmd_train(cfg, out)
        if args.command == "sweep":
            return _cmd_sweep(cfg, out)
        if args.command == "plot":
            return _cmd_plot(cfg, out, args.csv)
    except Exception as exc:  # runtime failure -> exit 2
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
