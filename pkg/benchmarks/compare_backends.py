#!/usr/bin/env python3
"""Benchmark the rollout kernel backends on planning-shaped workloads.

Runs the same candidate-population evaluation through the pure-numpy
reference and the compiled core (when built) and reports per-call times and
per-MLP-step costs. Usage:

    python benchmarks/compare_backends.py [--threads N] [--seconds S]
"""

import argparse
import time

import numpy as np

from drpets import envsim, ensemble, planner
from drpets._kernels import get_rollout


def make_model(obs_dim: int, members: int, hidden) -> ensemble.EnsembleModel:
    rng = np.random.default_rng(0)
    obs = rng.normal(size=(512, obs_dim))
    act = rng.uniform(-2, 2, 512)
    nxt = obs + 0.05 * rng.normal(size=(512, obs_dim))
    data = ensemble.TransitionDataset.from_transitions(obs, act, nxt)
    model = ensemble.init_ensemble(obs_dim, members=members, hidden=hidden, seed=0)
    return ensemble.EnsembleModel(model.members, data.norm, obs_dim, 1)


def bench_case(name, kind, model, population, particles, horizon, threads, seconds):
    params = envsim.default_params(kind)
    rng = np.random.default_rng(1)
    cands = np.clip(rng.normal(0, 1, (population, horizon)),
                    params.action_low, params.action_high)
    normals = rng.standard_normal(
        (population, model.size, particles, horizon - 1, model.obs_dim))
    inputs = planner._kernel_inputs(model, kind, params)
    steps = population * model.size * particles * (horizon - 1)

    backends = [("python", 1)]
    try:
        get_rollout("compiled")
        backends += [("compiled", 1), ("compiled", threads)]
    except ImportError:
        print("compiled backend not built; benchmarking the numpy fallback only")

    print(f"\n{name}: M={population} B={model.size} Q={particles} T={horizon} "
          f"({steps} MLP steps/call)")
    results = {}
    for backend, n_threads in backends:
        fn = get_rollout(backend)
        fn(start_obs=np.zeros(model.obs_dim), seqs=cands, normals=normals, gamma=0.99,
           with_scores=True, threads=n_threads, **inputs)  # warm-up
        t0 = time.perf_counter()
        calls = 0
        while time.perf_counter() - t0 < seconds:
            fn(start_obs=np.zeros(model.obs_dim), seqs=cands, normals=normals,
               gamma=0.99, with_scores=True, threads=n_threads, **inputs)
            calls += 1
        dt = (time.perf_counter() - t0) / calls
        label = f"{backend} ({n_threads} thread{'s' if n_threads > 1 else ''})"
        results[label] = dt
        print(f"  {label:<22} {dt * 1e3:8.2f} ms/call   {dt / steps * 1e6:6.3f} us/MLP-step")
    if len(results) > 1:
        base = results.get("python (1 thread)")
        fastest = min(results.values())
        print(f"  speedup over numpy fallback: {base / fastest:.2f}x")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--threads", type=int, default=2)
    ap.add_argument("--seconds", type=float, default=2.0)
    args = ap.parse_args()

    pend = make_model(3, 5, (32, 32, 32))
    bench_case("pendulum desk planning", envsim.EnvKind.PENDULUM, pend,
               population=64, particles=4, horizon=16,
               threads=args.threads, seconds=args.seconds)
    cart = make_model(5, 5, (32, 32, 32))
    bench_case("cartpole desk planning", envsim.EnvKind.CARTPOLE_SWINGUP, cart,
               population=64, particles=4, horizon=40,
               threads=args.threads, seconds=args.seconds)
    big = make_model(3, 5, (64, 64, 64))
    bench_case("pendulum full-width net", envsim.EnvKind.PENDULUM, big,
               population=128, particles=10, horizon=25,
               threads=args.threads, seconds=args.seconds)


if __name__ == "__main__":
    main()
