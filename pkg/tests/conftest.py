import numpy as np
import pytest

from drpets import ensemble, envsim


@pytest.fixture(scope="session")
def pendulum_params():
    return envsim.default_params(envsim.EnvKind.PENDULUM)


@pytest.fixture(scope="session")
def tiny_pendulum_model():
    """Small ensemble trained briefly on random pendulum transitions; enough
    structure for planner/drcore integration tests without real training cost."""
    from drpets import bench
    kind = envsim.EnvKind.PENDULUM
    params = envsim.default_params(kind)
    data = bench.collect_random(kind, params, episodes=2, horizon=150, seed=1234)
    model, _ = ensemble.train(
        ensemble.init_ensemble(3, members=3, hidden=(24, 24), seed=0),
        data, ensemble.TrainConfig(epochs=8, batch_size=64, seed=0))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
