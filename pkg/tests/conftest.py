import numpy as np
import pytest

from dreamrand.envs import Dataset, TrackWorld, collect_trajectories, expert_policy
from dreamrand.numerics import rng_stream
from dreamrand.training import TrainConfig, train_dynamics


@pytest.fixture(scope="session")
def track_dataset():
    """Small mixed-policy TrackWorld dataset shared across test modules."""
    env = TrackWorld(max_ep_len=150)
    train = collect_trajectories(env, expert_policy(env), 24, 0.9, rng_stream(900, "fixture", "train"))
    test = collect_trajectories(env, expert_policy(env), 6, 0.9, rng_stream(900, "fixture", "test"))
    return Dataset.from_splits(train, test)


@pytest.fixture(scope="session")
def small_train_cfg():
    return TrainConfig(hidden_size=16, mixture_k=3, epochs=6, seq_len=24, batch_size=8, seed=901)


@pytest.fixture(scope="session")
def trained_track_model(track_dataset, small_train_cfg):
    params, report = train_dynamics(track_dataset, small_train_cfg)
    return params, report
