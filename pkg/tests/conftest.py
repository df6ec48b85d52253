import numpy as np
import pytest

from rcorl.collect import CollectionConfig, rollout_dataset
from rcorl.datasets import normalize_states
from rcorl.envs import make_feature_spec


class _Steer:
    """Scripted continuous behaviour: push along the goal-relative features when they are visible."""

    def __init__(self, spec):
        self.cols = [spec.mask.index(i) if i in spec.mask else None for i in (4, 5)]

    def predict(self, obs):
        return np.array([0.0 if c is None else np.clip(2 * obs[c], -1, 1) for c in self.cols])


class _UniformQ:
    def __init__(self, n_actions=5):
        self.n = n_actions

    def q_values(self, obs):
        return np.zeros(np.shape(obs)[:-1] + (self.n,))


@pytest.fixture(scope="session")
def point_spec():
    return make_feature_spec("point_reach", 5, 0)


@pytest.fixture(scope="session")
def point_dataset(point_spec):
    cfg = CollectionConfig(size_budget=600, action_noise=0.3)
    ds = rollout_dataset(_Steer(point_spec), "point_reach", point_spec, 600, 1, cfg, "medium")
    return normalize_states(ds)[0]


@pytest.fixture(scope="session")
def grid_dataset():
    spec = make_feature_spec("grid_pix")
    cfg = CollectionConfig(size_budget=400, epsilon=1.0)
    ds = rollout_dataset(_UniformQ(), "grid_pix", spec, 400, 3, cfg, "medium")
    return normalize_states(ds)[0]


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
