import numpy as np
import pytest

from tensorpsr.envs import exact_dynamics_tensor, random_sensing_pomdp
from tensorpsr.estimation import (HistorySet, Step, SysDynTensor, TrajectorySet,
                                  build_test_sets)


def make_trajs(episodes) -> TrajectorySet:
    """Episodes given as lists of (joint action, joint observation) pairs."""
    return TrajectorySet([tuple(Step(tuple(a), tuple(o)) for a, o in ep) for ep in episodes])


def all_histories(space, depth):
    steps = [(a, o) for a in space.joint_actions() for o in space.joint_observations()]
    out, layer = [()], [()]
    for _ in range(depth):
        layer = [h + (s,) for h in layer for s in steps]
        out += layer
    return out


class ExactSystem:
    """3-state, 2-agent sensing POMDP with its analytic dynamics tensor."""

    def __init__(self, seed=0, depth=2):
        self.env = random_sensing_pomdp(seed)
        self.space = self.env.space
        self.hists = HistorySet.from_histories(all_histories(self.space, depth))
        self.tests = build_test_sets(TrajectorySet(), self.space, 1)
        self.tensor = exact_dynamics_tensor(self.env, self.tests, self.hists)
        self.sds = SysDynTensor(self.tensor, self.tests, self.hists, self.space)
        self.rank = 3


@pytest.fixture(scope="session")
def exact_system():
    return ExactSystem()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
