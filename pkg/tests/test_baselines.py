import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tensorpsr.baselines import ProjectionSpec, learn_cpsr, learn_tpsr
from tensorpsr.envs import belief_oracle
from tensorpsr.errors import InvalidArgumentError
from tensorpsr.estimation import (AgentSpace, HistorySet, SysDynMatrix, SysDynTensor,
                                  TrajectorySet, build_sds_matrix, build_test_sets)
from tensorpsr.psr import filter_update, raw_next_obs
from tensorpsr.tensor import truncated_svd

SP = AgentSpace((1, 1), (2, 2))


def small_matrix(mat):
    """Wrap a 4 x H matrix as the dynamics matrix of a 1-action, 2-obs pair of agents."""
    tests = build_test_sets(TrajectorySet(), SP, 1)
    hs = HistorySet.from_histories([()] + [(((0, 0), (i // 2, i % 2)),) for i in range(mat.shape[1] - 1)])
    sds = SysDynTensor(mat.reshape(2, 2, -1), tests, hs, SP)
    return build_sds_matrix(None, tests, hs, SP, sds=sds), hs


def exact_error(model, system, n_hist=None):
    worst = 0.0
    for h in system.hists.histories[:n_hist]:
        x = model.x0
        for ao in h:
            x, _ = filter_update(model, x, ao)
        for a in system.space.joint_actions():
            worst = max(worst, np.abs(raw_next_obs(model, x, a) - belief_oracle(system.env, h, a)).max())
    return worst


@pytest.fixture(scope="module")
def exact_matrix(exact_system):
    return build_sds_matrix(None, exact_system.tests, exact_system.hists, exact_system.space,
                            sds=exact_system.sds)


def test_tpsr_rank1_reproduces():
    u = np.array([0.1, 0.2, 0.3, 0.4])
    v = np.array([1.0, 0.5, 0.25, 0.75, 0.6])
    sdm, hs = small_matrix(np.outer(u, v))
    model = learn_tpsr(sdm, hs, 1, 0.0)
    _, _, vv = truncated_svd(sdm.matrix, 1)
    approx = model.mtilde.reshape(4, 1) @ vv.T
    np.testing.assert_allclose(approx, np.outer(u, v), atol=1e-10)


@pytest.mark.parametrize("learner", ["tpsr", "cpsr"])
def test_zero_matrix_zero_model(learner):
    sdm, hs = small_matrix(np.zeros((4, 5)))
    if learner == "tpsr":
        model = learn_tpsr(sdm, hs, 1, 1e-6)
    else:
        model = learn_cpsr(sdm, hs, ProjectionSpec(2, seed=1), 1, 1e-6)
    assert not model.mtilde.any() and not model.Mtilde


def test_rank_checks():
    sdm, hs = small_matrix(np.ones((4, 3)))
    with pytest.raises(InvalidArgumentError):
        learn_tpsr(sdm, hs, 4)
    with pytest.raises(InvalidArgumentError):
        learn_cpsr(sdm, hs, ProjectionSpec(2), 3)
    with pytest.raises(InvalidArgumentError):
        ProjectionSpec(0)
    with pytest.raises(InvalidArgumentError):
        ProjectionSpec(5).matrix(4)
    with pytest.raises(InvalidArgumentError):
        ProjectionSpec(3, "identity").matrix(4)


def test_tpsr_exact_system(exact_system, exact_matrix):
    model = learn_tpsr(exact_matrix, exact_system.hists, exact_system.rank, 0.0)
    assert exact_error(model, exact_system) <= 1e-6


def test_cpsr_exact_system(exact_system, exact_matrix):
    model = learn_cpsr(exact_matrix, exact_system.hists, ProjectionSpec(8, seed=1),
                       exact_system.rank, 0.0)
    assert exact_error(model, exact_system) <= 1e-4


def test_cpsr_identity_equals_tpsr(exact_system, exact_matrix):
    n = exact_matrix.matrix.shape[0]
    t = learn_tpsr(exact_matrix, exact_system.hists, 3, 0.0)
    c = learn_cpsr(exact_matrix, exact_system.hists, ProjectionSpec(n, "identity"), 3, 0.0)
    for h in exact_system.hists.histories[:17]:
        xt, xc = t.x0, c.x0
        for ao in h:
            xt, _ = filter_update(t, xt, ao)
            xc, _ = filter_update(c, xc, ao)
        for a in exact_system.space.joint_actions():
            np.testing.assert_allclose(np.abs(raw_next_obs(c, xc, a)),
                                       np.abs(raw_next_obs(t, xt, a)), atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**16), st.sampled_from(["sparse-sign", "gaussian"]), st.integers(1, 8))
def test_projection_seeded(seed, scheme, d):
    a = ProjectionSpec(d, scheme, seed).matrix(8)
    assert a.shape == (d, 8)
    assert np.array_equal(a, ProjectionSpec(d, scheme, seed).matrix(8))
    if scheme == "sparse-sign":
        vals = np.unique(np.abs(a[a != 0]))
        assert vals.size <= 1 and (vals.size == 0 or abs(vals[0] - np.sqrt(3 / d)) < 1e-15)


def test_sparse_sign_density():
    a = ProjectionSpec(200, seed=3).matrix(500)
    assert abs(np.mean(a != 0) - 1 / 3) < 0.01
    assert abs(np.mean(a > 0) - np.mean(a < 0)) < 0.01


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**16))
def test_tpsr_deterministic(seed):
    rng = np.random.default_rng(seed)
    sdm, hs = small_matrix(rng.random((4, 5)))
    a, b = learn_tpsr(sdm, hs, 2), learn_tpsr(sdm, hs, 2)
    assert np.array_equal(a.mtilde, b.mtilde) and np.array_equal(a.x0, b.x0)
    c, d = (learn_cpsr(sdm, hs, ProjectionSpec(3, seed=seed), 2) for _ in range(2))
    assert np.array_equal(c.mtilde, d.mtilde)


def test_tpsr_reconstructs_exact_rank(exact_matrix, exact_system):
    model = learn_tpsr(exact_matrix, exact_system.hists, 3, 0.0)
    _, _, v = truncated_svd(exact_matrix.matrix, 3)
    rows = np.array([model.mtilde[i, j] for i, j in exact_matrix.joint_tests])
    np.testing.assert_allclose(rows @ v.T, exact_matrix.matrix, atol=1e-10)


def test_sdm_type(exact_matrix):
    assert isinstance(exact_matrix, SysDynMatrix)
    assert exact_matrix.matrix.shape == (16, 273)
