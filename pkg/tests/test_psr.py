import numpy as np
import pytest
from conftest import make_trajs
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tensorpsr.decomp import CpFactors, DecompConfig, TuckerFactors, reconstruct
from tensorpsr.envs import belief_oracle, generate_trajectories, make_env
from tensorpsr.errors import InvalidArgumentError, MissingParameterError, SingularSystemError
from tensorpsr.estimation import (AgentSpace, HistorySet, TrajectorySet, build_history_set,
                                  build_sds_tensor, build_test_sets)
from tensorpsr.psr import (EPS_DIV, PsrModel, build_regression_sets, extract_prediction_params,
                           extract_states, filter_update, learn_psr, learn_transition,
                           marginalize_model, normalize_prediction, predict_next_obs_dist,
                           predict_test, prediction_params, raw_next_obs)


@pytest.fixture(scope="module")
def exact_cp(exact_system):
    cfg = DecompConfig("CP", exact_system.rank, init="gevd")
    return learn_psr(exact_system.sds, exact_system.hists, cfg, 0.0)


def filtered_state(model, h):
    x = model.x0
    for ao in h:
        x, reset = filter_update(model, x, ao)
        assert not reset
    return x


def test_cp_params_example():
    f = CpFactors(np.array([2.0]), [np.array([[0.5]]), np.array([[0.5]]), np.array([[1.0]])])
    np.testing.assert_allclose(extract_prediction_params(f, (0, 0)), [0.5])
    with pytest.raises(InvalidArgumentError):
        extract_prediction_params(f, (1, 0))


def test_tucker_identity_params():
    core = np.zeros((2, 2, 2))
    core[0, 1, 1] = 1.0
    core[1, 0, 0] = 1.0
    f = TuckerFactors(core, [np.eye(2), np.eye(2), np.eye(2)])
    np.testing.assert_array_equal(extract_prediction_params(f, (0, 1)), [0.0, 1.0])
    np.testing.assert_array_equal(extract_prediction_params(f, (1, 0)), [1.0, 0.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**16), st.booleans())
def test_params_reproduce_reconstruction(seed, cp):
    rng = np.random.default_rng(seed)
    shape = (3, 4, 5)
    if cp:
        f = CpFactors(rng.random(2), [rng.standard_normal((n, 2)) for n in shape])
    else:
        f = TuckerFactors(rng.standard_normal((2, 3, 2)),
                          [rng.standard_normal((n, r)) for n, r in zip(shape, (2, 3, 2))])
    full = reconstruct(f)
    x = extract_states(f)
    assert x.shape[0] == 5
    allp = prediction_params(f)
    for i in range(3):
        for j in range(4):
            m = extract_prediction_params(f, (i, j))
            np.testing.assert_allclose(allp[i, j], m, atol=1e-14)
            np.testing.assert_allclose(x @ m, full[i, j], atol=1e-12)


def test_states_identity():
    f = CpFactors(np.ones(3), [np.eye(3), np.eye(3), np.eye(3)])
    np.testing.assert_array_equal(extract_states(f), np.eye(3))


def test_regression_sets_examples():
    ao = ((0, 1), (1, 0))
    hs = HistorySet.from_histories([(), (ao,)])
    assert build_regression_sets(hs, ao) == ([0], [1])
    assert build_regression_sets(hs, ((1, 1), (1, 0))) == ([], [])


def test_regression_sets_gridworld_pairing():
    env = make_env("gridworld")
    hs = build_history_set(generate_trajectories(env, 500, 10, 2), 10)
    seen = 0
    for ao in {h[-1] for h in hs.histories[1:]}:
        prev, ext = build_regression_sets(hs, ao)
        assert len(prev) == len(ext)
        for p, e in zip(prev, ext):
            assert hs.histories[e][:-1] == hs.histories[p] and hs.histories[e][-1] == ao
        seen += len(ext)
    assert seen == len(hs) - 1


def test_transition_examples():
    xa = np.random.default_rng(0).random((2, 2))
    np.testing.assert_allclose(learn_transition(np.eye(2), xa, np.ones(2), 0.0), xa)
    assert not learn_transition(np.eye(2), np.zeros((2, 2)), np.ones(2), 0.0).any()
    with pytest.raises(SingularSystemError):
        learn_transition(np.ones((1, 3)), np.ones((1, 3)), np.ones(3), 0.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**20))
def test_transition_recovers_known(seed):
    rng = np.random.default_rng(seed)
    r = 6
    x = rng.random((50, r)) + 0.1
    m = rng.random(r)
    m0 = rng.standard_normal((r, r))
    d = x @ m
    x_ao = (x @ m0) / d[:, None]
    np.testing.assert_allclose(learn_transition(x, x_ao, m, 0.0), m0, rtol=0, atol=1e-8)


def test_filter_examples():
    tests = build_test_sets(TrajectorySet(), AgentSpace((1,), (2,)), 1)
    mt = np.array([[0.5, 0.5], [0.5, 0.5]])
    ao = ((0,), (0,))
    model = PsrModel(np.array([1.0, 1.0]), mt, {ao: np.eye(2)}, tests, AgentSpace((1,), (2,)))
    x, reset = filter_update(model, np.array([1.0, 1.0]), ao)
    assert not reset and np.array_equal(x, [1.0, 1.0])
    x, reset = filter_update(model, np.array([1.0, -1.0]), ao)
    assert reset and np.array_equal(x, model.x0)
    assert predict_test(model, model.x0, [ao]) == pytest.approx(1.0)
    assert predict_test(model, model.x0, [ao, ao]) == pytest.approx(1.0)
    with pytest.raises(MissingParameterError):
        model.m_ao((1,), (0,))


def test_normalize_examples():
    np.testing.assert_allclose(normalize_prediction(np.array([0.7, 0.3, 0, 0])),
                               [0.7, 0.3, 0, 0], atol=1e-9)
    np.testing.assert_allclose(normalize_prediction(np.array([-0.2, 0.5, 0.5])),
                               [0, 0.5, 0.5], atol=1e-9)
    np.testing.assert_array_equal(normalize_prediction(np.zeros(4)), np.full(4, 0.25))


@given(hnp.arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e3, 1e3)),
       st.floats(1e-3, 1e3))
def test_normalized_is_simplex_and_scale_free(raw, c):
    p = normalize_prediction(raw)
    assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-9
    np.testing.assert_allclose(normalize_prediction(c * raw), p, atol=1e-9)


def test_missing_phi_rejected(exact_system):
    hs = HistorySet((((((0, 0), (0, 0)),)),), (1,), (1,))
    with pytest.raises(InvalidArgumentError):
        learn_psr(exact_system.sds, hs, DecompConfig("CP", 2))


def test_deterministic_one_state_system():
    sp = AgentSpace((2, 2), (2, 2))
    rng = np.random.default_rng(0)
    tr = make_trajs([[(tuple(rng.integers(0, 2, 2)), (0, 0)) for _ in range(4)]
                     for _ in range(40)])
    tests = build_test_sets(tr, sp, 1)
    hs = build_history_set(tr, 3)
    model = learn_psr(build_sds_tensor(tr, tests, hs, sp), hs, DecompConfig("NCP", 1))
    for h in tr.keys[:5]:
        x = model.x0
        for a, o in h:
            p = predict_next_obs_dist(model, x, a)
            assert abs(p[sp.obs_index((0, 0))] - 1.0) <= 1e-6
            x, _ = filter_update(model, x, (a, o))


def test_exact_factorization_consistency(exact_system, exact_cp):
    x = exact_cp.factors.factors[-1]
    np.testing.assert_allclose(np.einsum("kr,ijr->ijk", x, exact_cp.mtilde),
                               reconstruct(exact_cp.factors), atol=1e-10)


def test_exact_filter_matches_state_rows(exact_system, exact_cp):
    states = exact_cp.factors.factors[-1]
    for k, h in enumerate(exact_system.hists.histories[:17]):
        np.testing.assert_allclose(filtered_state(exact_cp, h), states[k], atol=1e-6)


def test_exact_two_step_predictions(exact_system, exact_cp):
    env, sp = exact_system.env, exact_system.space
    worst = 0.0
    for h in exact_system.hists.histories[:17]:
        x = filtered_state(exact_cp, h)
        for a1 in sp.joint_actions():
            for o1 in sp.joint_observations():
                p1 = belief_oracle(env, h, a1)[sp.obs_index(o1)]
                for a2 in sp.joint_actions():
                    p2 = belief_oracle(env, h + ((a1, o1),), a2)
                    raw = np.array([predict_test(exact_cp, x, [(a1, o1), (a2, o2)])
                                    for o2 in sp.joint_observations()])
                    worst = max(worst, np.abs(raw - p1 * p2).max())
    assert worst <= 1e-6


def test_filter_predict_composition(exact_system, exact_cp):
    sp = exact_system.space
    x = filtered_state(exact_cp, exact_system.hists.histories[5])
    for a1 in sp.joint_actions():
        for o1 in sp.joint_observations():
            d = x @ exact_cp.m_ao(a1, o1)
            if abs(d) <= EPS_DIV:
                continue
            x1, _ = filter_update(exact_cp, x, (a1, o1))
            for a2 in sp.joint_actions():
                for o2 in sp.joint_observations():
                    lhs = predict_test(exact_cp, x, [(a1, o1), (a2, o2)])
                    rhs = d * predict_test(exact_cp, x1, [(a2, o2)])
                    assert abs(lhs - rhs) <= 1e-9


def test_marginal_equals_joint_sum(exact_system, exact_cp):
    sp = exact_system.space
    for agent in range(2):
        marg = marginalize_model(exact_cp, agent)
        other = 1 - agent
        for h in exact_system.hists.histories[:17]:
            x = filtered_state(exact_cp, h)
            for a in sp.joint_actions():
                joint = predict_next_obs_dist(exact_cp, x, a).reshape(sp.n_obs)
                want = joint.sum(axis=other)
                got = predict_next_obs_dist(marg, x, (a[agent],))
                np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)
            raw_m = raw_next_obs(marg, x, (0,))
            raw_j = sum(raw_next_obs(exact_cp, x, (0, b) if agent == 0 else (b, 0))
                        .reshape(sp.n_obs).sum(axis=other) for b in range(2))
            np.testing.assert_allclose(raw_m, raw_j, atol=1e-12)


def test_marginal_singleton_and_zero():
    sp = AgentSpace((2, 1), (2, 1))
    tests = build_test_sets(TrajectorySet(), sp, 1)
    rng = np.random.default_rng(1)
    mt = rng.random(tests.shape + (2,))
    big = {((0, 0), (1, 0)): rng.random((2, 2))}
    model = PsrModel(np.ones(2), mt, big, tests, sp)
    marg = marginalize_model(model, 0)
    np.testing.assert_array_equal(marg.mtilde, mt[:, 0, :])
    np.testing.assert_array_equal(marg.M_ao((0,), (1,)), big[((0, 0), (1, 0))])
    zero = PsrModel(np.ones(2), np.zeros_like(mt), {}, tests, sp)
    assert not marginalize_model(zero, 0).mtilde.any()


def test_model_json_roundtrip(tmp_path, exact_cp):
    p = tmp_path / "m.json"
    exact_cp.save(p)
    back = PsrModel.load(p)
    assert np.array_equal(back.x0, exact_cp.x0)
    assert np.array_equal(back.mtilde, exact_cp.mtilde)
    assert back.Mtilde.keys() == exact_cp.Mtilde.keys()
    for k in back.Mtilde:
        assert np.array_equal(back.Mtilde[k], exact_cp.Mtilde[k])
    back.save(tmp_path / "m2.json")
    assert (tmp_path / "m2.json").read_bytes() == p.read_bytes()


def test_unobserved_pairs_are_zero_and_flagged():
    env = make_env("gridworld")
    tr = generate_trajectories(env, 60, 5, 0)
    tests = build_test_sets(tr, env.space, 1)
    hs = build_history_set(tr, 5)
    model = learn_psr(build_sds_tensor(tr, tests, hs, env.space, 0.0), hs,
                      DecompConfig("NCP", 4, max_iters=50))
    n_pairs = env.space.n_joint_actions * env.space.n_joint_obs
    assert model.meta["n_flagged_pairs"] == n_pairs - len(model.Mtilde) > 0
    missing = next((a, o) for a in env.space.joint_actions() for o in env.space.joint_observations()
                   if (a, o) not in model.Mtilde)
    assert not model.M_ao(*missing).any()
    x = model.x0
    for a in env.space.joint_actions()[:4]:
        p = predict_next_obs_dist(model, x, a)
        assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-9
