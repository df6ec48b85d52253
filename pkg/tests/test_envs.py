import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcorl.envs import (
    POINT_REACH_DIMS,
    EnvState,
    FeatureProjector,
    FeatureSpec,
    GridPix,
    PointReach,
    env_manifest,
    env_reset,
    env_step,
    full_spec,
    make_feature_spec,
    observe,
)
from rcorl.exceptions import ContractError


def _point_state(pos, vel, goal, t=0):
    env = PointReach()
    return EnvState("point_reach", env.raw_features(np.asarray(pos, float), np.asarray(vel, float),
                                                    np.asarray(goal, float)), t, {"goal": np.asarray(goal, float)})


@pytest.mark.parametrize("env_id", ["point_reach", "grid_pix"])
def test_reset_is_deterministic(env_id):
    assert env_reset(env_id, 11) == env_reset(env_id, 11)
    assert not env_reset(env_id, 11) == env_reset(env_id, 12)


def test_point_reach_starts_at_rest_with_11_features():
    s = env_reset("point_reach", 3)
    assert s.raw.shape == (11,)
    assert s.raw[2] == 0.0 and s.raw[3] == 0.0


def test_grid_pix_seed0_placement_follows_the_documented_rule():
    rng = np.random.default_rng(0)
    agent = tuple(int(v) for v in rng.integers(1, 23, size=2))
    target = tuple(int(v) for v in rng.integers(1, 23, size=2))
    while target == agent:
        target = tuple(int(v) for v in rng.integers(1, 23, size=2))
    s = env_reset("grid_pix", 0)
    assert s.internals["agent"] == agent
    assert s.internals["target"] == target
    img = s.raw.reshape(24, 24)
    assert img[agent] == 1.0 and img[target] == 0.6
    assert np.all((s.raw >= 0) & (s.raw <= 1))


def test_unknown_env_rejected():
    with pytest.raises(ContractError):
        env_reset("cartpole", 0)


def test_zero_action_at_rest_is_a_fixed_point():
    s = _point_state([0.2, -0.3], [0, 0], [0.8, 0.5])
    r = env_step(s, [0.0, 0.0])
    np.testing.assert_array_equal(r.next_state.raw[:2], [0.2, -0.3])
    assert r.reward == pytest.approx(-np.hypot(0.6, 0.8))


def test_euler_step_shifts_position_by_velocity_times_dt():
    s = _point_state([0.0, 0.0], [0.1, 0.0], [0.8, 0.8])
    r = env_step(s, [0.0, 0.0])
    np.testing.assert_allclose(r.next_state.raw[:2], [0.01, 0.0], atol=1e-15)


def _replay_point_reach(pos, goal, action, horizon=200):
    # independent scratch implementation of the documented dynamics
    dt, vmax, radius = 0.1, 1.0, 0.1
    pos, vel, goal = np.array(pos, float), np.zeros(2), np.array(goal, float)
    total = 0.0
    for _ in range(horizon):
        vel = np.minimum(np.maximum(vel + np.asarray(action) * dt, -vmax), vmax)
        pos = np.minimum(np.maximum(pos + vel * dt, -1.0), 1.0)
        d = float(np.sqrt(((goal - pos) ** 2).sum()))
        total += -d + (10.0 if d < radius else 0.0)
        if d < radius:
            break
    return total


@pytest.mark.parametrize("seed", [0, 5, 9])
def test_scripted_episode_matches_replay_oracle(seed):
    s = env_reset("point_reach", seed)
    pos, goal = s.raw[:2].copy(), s.internals["goal"].copy()
    direction = (goal - pos) / np.linalg.norm(goal - pos)
    action = 0.3 * direction
    total, done = 0.0, False
    while not done:
        r = env_step(s, action)
        total += r.reward
        s, done = r.next_state, r.done
    assert total == pytest.approx(_replay_point_reach(pos, goal, action), rel=1e-12, abs=1e-12)


def test_horizon_ends_episode_without_terminal():
    s = _point_state([-0.9, -0.9], [0, 0], [0.9, 0.9])
    for _ in range(200):
        r = env_step(s, [0.0, 0.0])
        s = r.next_state
    assert r.done and not r.terminal


def test_point_reach_rejects_out_of_range_action():
    with pytest.raises(ContractError):
        env_step(env_reset("point_reach", 0), [1.5, 0.0])


def test_grid_pix_step_reward_walls_and_target():
    env = GridPix()
    s = EnvState("grid_pix", env.render((1, 1), (1, 2)), 0, {"agent": (1, 1), "target": (1, 2)})
    blocked = env_step(s, "up")
    assert blocked.next_state.internals["agent"] == (1, 1)
    assert blocked.reward == pytest.approx(-0.05)
    reached = env_step(s, "right")
    assert reached.done and reached.terminal
    assert reached.reward == pytest.approx(0.95)
    with pytest.raises(ContractError):
        env_step(s, 7)


def test_observe_full_mask_is_identity():
    s = env_reset("point_reach", 1)
    np.testing.assert_array_equal(observe(s, full_spec("point_reach")), s.raw)


def test_observe_picks_mask_indices_in_order():
    spec = FeatureSpec("index_mask", 3, (0, 2))
    np.testing.assert_array_equal(spec.project(np.array([4.0, 5.0, 6.0])), [4.0, 6.0])


def test_pixelation_of_constant_image_is_constant():
    spec = make_feature_spec("grid_pix")
    np.testing.assert_allclose(spec.project(np.full(576, 0.37)), np.full(576, 0.37), atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_pixelation_is_idempotent(seed):
    spec = make_feature_spec("grid_pix")
    img = np.random.default_rng(seed).uniform(size=576)
    once = spec.project(img)
    np.testing.assert_allclose(spec.project(once), once, atol=1e-15)


def test_pixelation_block_averages():
    spec = make_feature_spec("grid_pix")
    img = np.zeros((24, 24))
    img[0, 0] = 16.0
    out = spec.project(img.reshape(-1)).reshape(24, 24)
    assert np.all(out[:4, :4] == 1.0) and out[4:, :].sum() == 0 and out[:, 4:].sum() == 0


def test_observe_rejects_mismatched_spec():
    with pytest.raises(ContractError):
        observe(env_reset("grid_pix", 0), make_feature_spec("point_reach", 5, 0))


@settings(max_examples=40, deadline=None)
@given(dim=st.integers(1, 11), seed=st.integers(0, 10_000))
def test_masking_then_padding_reconstructs_raw(dim, seed):
    spec = make_feature_spec("point_reach", dim, seed)
    state = env_reset("point_reach", seed)
    raw = state.raw
    dropped = [i for i in range(11) if i not in spec.mask]
    rebuilt = np.zeros(11)
    rebuilt[list(spec.mask)] = observe(state, spec)
    rebuilt[dropped] = raw[dropped]
    np.testing.assert_array_equal(rebuilt, raw)
    assert len(spec.mask) == dim and list(spec.mask) == sorted(set(spec.mask))


def test_mask_is_a_pure_function_of_its_seed():
    assert make_feature_spec("point_reach", 5, 3) == make_feature_spec("point_reach", 5, 3)


def test_full_constrained_dim_keeps_every_index():
    assert make_feature_spec("point_reach", 11, 4).mask == tuple(range(11))


def test_supported_constrained_dims():
    assert POINT_REACH_DIMS == (5, 7, 9, 10)
    assert env_manifest("point_reach")["full_dim"] == 11


def test_constrained_dim_above_full_dim_rejected():
    with pytest.raises(ContractError):
        make_feature_spec("point_reach", 12, 0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), actions=st.lists(
    st.tuples(st.floats(-1, 1), st.floats(-1, 1)), min_size=1, max_size=60))
def test_dynamics_stay_in_arena_and_reward_is_bounded(seed, actions):
    s = env_reset("point_reach", seed)
    for a in actions:
        r = env_step(s, a)
        raw = r.next_state.raw
        assert np.all(np.abs(raw[:2]) <= 1.0)
        np.testing.assert_allclose(raw[7:11], [1 - raw[0], 1 + raw[0], 1 - raw[1], 1 + raw[1]], atol=1e-15)
        assert -2 * np.sqrt(2) <= r.reward <= 10.0
        if r.done:
            break
        s = r.next_state


def test_feature_projector_is_a_transformer():
    spec = make_feature_spec("point_reach", 5, 0)
    X = np.stack([env_reset("point_reach", i).raw for i in range(4)])
    np.testing.assert_array_equal(FeatureProjector(spec).fit_transform(X), X[:, list(spec.mask)])


def test_spec_dict_round_trip():
    for spec in (make_feature_spec("point_reach", 7, 2), make_feature_spec("grid_pix")):
        assert FeatureSpec.from_dict(spec.to_dict()) == spec
