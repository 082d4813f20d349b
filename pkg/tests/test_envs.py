import numpy as np
import pytest
from hypothesis import given, strategies as st

from rlattrib.envs import EmptyGrid, EnvError, EnvSpec, EnvId, NotTabular, StepAfterDone, make_env

ENV_IDS = ["frozenlake", "emptygrid", "chain"]


@pytest.mark.parametrize("seed", [0, 7, 2**31 - 2])
def test_frozenlake_reset_is_top_left(seed):
    obs = make_env("frozenlake").reset(seed)
    assert obs.argmax() == 0 and obs.sum() == 1.0


def test_chain_reset():
    obs = make_env("chain", length=5).reset(3)
    assert obs.tolist() == [1, 0, 0, 0, 0]


def test_frozenlake_layout():
    env = make_env("frozenlake")
    assert env.terminal_states() == {5, 7, 11, 12, 15}
    assert len(env.enumerate_states()) == 16


def test_frozenlake_goal_step():
    env = make_env("frozenlake")
    assert env.model(14, 2) == (15, 1.0, True)


def test_frozenlake_wall_clamp():
    env = make_env("frozenlake")
    env.reset(0)
    res = env.step(0)
    assert res.next_obs.argmax() == 0 and res.reward == 0.0 and not res.done


def test_frozenlake_hole_ends_without_reward():
    env = make_env("frozenlake")
    env.reset(0)
    env.step(2)                 # 0 -> 1
    res = env.step(1)           # 1 -> 5 (hole)
    assert res.done and res.reward == 0.0


def test_optimal_path_reaches_goal():
    env = make_env("frozenlake")
    env.reset(0)
    total = 0.0
    for a in (1, 1, 2, 1, 2, 2):   # 0 -> 4 -> 8 -> 9 -> 13 -> 14 -> 15
        res = env.step(a)
        total += res.reward
    assert res.done and total == 1.0


def test_step_after_done_raises():
    env = make_env("chain", length=1)
    env.reset(0)
    assert env.step(1).done
    with pytest.raises(StepAfterDone):
        env.step(1)
    assert issubclass(StepAfterDone, EnvError)


def test_step_before_reset_raises():
    with pytest.raises(StepAfterDone):
        make_env("frozenlake").step(0)


def test_invalid_action():
    env = make_env("chain")
    env.reset(0)
    with pytest.raises(ValueError):
        env.step(2)


def test_emptygrid_reward_formula():
    env = EmptyGrid(max_steps=256)
    env.reset(0)
    env._steps = 9          # the goal is entered on step 10
    env.agent_pos, env.agent_dir = (6, 5), 1
    res = env.step(2)
    assert res.done
    assert res.reward == pytest.approx(1 - 0.9 * 10 / 256)
    assert res.reward == pytest.approx(0.96484375)


def test_emptygrid_start_view():
    env = make_env("emptygrid")
    obs = env.reset(0)
    assert obs.shape == (147,)
    assert env.agent_pos == (1, 1) and env.agent_dir == 0
    img = env.view()
    # straight ahead (i=3, j<6) runs along the top row: empty until the far wall
    assert [tuple(img[3, j]) for j in range(6)] == [(2, 5, 0)] + [(1, 0, 0)] * 5
    # the agent's own cell reads as empty
    assert tuple(img[3, 6]) == (1, 0, 0)


def test_emptygrid_default_cap_and_not_tabular():
    env = make_env("emptygrid")
    assert env.spec.max_steps == 256
    with pytest.raises(NotTabular):
        env.enumerate_states()


def test_default_caps():
    assert make_env("frozenlake").spec.max_steps == 100
    assert make_env("chain", length=5).spec.max_steps == 20
    assert len(make_env("chain", length=5).enumerate_states()) == 5


def test_spec_validation():
    with pytest.raises(ValueError):
        EnvSpec(EnvId.CHAIN, 0)


def test_truncation_at_cap():
    env = make_env("chain", length=3, max_steps=5)
    env.reset(0)
    results = [env.step(0) for _ in range(5)]
    assert [r.truncated for r in results] == [False] * 4 + [True]
    assert not any(r.done for r in results)


def test_done_wins_over_truncation():
    env = make_env("chain", length=1, max_steps=1)
    env.reset(0)
    res = env.step(1)
    assert res.done and not res.truncated


def test_chain_right_policy_return_is_terminal_reward():
    env = make_env("chain", length=6)
    env.reset(0)
    rewards = []
    while True:
        res = env.step(1)
        rewards.append(res.reward)
        if res.done:
            break
    assert rewards == [0.0] * 5 + [1.0]


def test_unknown_env():
    with pytest.raises(ValueError):
        make_env("cartpole")


@given(env_id=st.sampled_from(ENV_IDS), actions=st.lists(st.integers(0, 6), max_size=300),
       seed=st.integers(0, 2**31 - 2))
def test_episode_invariants(env_id, actions, seed):
    env = make_env(env_id)
    replay = make_env(env_id)
    obs, obs2 = env.reset(seed), replay.reset(seed)
    assert np.array_equal(obs, obs2)
    length, total = 0, 0.0
    for a in actions:
        a %= env.n_actions
        res, res2 = env.step(a), replay.step(a)
        assert np.array_equal(res.next_obs, res2.next_obs) and res.reward == res2.reward
        assert res.next_obs.shape == (env.obs_dim,)
        assert 0.0 <= res.reward <= 1.0
        length += 1
        total += res.reward
        if env_id != "emptygrid":
            assert res.next_obs.sum() == 1.0
        if res.done or res.truncated:
            assert length <= env.spec.max_steps
            if env_id == "frozenlake":
                assert total in (0.0, 1.0)
            env.reset(seed)
            replay.reset(seed)
            length, total = 0, 0.0


@given(state=st.integers(0, 15), action=st.integers(0, 3))
def test_model_matches_step(state, action):
    env = make_env("frozenlake")
    env.reset(0)
    env._state = state
    if state in env.terminal_states():
        return
    s2, r, done = env.model(state, action)
    res = env.step(action)
    assert env.state_of(res.next_obs) == s2 and res.reward == r and res.done == done


@given(st.integers(0, 15))
def test_encode_roundtrip(s):
    env = make_env("frozenlake")
    assert env.state_of(env.encode(s)) == s
