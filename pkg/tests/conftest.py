import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rlattrib.envs import make_env
from rlattrib.nn import init_policy_value
from rlattrib.ppo import PpoConfig, collect_rollout

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# acceptance tests append (number, passed, detail); printed once at the end of the session
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    return PpoConfig(n_steps=64, batch_size=16, n_epochs=2, normalize_advantage="none", hidden=(8, 8))


@pytest.fixture
def chain_env():
    return make_env("chain", length=4)


@pytest.fixture
def lake():
    return make_env("frozenlake")


def random_buffer(env, cfg, seed=0, n_steps=None, hidden=None, scale=1.0):
    """A buffer collected by a random-initialised network (weights scaled for non-uniform policies)."""
    r = np.random.default_rng(seed)
    params = init_policy_value(env.obs_dim, env.n_actions, r, hidden or cfg.hidden)
    if scale != 1.0:
        params = params.with_flat(params.flat() * scale)
    return params, collect_rollout(env, params, cfg, r, n_steps=n_steps)


def make_buffer(n=None, *, rewards=None, advantages=None, obs_dim=2, round=0):
    """Hand-built buffer of independent one-step episodes; record ids 0..n-1."""
    from rlattrib.ppo import RolloutBuffer, RolloutRecord

    n = n if n is not None else len(rewards if rewards is not None else advantages)
    rewards = np.zeros(n) if rewards is None else np.asarray(rewards, dtype=float)
    advantages = np.zeros(n) if advantages is None else np.asarray(advantages, dtype=float)
    records = [RolloutRecord(obs=np.full(obs_dim, float(i)), action=i % 2, reward=float(rewards[i]),
                             log_prob_old=-0.7, value_old=0.0, advantage=float(advantages[i]),
                             return_target=float(rewards[i]), episode_id=i, step_in_episode=0,
                             record_id=i, done=True, next_obs=np.zeros(obs_dim))
               for i in range(n)]
    return RolloutBuffer.from_records(records, round=round)
