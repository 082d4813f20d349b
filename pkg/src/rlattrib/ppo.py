"""Rollout collection, GAE, and the clipped-surrogate PPO update."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields

import numpy as np

from rlattrib.autodiff import Tensor, minimum
from rlattrib.envs import DiscreteEnv, TabularEnv
from rlattrib.nn import (
    Net,
    NonFinite,
    PolicyValueParams,
    ShapeMismatch,
    policy_forward,
    sgd_step,
    value_forward,
)


class NoRecords(ValueError):
    pass


@dataclass(frozen=True)
class PpoConfig:
    n_steps: int = 2048
    batch_size: int = 64
    n_epochs: int = 10
    lr: float = 5e-3
    clip_range: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    vf_coef: float = 0.5
    ent_coef: float = 0.0
    max_grad_norm: float = 0.5
    total_rounds: int = 50
    seed: int = 0
    normalize_advantage: str = "minibatch"
    hidden: tuple = (64, 64)

    def __post_init__(self):
        if self.n_steps < 1 or self.batch_size < 1 or self.n_epochs < 1:
            raise ValueError("n_steps, batch_size and n_epochs must be positive")
        if not 0.0 < self.clip_range < 1.0:
            raise ValueError("clip_range must lie in (0, 1)")
        for name in ("gamma", "gae_lambda"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


@dataclass(frozen=True)
class RolloutRecord:
    obs: np.ndarray
    action: int
    reward: float
    log_prob_old: float
    value_old: float
    advantage: float
    return_target: float
    episode_id: int
    step_in_episode: int
    record_id: int
    done: bool
    next_obs: np.ndarray


_ARRAYS = ("obs", "actions", "rewards", "log_probs", "values", "advantages", "returns",
           "episode_ids", "steps", "record_ids", "dones", "boundaries", "next_obs", "next_values")


@dataclass(frozen=True)
class RolloutBuffer:
    """Struct-of-arrays rollout buffer; arrays are read-only once built.

    ``dones`` marks terminal transitions, ``boundaries`` marks every step that
    ends an episode segment (terminal, time limit, or end of collection).
    ``next_values`` holds the bootstrap value used by GAE at each step.
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    episode_ids: np.ndarray
    steps: np.ndarray
    record_ids: np.ndarray
    dones: np.ndarray
    boundaries: np.ndarray
    next_obs: np.ndarray
    next_values: np.ndarray
    round: int = 0
    params_ref: str = ""
    adv_stats: tuple = (0.0, 1.0)

    def __post_init__(self):
        n = self.obs.shape[0]
        for name in _ARRAYS:
            arr = getattr(self, name)
            if arr.shape[0] != n:
                raise ShapeMismatch(f"{name} has {arr.shape[0]} rows, expected {n}")
            arr.flags.writeable = False
        if len(np.unique(self.record_ids)) != n:
            raise ValueError("record ids must be unique")

    def __len__(self):
        return self.obs.shape[0]

    def record(self, i: int) -> RolloutRecord:
        return RolloutRecord(
            obs=self.obs[i], action=int(self.actions[i]), reward=float(self.rewards[i]),
            log_prob_old=float(self.log_probs[i]), value_old=float(self.values[i]),
            advantage=float(self.advantages[i]), return_target=float(self.returns[i]),
            episode_id=int(self.episode_ids[i]), step_in_episode=int(self.steps[i]),
            record_id=int(self.record_ids[i]), done=bool(self.dones[i]), next_obs=self.next_obs[i],
        )

    @property
    def records(self) -> list[RolloutRecord]:
        return [self.record(i) for i in range(len(self))]

    def subset(self, indices) -> "RolloutBuffer":
        """Rows at ``indices`` (positions, not record ids), in the given order."""
        idx = np.asarray(indices, dtype=np.intp)
        kw = {name: getattr(self, name)[idx].copy() for name in _ARRAYS}
        return RolloutBuffer(**kw, round=self.round, params_ref=self.params_ref, adv_stats=self.adv_stats)

    def without(self, record_ids) -> "RolloutBuffer":
        drop = np.isin(self.record_ids, np.asarray(list(record_ids), dtype=np.int64))
        return self.subset(np.flatnonzero(~drop))

    def positions(self, record_ids) -> np.ndarray:
        lookup = {int(r): i for i, r in enumerate(self.record_ids)}
        return np.array([lookup[int(r)] for r in record_ids], dtype=np.intp)

    @classmethod
    def from_records(cls, records: list[RolloutRecord], round: int = 0, next_values=None) -> "RolloutBuffer":
        """Assemble a buffer from record objects (mainly for tests and analysis)."""
        n = len(records)
        dones = np.array([r.done for r in records], dtype=bool)
        epi = np.array([r.episode_id for r in records], dtype=np.int64)
        boundaries = dones | np.append(epi[1:] != epi[:-1], True)
        nv = np.zeros(n) if next_values is None else np.asarray(next_values, dtype=np.float64)
        return cls(
            obs=np.array([r.obs for r in records], dtype=np.float64).reshape(n, -1),
            actions=np.array([r.action for r in records], dtype=np.int64),
            rewards=np.array([r.reward for r in records], dtype=np.float64),
            log_probs=np.array([r.log_prob_old for r in records], dtype=np.float64),
            values=np.array([r.value_old for r in records], dtype=np.float64),
            advantages=np.array([r.advantage for r in records], dtype=np.float64),
            returns=np.array([r.return_target for r in records], dtype=np.float64),
            episode_ids=epi,
            steps=np.array([r.step_in_episode for r in records], dtype=np.int64),
            record_ids=np.array([r.record_id for r in records], dtype=np.int64),
            dones=dones, boundaries=boundaries,
            next_obs=np.array([r.next_obs for r in records], dtype=np.float64).reshape(n, -1),
            next_values=nv, round=round,
        )


def compute_gae(rewards, values, dones, bootstrap_value: float, gamma: float, gae_lambda: float,
                next_values=None):
    """Generalized advantage estimates and value targets.

    ``dones[t]`` cuts the recursion after step ``t``. Without ``next_values``
    the successor value is ``values[t+1]`` (``bootstrap_value`` after the last
    step) and zero where ``dones[t]``; passing ``next_values`` overrides the
    successor value wholesale, which is how time-limit truncations bootstrap.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    n = rewards.shape[0]
    if values.shape != (n,) or dones.shape != (n,):
        raise ShapeMismatch("rewards, values and dones must be aligned 1-D arrays")
    if next_values is None:
        nv = np.append(values[1:], bootstrap_value)
        nv = np.where(dones, 0.0, nv)
    else:
        nv = np.asarray(next_values, dtype=np.float64)
        if nv.shape != (n,):
            raise ShapeMismatch("next_values must align with rewards")
    delta = rewards + gamma * nv - values
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        running = delta[t] + gamma * gae_lambda * (0.0 if dones[t] else 1.0) * running
        adv[t] = running
    return adv, adv + values


class _ActCache:
    """Single-observation forward results, memoised by observation bytes.

    Keeps each record's stored log-probability bit-identical to
    ``policy_forward(params, obs)`` on that observation.
    """

    def __init__(self, params: PolicyValueParams):
        self.params = params
        self._cache = {}

    def __call__(self, obs: np.ndarray):
        key = obs.tobytes()
        hit = self._cache.get(key)
        if hit is None:
            _, logp, _ = policy_forward(self.params, obs)
            hit = (logp, np.cumsum(np.exp(logp)), value_forward(self.params, obs))
            self._cache[key] = hit
        return hit


def _sample(cdf: np.ndarray, u: float) -> int:
    return min(int(np.searchsorted(cdf, u * cdf[-1], side="right")), cdf.shape[0] - 1)


def collect_rollout(env: DiscreteEnv, params: PolicyValueParams, config: PpoConfig,
                    rng: np.random.Generator, round: int = 0, n_steps: int | None = None) -> RolloutBuffer:
    """Run the current policy for ``n_steps`` transitions, resetting at episode ends."""
    n = config.n_steps if n_steps is None else n_steps
    act = _ActCache(params)
    d = env.obs_dim
    obs_buf, next_buf = np.zeros((n, d)), np.zeros((n, d))
    actions = np.zeros(n, dtype=np.int64)
    rewards, logps, values, next_values = (np.zeros(n) for _ in range(4))
    epi, steps = np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64)
    dones, bounds = np.zeros(n, dtype=bool), np.zeros(n, dtype=bool)

    obs = env.reset(seed=int(rng.integers(2**31 - 1)))
    episode, t_in_ep = 0, 0
    for t in range(n):
        logp, cdf, v = act(obs)
        a = _sample(cdf, rng.random())
        res = env.step(a)
        obs_buf[t], next_buf[t] = obs, res.next_obs
        actions[t], rewards[t], logps[t], values[t] = a, res.reward, logp[a], v
        epi[t], steps[t], dones[t] = episode, t_in_ep, res.done
        if res.done:
            bounds[t] = True
        elif res.truncated or t == n - 1:
            bounds[t] = True
            next_values[t] = act(res.next_obs)[2]
        if res.done or res.truncated:
            obs = env.reset(seed=int(rng.integers(2**31 - 1)))
            episode, t_in_ep = episode + 1, 0
        else:
            obs = res.next_obs
            t_in_ep += 1
    next_values[:-1] = np.where(bounds[:-1], next_values[:-1], values[1:])
    adv, ret = compute_gae(rewards, values, bounds, 0.0, config.gamma, config.gae_lambda,
                           next_values=next_values)
    return RolloutBuffer(
        obs=obs_buf, actions=actions, rewards=rewards, log_probs=logps, values=values,
        advantages=adv, returns=ret, episode_ids=epi, steps=steps,
        record_ids=np.arange(n, dtype=np.int64), dones=dones, boundaries=bounds,
        next_obs=next_buf, next_values=next_values, round=round,
        params_ref=f"round{params.round}", adv_stats=(float(adv.mean()), float(adv.std())),
    )


# objective ---------------------------------------------------------------------

def ppo_objectives(net: Net, obs, actions, old_log_probs, advantages, returns,
                   clip_range: float, vf_coef: float, ent_coef: float = 0.0) -> Tensor:
    """Per-record objective to ascend: clipped surrogate - vf_coef*value error^2 + ent_coef*entropy."""
    log_probs = net.log_probs(obs)
    logp = log_probs.pick(actions)
    ratio = (logp - np.asarray(old_log_probs)).exp()
    adv = np.asarray(advantages, dtype=np.float64)
    surrogate = minimum(ratio * adv, ratio.clip(1.0 - clip_range, 1.0 + clip_range) * adv)
    obj = surrogate
    if vf_coef:
        obj = obj - vf_coef * (net.values(obs) - np.asarray(returns)).square()
    if ent_coef:
        entropy = -(log_probs.exp() * log_probs).sum(axis=1)
        obj = obj + ent_coef * entropy
    return obj


def buffer_objectives(net: Net, buffer: RolloutBuffer, idx, config: PpoConfig, advantages=None) -> Tensor:
    adv = buffer.advantages[idx] if advantages is None else advantages
    return ppo_objectives(net, buffer.obs[idx], buffer.actions[idx], buffer.log_probs[idx], adv,
                          buffer.returns[idx], config.clip_range, config.vf_coef, config.ent_coef)


def ppo_record_objective(params: PolicyValueParams, record: RolloutRecord, clip_range: float,
                         vf_coef: float, ent_coef: float = 0.0) -> float:
    obj = ppo_objectives(Net(params), record.obs[None, :], [record.action], [record.log_prob_old],
                         [record.advantage], [record.return_target], clip_range, vf_coef, ent_coef)
    value = float(obj.data[0])
    if not np.isfinite(value):
        raise NonFinite("record objective is not finite")
    return value


# update ------------------------------------------------------------------------

@dataclass
class StepTrace:
    """Minibatch membership (record ids) per optimisation step, plus optional snapshots."""

    members: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    advantages: list = field(default_factory=list)

    def __len__(self):
        return len(self.members)

    @property
    def has_checkpoints(self) -> bool:
        return bool(self.checkpoints) and all(c is not None for c in self.checkpoints)


def normalized_advantages(buffer: RolloutBuffer, adv: np.ndarray, mode: str) -> np.ndarray:
    """``minibatch``: standardise within the slice; ``buffer``: use the collection-time statistics."""
    if mode == "minibatch":
        return (adv - adv.mean()) / (adv.std() + 1e-8) if adv.shape[0] > 1 else adv
    if mode == "buffer":
        mean, std = buffer.adv_stats
        return (adv - mean) / (std + 1e-8)
    if mode in ("none", "", None):
        return adv
    raise ValueError(f"unknown advantage normalisation {mode!r}")


def minibatch_indices(n: int, config: PpoConfig, rng: np.random.Generator, weights=None):
    """Positions per minibatch for every epoch; the last minibatch of an epoch may be short."""
    for _ in range(config.n_epochs):
        if weights is None:
            order = rng.permutation(n)
        else:
            order = rng.choice(n, size=n, replace=True, p=weights)
        for start in range(0, n, config.batch_size):
            yield order[start:start + config.batch_size]


def ppo_update(params: PolicyValueParams, buffer: RolloutBuffer, config: PpoConfig,
               rng: np.random.Generator, weights=None, keep_checkpoints: bool = False):
    """Multi-epoch minibatch SGD on the buffer. Returns ``(new_params, StepTrace)``."""
    n = len(buffer)
    if n == 0:
        raise NoRecords("cannot update on an empty buffer")
    trace = StepTrace()
    theta = params
    for idx in minibatch_indices(n, config, rng, weights):
        adv = buffer.advantages[idx]
        adv = normalized_advantages(buffer, adv, config.normalize_advantage)
        net = Net(theta)
        loss = -buffer_objectives(net, buffer, idx, config, advantages=adv).mean()
        loss.backward()
        grad = net.grad_vector()
        if not np.all(np.isfinite(grad.values)):
            raise NonFinite(f"non-finite gradient at step {len(trace)} of round {buffer.round} "
                            f"(loss={float(loss.data)!r}, records={buffer.record_ids[idx].tolist()})")
        trace.members.append(buffer.record_ids[idx].copy())
        trace.checkpoints.append(theta if keep_checkpoints else None)
        trace.lrs.append(config.lr)
        trace.advantages.append(np.array(adv))
        theta = sgd_step(theta, grad, config.lr, config.max_grad_norm)
    return PolicyValueParams(theta.policy, theta.value, round=params.round + 1, step=0), trace


# evaluation ----------------------------------------------------------------------

def _evaluate_tabular(params, env: TabularEnv, episodes, rng):
    states = env.enumerate_states()
    _, logp, _ = policy_forward(params, np.stack([env.encode(s) for s in states]))
    cdf = np.cumsum(np.exp(logp), axis=1)
    s_count, a_count = len(states), env.n_actions
    nxt = np.zeros((s_count, a_count), dtype=np.intp)
    rew = np.zeros((s_count, a_count))
    end = np.zeros((s_count, a_count), dtype=bool)
    for s in states:
        for a in range(a_count):
            nxt[s, a], rew[s, a], end[s, a] = env.model(s, a)
    state = np.full(episodes, env.start_state, dtype=np.intp)
    alive = np.ones(episodes, dtype=bool)
    total = np.zeros(episodes)
    for _ in range(env.spec.max_steps):
        u = rng.random(episodes)
        c = cdf[state]
        a = np.minimum((c <= (u * c[:, -1])[:, None]).sum(axis=1), a_count - 1)
        total += np.where(alive, rew[state, a], 0.0)
        alive &= ~end[state, a]
        state = nxt[state, a]
        if not alive.any():
            break
    return total


def _evaluate_generic(params, env: DiscreteEnv, episodes, rng):
    envs = [copy.deepcopy(env) for _ in range(episodes)]
    obs = np.stack([e.reset(seed=int(rng.integers(2**31 - 1))) for e in envs])
    alive = np.ones(episodes, dtype=bool)
    total = np.zeros(episodes)
    while alive.any():
        live = np.flatnonzero(alive)
        _, logp, _ = policy_forward(params, obs[live])
        cdf = np.cumsum(np.exp(logp), axis=1)
        u = rng.random(live.shape[0])
        acts = np.minimum((cdf <= (u * cdf[:, -1])[:, None]).sum(axis=1), env.n_actions - 1)
        for k, i in enumerate(live):
            res = envs[i].step(int(acts[k]))
            total[i] += res.reward
            obs[i] = res.next_obs
            if res.done or res.truncated:
                alive[i] = False
    return total


def episode_returns(params: PolicyValueParams, env: DiscreteEnv, episodes: int,
                    rng: np.random.Generator) -> np.ndarray:
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    if isinstance(env, TabularEnv):
        return _evaluate_tabular(params, env, episodes, rng)
    return _evaluate_generic(params, env, episodes, rng)


def evaluate(params: PolicyValueParams, env: DiscreteEnv, episodes: int, rng: np.random.Generator) -> float:
    """Mean undiscounted return of the stochastic policy over ``episodes`` episodes."""
    return float(np.mean(episode_returns(params, env, episodes, rng)))


def config_fields() -> list[str]:
    return [f.name for f in fields(PpoConfig)]
