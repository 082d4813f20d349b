"""One training run: collect -> (filter) -> update -> evaluate, per round."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from rlattrib.attribution import InfluenceReport, ReturnTarget, influence_single_checkpoint
from rlattrib.diagnostics import mc_advantage, oracle_advantages
from rlattrib.envs import make_env
from rlattrib.filtering import (
    FilterConfig,
    Strategy,
    advantage_heuristic_filter,
    discard_bottom_records,
    random_filter,
    reward_extremes_filter,
    td_rank_weights,
)
from rlattrib.metrics import RoundRow, RunLog
from rlattrib.nn import PolicyValueParams, init_policy_value
from rlattrib.ppo import PpoConfig, RolloutBuffer, collect_rollout, evaluate, normalized_advantages, ppo_update
from rlattrib.seeding import stream

log = logging.getLogger(__name__)


@dataclass
class RoundOutcome:
    """What a round produced; handed to ``on_round`` callbacks."""

    k: int
    params_before: PolicyValueParams
    params_after: PolicyValueParams
    buffer: RolloutBuffer
    kept: RolloutBuffer
    report: InfluenceReport | None
    row: RoundRow


def initial_params(env, ppo: PpoConfig, seed: int) -> PolicyValueParams:
    return init_policy_value(env.obs_dim, env.n_actions, stream(seed, "init"), tuple(ppo.hidden))


def iif_scores(params, buffer, ppo: PpoConfig, influence_advantage: str = "normalized") -> InfluenceReport:
    adv = None
    if influence_advantage == "normalized" and len(buffer) > 1:
        a = buffer.advantages
        adv = (a - a.mean()) / (a.std() + 1e-8)
    elif influence_advantage == "train":
        adv = normalized_advantages(buffer, buffer.advantages, ppo.normalize_advantage)
    return influence_single_checkpoint(params, buffer, ReturnTarget(buffer), ppo, advantages=adv)


def filter_round(strategy: Strategy, env, params, buffer: RolloutBuffer, ppo: PpoConfig, filt: FilterConfig,
                 seed: int, k: int, paired_count: int | None = None, influence_advantage: str = "normalized"):
    """Returns ``(kept_buffer, sampling_weights_or_None, report_or_None)``."""
    if strategy is Strategy.STANDARD:
        return buffer, None, None
    if strategy is Strategy.IIF:
        report = iif_scores(params, buffer, ppo, influence_advantage)
        return discard_bottom_records(buffer, report, filt.p), None, report
    if strategy is Strategy.RANDOM:
        if paired_count is None:
            frac = filt.random_fraction if filt.random_fraction is not None else filt.p / 2
            paired_count = int(round(frac * len(buffer)))
        return random_filter(buffer, paired_count, stream(seed, "random-filter", k)), None, None
    if strategy in (Strategy.ADV1, Strategy.ADV2):
        table = mc_advantage(buffer, env, ppo.gamma)
        a_bar = oracle_advantages(buffer, env, ppo.gamma, table=table)
        variant = 1 if strategy is Strategy.ADV1 else 2
        return advantage_heuristic_filter(buffer, a_bar, variant, filt.p), None, None
    if strategy is Strategy.TD:
        return buffer, td_rank_weights(buffer, params, ppo.gamma, filt.alpha), None
    if strategy is Strategy.REWARD:
        return reward_extremes_filter(buffer, filt.p), None, None
    raise ValueError(f"unknown strategy {strategy!r}")


@dataclass
class RunState:
    params: PolicyValueParams
    log: RunLog = field(default_factory=RunLog)


def train(env_id: str, ppo: PpoConfig, filt: FilterConfig, seed: int, eval_episodes: int = 1000,
          paired_counts: list | None = None, influence_advantage: str = "normalized",
          state: RunState | None = None, on_round: Callable[[RoundOutcome], None] | None = None,
          env_kwargs: dict | None = None) -> RunState:
    """Train for ``ppo.total_rounds`` rounds (continuing from ``state`` if given)."""
    env = make_env(env_id, **(env_kwargs or {}))
    strategy = filt.strategy
    if state is None:
        state = RunState(initial_params(env, ppo, seed), RunLog(label=strategy.value, seed=seed))
    theta = state.params
    for k in range(len(state.log), ppo.total_rounds):
        t0 = time.perf_counter()
        buffer = collect_rollout(env, theta, ppo, stream(seed, "collect", k), round=k)
        t1 = time.perf_counter()
        paired = paired_counts[k] if paired_counts is not None and k < len(paired_counts) else None
        kept, weights, report = filter_round(strategy, env, theta, buffer, ppo, filt, seed, k, paired,
                                             influence_advantage)
        t2 = time.perf_counter()
        new_theta, _ = ppo_update(theta, kept, ppo, stream(seed, "shuffle", k), weights=weights)
        t3 = time.perf_counter()
        ret = evaluate(new_theta, env, eval_episodes, stream(seed, "eval", k))
        row = RoundRow(k + 1, ret, len(buffer) - len(kept),
                       (t1 - t0) * 1e3, (t2 - t1) * 1e3, (t3 - t2) * 1e3)
        state.log.append(row)
        if on_round is not None:
            on_round(RoundOutcome(k, theta, new_theta, buffer, kept, report, row))
        log.debug("%s seed=%d round=%d return=%.3f filtered=%d", strategy.value, seed, k + 1, ret, row.n_filtered)
        theta = new_theta
        state.params = theta
    return state


def final_returns(logs: list[RunLog]) -> np.ndarray:
    return np.array([lg.returns[-1] for lg in logs])
