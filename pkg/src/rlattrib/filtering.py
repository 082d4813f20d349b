"""Experience filters applied between rollout collection and the PPO update.

All filters return a new buffer holding the surviving records in their
original order; surviving records are never modified.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from rlattrib.nn import PolicyValueParams, value_forward
from rlattrib.ppo import RolloutBuffer


class OracleUnavailable(ValueError):
    pass


class Strategy(str, Enum):
    STANDARD = "standard"
    IIF = "iif"
    RANDOM = "random"
    ADV1 = "adv1"
    ADV2 = "adv2"
    TD = "td"
    REWARD = "reward"


@dataclass(frozen=True)
class FilterConfig:
    strategy: Strategy = Strategy.IIF
    p: float = 0.5
    alpha: float = 0.6
    random_fraction: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"p must lie in (0, 1], got {self.p}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.random_fraction is not None and not 0.0 <= self.random_fraction <= 1.0:
            raise ValueError("random_fraction must lie in [0, 1]")


def _bottom_k(values: np.ndarray, record_ids: np.ndarray, k: int) -> np.ndarray:
    """Positions of the ``k`` smallest values, ties broken by smaller record id."""
    order = np.lexsort((record_ids, values))
    return order[:k]


def bottom_record_ids(scores: np.ndarray, record_ids: np.ndarray, p: float) -> np.ndarray:
    """Record ids of the ceil(p * #negative) most negative scores."""
    scores = np.asarray(scores, dtype=np.float64)
    record_ids = np.asarray(record_ids)
    neg = np.flatnonzero(scores < 0)
    k = math.ceil(p * neg.size)
    if k == 0:
        return np.array([], dtype=np.int64)
    pick = _bottom_k(scores[neg], record_ids[neg], k)
    return record_ids[neg][pick]


def discard_bottom_records(buffer: RolloutBuffer, report, p: float) -> RolloutBuffer:
    """Drop the most negative ceil(p * m) records, m being the number of negative scores."""
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    by_id = report.by_record()
    scores = np.array([by_id[int(r)] for r in buffer.record_ids])
    return buffer.without(bottom_record_ids(scores, buffer.record_ids, p))


def random_filter(buffer: RolloutBuffer, count: int, rng: np.random.Generator) -> RolloutBuffer:
    n = len(buffer)
    if not 0 <= count <= n:
        raise ValueError(f"count must lie in [0, {n}]")
    drop = rng.choice(n, size=count, replace=False)
    return buffer.subset(np.setdiff1d(np.arange(n), drop))


def advantage_heuristic_filter(buffer: RolloutBuffer, a_bar: np.ndarray, variant: int, p: float) -> RolloutBuffer:
    """Among records whose oracle and estimated advantages disagree in sign, drop a fraction p.

    Variant 1 drops the largest ``|A_bar - A_hat|`` first, variant 2 the most
    negative ``A_bar * A_hat``. ``a_bar`` is per record (NaN = undefined, kept).
    """
    if a_bar is None:
        raise OracleUnavailable("advantage heuristics need an oracle advantage per record")
    a_bar = np.asarray(a_bar, dtype=np.float64)
    a_hat = buffer.advantages
    mismatch = np.flatnonzero(np.isfinite(a_bar) & (a_bar * a_hat < 0))
    k = math.ceil(p * mismatch.size)
    if k == 0:
        return buffer
    if variant == 1:
        key = -np.abs(a_bar[mismatch] - a_hat[mismatch])
    elif variant == 2:
        key = a_bar[mismatch] * a_hat[mismatch]
    else:
        raise ValueError("variant must be 1 or 2")
    pick = _bottom_k(key, buffer.record_ids[mismatch], k)
    return buffer.without(buffer.record_ids[mismatch][pick])


def td_errors(buffer: RolloutBuffer, params: PolicyValueParams, gamma: float) -> np.ndarray:
    v = value_forward(params, buffer.obs)
    v_next = np.where(buffer.dones, 0.0, value_forward(params, buffer.next_obs))
    return buffer.rewards + gamma * v_next - v


def rank_weights(priorities: np.ndarray, alpha: float = 0.6) -> np.ndarray:
    """Rank-based sampling weights: rank 1 = largest |priority|, P = 1/rank, w = P^alpha / sum."""
    n = priorities.shape[0]
    order = np.lexsort((np.arange(n), -np.abs(priorities)))
    ranks = np.empty(n)
    ranks[order] = np.arange(1, n + 1)
    p = (1.0 / ranks) ** alpha
    return p / p.sum()


def td_rank_weights(buffer: RolloutBuffer, params: PolicyValueParams, gamma: float, alpha: float = 0.6) -> np.ndarray:
    return rank_weights(td_errors(buffer, params, gamma), alpha)


def reward_extremes_filter(buffer: RolloutBuffer, p: float) -> RolloutBuffer:
    """Drop ceil(p*n/2) highest-reward records, then ceil(p*n/2) lowest among the rest."""
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    n = len(buffer)
    if n == 0:
        return buffer
    k = math.ceil(p * n / 2)
    top = _bottom_k(-buffer.rewards, buffer.record_ids, k)
    rest = np.setdiff1d(np.arange(n), top)
    low = rest[_bottom_k(buffer.rewards[rest], buffer.record_ids[rest], k)]
    return buffer.without(buffer.record_ids[np.concatenate([top, low])])
