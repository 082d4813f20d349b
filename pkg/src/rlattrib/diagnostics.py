"""Analysis tools: advantage oracles, mismatch tables, rank correlation,
similarity-graph roughness and single-round interventions."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from rlattrib.attribution import ReturnTarget, influence_full_tracin, influence_single_checkpoint
from rlattrib.envs import DiscreteEnv, TabularEnv
from rlattrib.filtering import OracleUnavailable, bottom_record_ids, random_filter
from rlattrib.nn import PolicyValueParams, policy_forward
from rlattrib.ppo import PpoConfig, RolloutBuffer, collect_rollout, evaluate, ppo_update
from rlattrib.seeding import stream

log = logging.getLogger(__name__)


class DegenerateInput(ValueError):
    pass


class NoEdges(ValueError):
    pass


class TooFewPositive(ValueError):
    pass


def _require_tabular(env) -> TabularEnv:
    if not isinstance(env, TabularEnv):
        raise OracleUnavailable(f"{type(env).__name__} has no tabular oracle")
    return env


# advantage oracles -------------------------------------------------------------

@dataclass
class McAdvantageTable:
    q_bar: dict
    v_bar: dict
    a_bar: dict
    visit_counts: dict

    def lookup(self, state: int, action: int) -> float:
        return self.a_bar.get((state, action), math.nan)


def discounted_returns_to_go(buffer: RolloutBuffer, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-record discounted return-to-go, and whether its episode terminated inside the buffer."""
    n = len(buffer)
    g = np.zeros(n)
    complete = np.zeros(n, dtype=bool)
    running, ok = 0.0, False
    for t in range(n - 1, -1, -1):
        if buffer.boundaries[t]:
            running, ok = 0.0, bool(buffer.dones[t])
        running = buffer.rewards[t] + gamma * running
        g[t], complete[t] = running, ok
    return g, complete


def mc_advantage(buffer: RolloutBuffer, env, gamma: float, min_visits: int = 3) -> McAdvantageTable:
    """Every-visit Monte Carlo Q/V/A from the buffer's own completed episodes."""
    env = _require_tabular(env)
    g, complete = discounted_returns_to_go(buffer, gamma)
    q_sum, q_n, v_sum, v_n = {}, {}, {}, {}
    for i in np.flatnonzero(complete):
        s, a = env.state_of(buffer.obs[i]), int(buffer.actions[i])
        q_sum[(s, a)] = q_sum.get((s, a), 0.0) + g[i]
        q_n[(s, a)] = q_n.get((s, a), 0) + 1
        v_sum[s] = v_sum.get(s, 0.0) + g[i]
        v_n[s] = v_n.get(s, 0) + 1
    q_bar = {k: q_sum[k] / q_n[k] for k in q_sum if q_n[k] >= min_visits}
    v_bar = {s: v_sum[s] / v_n[s] for s in v_sum if v_n[s] >= min_visits}
    a_bar = {(s, a): q - v_bar[s] for (s, a), q in q_bar.items() if s in v_bar}
    counts = dict(q_n)
    counts.update({s: c for s, c in v_n.items()})
    return McAdvantageTable(q_bar, v_bar, a_bar, counts)


def policy_table(params: PolicyValueParams, env: TabularEnv) -> np.ndarray:
    states = env.enumerate_states()
    _, logp, _ = policy_forward(params, np.stack([env.encode(s) for s in states]))
    return np.exp(logp)


def exact_policy_evaluation(env, probs: np.ndarray, gamma: float):
    """Exact ``(V, Q, A)`` of a stationary policy by solving the Bellman linear system.

    Terminal states have value zero. ``probs[s, a]`` is the policy.
    """
    env = _require_tabular(env)
    n_s, n_a = env.n_states, env.n_actions
    nxt = np.zeros((n_s, n_a), dtype=np.intp)
    rew = np.zeros((n_s, n_a))
    cont = np.zeros((n_s, n_a))
    terminal = env.terminal_states()
    for s in range(n_s):
        for a in range(n_a):
            s2, r, done = env.model(s, a)
            nxt[s, a], rew[s, a], cont[s, a] = s2, r, 0.0 if done else 1.0
    p_pi = np.zeros((n_s, n_s))
    for s in range(n_s):
        if s in terminal:
            continue
        for a in range(n_a):
            p_pi[s, nxt[s, a]] += probs[s, a] * cont[s, a]
    r_pi = np.array([0.0 if s in terminal else probs[s] @ rew[s] for s in range(n_s)])
    v = np.linalg.solve(np.eye(n_s) - gamma * p_pi, r_pi)
    q = rew + gamma * cont * v[nxt]
    q[list(terminal)] = 0.0
    return v, q, q - v[:, None]


def oracle_advantages(buffer: RolloutBuffer, env, gamma: float, params: PolicyValueParams | None = None,
                      table: McAdvantageTable | None = None) -> np.ndarray:
    """Per-record oracle advantage: exact DP under ``params`` or MC ``table`` lookups (NaN if undefined)."""
    env = _require_tabular(env)
    states = np.array([env.state_of(o) for o in buffer.obs])
    if table is not None:
        return np.array([table.lookup(s, int(a)) for s, a in zip(states, buffer.actions)])
    if params is None:
        raise ValueError("need params (exact oracle) or an MC table")
    _, _, adv = exact_policy_evaluation(env, policy_table(params, env), gamma)
    return adv[states, buffer.actions]


# mismatch analysis ---------------------------------------------------------------

MISMATCH_COLUMNS = ("rank", "record_id", "influence", "a_hat", "a_bar", "abs_error", "sign_agree", "product")


def mismatch_analysis(buffer: RolloutBuffer, report, a_bar: np.ndarray) -> list[dict]:
    """Rows sorted by decreasing influence; records without an oracle value are listed with NaNs."""
    by_id = report.by_record()
    scores = np.array([by_id[int(r)] for r in buffer.record_ids])
    order = np.lexsort((buffer.record_ids, -scores))
    rows, undefined = [], 0
    for rank, i in enumerate(order, start=1):
        ab, ah = float(a_bar[i]), float(buffer.advantages[i])
        defined = math.isfinite(ab)
        undefined += not defined
        rows.append({
            "rank": rank, "record_id": int(buffer.record_ids[i]), "influence": float(scores[i]),
            "a_hat": ah, "a_bar": ab,
            "abs_error": abs(ab - ah) if defined else math.nan,
            "sign_agree": (np.sign(ab) == np.sign(ah)) if defined else None,
            "product": ab * ah if defined else math.nan,
        })
    if undefined:
        log.info("mismatch analysis: %d of %d records have no oracle advantage", undefined, len(rows))
    return rows


def region_mismatch_fraction(rows: list[dict], frac: float = 0.2) -> tuple[float, float]:
    """Sign-mismatch fraction among the top and bottom ``frac`` of rows (defined entries only)."""
    k = max(1, int(round(frac * len(rows))))

    def mismatch(part):
        vals = [r["sign_agree"] for r in part if r["sign_agree"] is not None]
        return float(np.mean([not v for v in vals])) if vals else math.nan

    return mismatch(rows[:k]), mismatch(rows[-k:])


def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size == 0:
        raise ValueError("spearman needs two equal-length non-empty vectors")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise DegenerateInput("spearman is undefined for a constant input")
    rx, ry = rankdata(x) - (x.size + 1) / 2, rankdata(y) - (y.size + 1) / 2
    return float(np.clip((rx @ ry) / math.sqrt((rx @ rx) * (ry @ ry)), -1.0, 1.0))


# similarity graph ---------------------------------------------------------------------

@dataclass
class SimilarityGraph:
    node_values: np.ndarray
    embeddings: np.ndarray
    edges: np.ndarray      # (E, 2) int, i < j
    weights: np.ndarray    # (E,)
    sigma: float
    u: int
    record_ids: np.ndarray


def pairwise_sq_dists(emb: np.ndarray) -> np.ndarray:
    sq = (emb**2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * emb @ emb.T
    np.fill_diagonal(d2, 0.0)
    return np.maximum(d2, 0.0)


def knn_graph(values: np.ndarray, embeddings: np.ndarray, u: int, record_ids=None) -> SimilarityGraph:
    """Gaussian-kernel graph keeping each node's ``u`` nearest neighbours (union-symmetrised)."""
    n = values.shape[0]
    d2 = pairwise_sq_dists(embeddings)
    iu = np.triu_indices(n, k=1)
    med = float(np.median(np.sqrt(d2[iu]))) if n > 1 else 0.0
    sigma = med if med > 0 else 1.0
    keep = np.zeros((n, n), dtype=bool)
    for i in range(n):
        others = np.delete(np.arange(n), i)
        order = others[np.lexsort((others, d2[i, others]))]
        keep[i, order[:u]] = True
    keep = keep | keep.T
    ii, jj = np.nonzero(np.triu(keep, k=1))
    w = np.exp(-d2[ii, jj] / sigma**2)
    rid = np.arange(n) if record_ids is None else np.asarray(record_ids)
    return SimilarityGraph(values, embeddings, np.stack([ii, jj], axis=1), w, sigma, u, rid)


def build_similarity_graph(buffer: RolloutBuffer, report, final_params: PolicyValueParams, u: int) -> SimilarityGraph:
    by_id = report.by_record()
    scores = np.array([by_id[int(r)] for r in buffer.record_ids])
    pos = np.flatnonzero(scores > 0)
    if pos.size < 2:
        raise TooFewPositive(f"need at least two positive-influence records, have {pos.size}")
    vals = scores[pos] / np.abs(scores[pos]).max()
    _, _, hidden = policy_forward(final_params, buffer.obs[pos])
    return knn_graph(vals, hidden, u, buffer.record_ids[pos])


def roughness(graph: SimilarityGraph) -> float:
    """Weighted mean squared difference of node values across edges."""
    if graph.edges.shape[0] == 0:
        raise NoEdges("roughness needs at least one edge")
    diff = graph.node_values[graph.edges[:, 0]] - graph.node_values[graph.edges[:, 1]]
    return float((graph.weights * diff**2).sum() / graph.weights.sum())


# single-round intervention ----------------------------------------------------------

@dataclass
class InterventionResult:
    round: int
    return_original: float
    return_filtered: float
    n_removed: int

    @property
    def delta(self) -> float:
        return self.return_filtered - self.return_original


def single_round_intervention(env: DiscreteEnv, params: PolicyValueParams, config: PpoConfig, seed: int,
                              round: int, eval_episodes: int = 1000, p: float = 1.0, variant: str = "influence",
                              mode: str = "full") -> InterventionResult:
    """Train twice from the same parameters on one buffer, with and without its bottom records.

    Both branches share the collected buffer, the shuffle stream and the
    evaluation stream; ``variant="random"`` drops the same number of records
    uniformly at random instead.
    """
    buffer = collect_rollout(env, params, config, stream(seed, "collect", round), round=round)
    target = ReturnTarget(buffer)
    keep = mode == "full"
    theta_a, trace = ppo_update(params, buffer, config, stream(seed, "shuffle", round), keep_checkpoints=keep)
    if keep:
        report = influence_full_tracin(trace, buffer, target, config)
    else:
        report = influence_single_checkpoint(params, buffer, target, config)
    drop = bottom_record_ids(report.scores, report.record_ids, p)
    if variant == "influence":
        filtered = buffer.without(drop)
    elif variant == "random":
        filtered = random_filter(buffer, drop.size, stream(seed, "intervene-random", round))
    else:
        raise ValueError(f"unknown variant {variant!r}")
    if drop.size:
        theta_b, _ = ppo_update(params, filtered, config, stream(seed, "shuffle", round))
    else:
        theta_b = theta_a
    ret_a = evaluate(theta_a, env, eval_episodes, stream(seed, "intervene-eval", round))
    ret_b = evaluate(theta_b, env, eval_episodes, stream(seed, "intervene-eval", round))
    return InterventionResult(round, ret_a, ret_b, int(drop.size))
