"""Record-level influence scores for one PPO round.

A score is the inner product between the gradient of a target function and
a record's training gradient (the ascent direction of its PPO objective).
Positive means an SGD step on that record alone pushes the target up.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from rlattrib.nn import GradVector, Net, NonFinite, PolicyValueParams, dot, per_sample_grad
from rlattrib.ppo import PpoConfig, RolloutBuffer, StepTrace, buffer_objectives


class EmptyValidation(ValueError):
    pass


class MissingCheckpoints(ValueError):
    pass


class Mode(str, Enum):
    FULL = "full"
    SINGLE = "fast"


@dataclass(frozen=True)
class ActionTarget:
    """``log pi(action | obs)``."""

    obs: np.ndarray
    action: int
    kind: str = field(default="action", init=False)

    def __call__(self, net: Net):
        return net.log_probs(np.asarray(self.obs)[None, :]).pick([self.action]).sum()


@dataclass(frozen=True)
class ReturnTarget:
    """Mean of ``A_ref * log pi(a | s)`` over a validation buffer collected by the reference policy."""

    validation: RolloutBuffer
    kind: str = field(default="return", init=False)

    def __call__(self, net: Net):
        v = self.validation
        if len(v) == 0:
            raise EmptyValidation("return target needs a non-empty validation buffer")
        return (net.log_probs(v.obs).pick(v.actions) * v.advantages).mean()


@dataclass(frozen=True)
class CombinedTarget:
    """Weighted sum of other targets."""

    parts: tuple
    kind: str = field(default="combined", init=False)

    def __call__(self, net: Net):
        total = None
        for weight, target in self.parts:
            term = target(net) * float(weight)
            total = term if total is None else total + term
        return total


@dataclass
class InfluenceReport:
    round: int  # 1-based, as in the run log
    mode: Mode
    target: str
    scores: np.ndarray
    record_ids: np.ndarray
    target_grad_norm: float

    def __post_init__(self):
        if self.scores.shape != self.record_ids.shape:
            raise ValueError("scores and record ids must align")
        if not np.all(np.isfinite(self.scores)):
            raise NonFinite("influence scores contain non-finite values")

    def __len__(self):
        return self.scores.shape[0]

    def by_record(self) -> dict:
        return {int(r): float(s) for r, s in zip(self.record_ids, self.scores)}

    def ordered(self) -> "InfluenceReport":
        order = np.argsort(self.record_ids, kind="stable")
        return InfluenceReport(self.round, self.mode, self.target, self.scores[order],
                               self.record_ids[order], self.target_grad_norm)

    def to_json(self) -> str:
        rep = self.ordered()
        return json.dumps({
            "round": rep.round, "mode": Mode(rep.mode).value, "target": rep.target,
            "record_ids": rep.record_ids.tolist(), "scores": [float(s) for s in rep.scores],
            "target_grad_norm": rep.target_grad_norm,
        })

    @classmethod
    def from_json(cls, text: str) -> "InfluenceReport":
        d = json.loads(text)
        scores = np.asarray(d["scores"], dtype=np.float64)
        ids = np.asarray(d.get("record_ids", range(len(scores))), dtype=np.int64)
        return cls(d["round"], Mode(d["mode"]), d["target"], scores, ids, float(d.get("target_grad_norm", np.nan)))


def target_grad(params: PolicyValueParams, target) -> GradVector:
    return per_sample_grad(params, target)


def record_grad(params: PolicyValueParams, buffer: RolloutBuffer, i: int, config: PpoConfig,
                advantages=None) -> GradVector:
    """Ascent gradient of the PPO objective of the record at position ``i``."""
    adv = None if advantages is None else np.asarray(advantages)[[i]]
    return per_sample_grad(params, lambda net: buffer_objectives(net, buffer, [i], config, advantages=adv).sum())


def scores_against(params: PolicyValueParams, buffer: RolloutBuffer, tgrad: GradVector, config: PpoConfig,
                   idx=None, advantages=None, method: str = "ghost") -> np.ndarray:
    """``<tgrad, g_i(params)>`` for the records at positions ``idx`` (default: all)."""
    idx = np.arange(len(buffer)) if idx is None else np.asarray(idx, dtype=np.intp)
    if method == "naive":
        adv_all = np.array(buffer.advantages, dtype=np.float64)
        if advantages is not None:
            adv_all[idx] = advantages
        return np.array([dot(tgrad, record_grad(params, buffer, i, config, adv_all)) for i in idx])
    if method != "ghost":
        raise ValueError(f"unknown method {method!r}")
    if not np.any(tgrad.values):
        return np.zeros(idx.shape[0])
    net = Net(params)
    obj = buffer_objectives(net, buffer, idx, config, advantages=advantages)
    obj.sum().backward()
    scores = net.ghost_dot(tgrad)
    if not np.all(np.isfinite(scores)):
        raise NonFinite("non-finite influence score")
    return scores


def influence_single_checkpoint(params: PolicyValueParams, buffer: RolloutBuffer, target, config: PpoConfig,
                                method: str = "ghost", advantages=None) -> InfluenceReport:
    """Scores at the round's starting parameters only."""
    tg = target_grad(params, target)
    scores = scores_against(params, buffer, tg, config, advantages=advantages, method=method)
    return InfluenceReport(buffer.round + 1, Mode.SINGLE, target.kind, scores, buffer.record_ids.copy(), tg.norm)


def influence_full_tracin(trace: StepTrace, buffer: RolloutBuffer, target, config: PpoConfig,
                          scale_by_lr: bool = False) -> InfluenceReport:
    """Sum over optimisation steps of ``<grad f(theta_j), g_i(theta_j)>`` for members of step ``j``."""
    if not trace.has_checkpoints:
        raise MissingCheckpoints("full TracIn needs the per-step parameter snapshots")
    scores = np.zeros(len(buffer))
    norm = 0.0
    for j, (members, theta) in enumerate(zip(trace.members, trace.checkpoints)):
        pos = buffer.positions(members)
        adv = trace.advantages[j] if trace.advantages else None
        tg = target_grad(theta, target)
        if j == 0:
            norm = tg.norm
        contrib = scores_against(theta, buffer, tg, config, idx=pos, advantages=adv)
        if scale_by_lr:
            contrib = contrib * trace.lrs[j]
        np.add.at(scores, pos, contrib)
    return InfluenceReport(buffer.round + 1, Mode.FULL, target.kind, scores, buffer.record_ids.copy(), norm)
