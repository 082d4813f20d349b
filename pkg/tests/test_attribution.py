import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_buffer
from oracles import scalar
from rlattrib.attribution import (
    ActionTarget,
    CombinedTarget,
    EmptyValidation,
    InfluenceReport,
    MissingCheckpoints,
    Mode,
    ReturnTarget,
    influence_full_tracin,
    influence_single_checkpoint,
    record_grad,
    scores_against,
    target_grad,
)
from rlattrib.envs import make_env
from rlattrib.nn import NonFinite, dot, per_sample_grad, sgd_step
from rlattrib.ppo import PpoConfig, RolloutBuffer, ppo_update


def test_ghost_matches_naive(lake, small_cfg):
    params, buf = random_buffer(lake, small_cfg, seed=3, scale=2.0)
    target = ReturnTarget(buf)
    tg = target_grad(params, target)
    ghost = scores_against(params, buf, tg, small_cfg)
    naive = scores_against(params, buf, tg, small_cfg, method="naive")
    assert len(buf) == 64
    np.testing.assert_allclose(ghost, naive, rtol=0, atol=1e-10)


def test_ghost_matches_naive_with_override_advantages(chain_env, small_cfg):
    params, buf = random_buffer(chain_env, small_cfg, seed=1, scale=3.0)
    tg = target_grad(params, ActionTarget(buf.obs[0], 1))
    idx = np.arange(0, len(buf), 3)
    adv = np.linspace(-1, 1, idx.size)
    ghost = scores_against(params, buf, tg, small_cfg, idx=idx, advantages=adv)
    naive = scores_against(params, buf, tg, small_cfg, idx=idx, advantages=adv, method="naive")
    np.testing.assert_allclose(ghost, naive, atol=1e-10)


def test_unknown_method(chain_env, small_cfg):
    params, buf = random_buffer(chain_env, small_cfg)
    with pytest.raises(ValueError):
        scores_against(params, buf, target_grad(params, ReturnTarget(buf)), small_cfg, method="exact")


def test_first_order_fidelity(small_cfg):
    cfg = dataclasses.replace(small_cfg, hidden=(16, 16))
    eta = 1e-4
    for case in range(6):
        env = make_env(["frozenlake", "chain"][case % 2])
        params, buf = random_buffer(env, cfg, seed=case, scale=2.0)
        target = ReturnTarget(buf)
        rep = influence_single_checkpoint(params, buf, target, cfg)
        i = int(np.argmax(np.abs(rep.scores)))
        moved = sgd_step(params, record_grad(params, buf, i, cfg) * -1.0, eta, np.inf)
        df = scalar(moved, target) - scalar(params, target)
        assert abs(df - eta * rep.scores[i]) <= 0.05 * abs(df)


def test_zero_advantage_return_target_is_zero(chain_env, small_cfg):
    params, buf = random_buffer(chain_env, small_cfg)
    flat = RolloutBuffer.from_records([dataclasses.replace(r, advantage=0.0) for r in buf.records])
    tg = target_grad(params, ReturnTarget(flat))
    assert tg.norm == 0.0
    rep = influence_single_checkpoint(params, buf, ReturnTarget(flat), small_cfg)
    assert not rep.scores.any()


def test_self_influence_is_advantage_times_squared_norm(lake, small_cfg):
    params, buf = random_buffer(lake, small_cfg, seed=5, scale=2.0)
    i = int(np.argmax(np.abs(buf.advantages)))
    one = buf.subset([i])
    target = ActionTarget(one.obs[0], int(one.actions[0]))
    # ratio is exactly 1 at the collecting parameters, and the value term sits in the orthogonal segment
    g = per_sample_grad(params, target)
    rep = influence_single_checkpoint(params, one, target, small_cfg)
    assert rep.scores[0] == pytest.approx(one.advantages[0] * g.norm**2, rel=1e-10)


def test_value_coefficient_does_not_change_scores(lake, small_cfg):
    params, buf = random_buffer(lake, small_cfg, seed=2, scale=2.0)
    target = ReturnTarget(buf)
    a = influence_single_checkpoint(params, buf, target, small_cfg).scores
    b = influence_single_checkpoint(params, buf, target, dataclasses.replace(small_cfg, vf_coef=3.0)).scores
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_linearity_in_target(lake, small_cfg):
    params, buf = random_buffer(lake, small_cfg, seed=4, scale=2.0)
    t1, t2 = ReturnTarget(buf), ActionTarget(buf.obs[3], 2)
    s1 = influence_single_checkpoint(params, buf, t1, small_cfg).scores
    s2 = influence_single_checkpoint(params, buf, t2, small_cfg).scores
    combo = CombinedTarget(((2.0, t1), (-0.5, t2)))
    s = influence_single_checkpoint(params, buf, combo, small_cfg).scores
    np.testing.assert_allclose(s, 2.0 * s1 - 0.5 * s2, atol=1e-12)


@settings(max_examples=10)
@given(c=st.floats(0.01, 100.0))
def test_positive_scaling_preserves_ranking(c):
    cfg = PpoConfig(n_steps=32, batch_size=8, n_epochs=1, normalize_advantage="none", hidden=(6,))
    params, buf = random_buffer(make_env("chain", length=4), cfg, seed=9, scale=3.0)
    base = ReturnTarget(buf)
    s = influence_single_checkpoint(params, buf, base, cfg).scores
    scaled = influence_single_checkpoint(params, buf, CombinedTarget(((c, base),)), cfg).scores
    np.testing.assert_allclose(scaled, c * s, rtol=1e-9, atol=1e-15)


def test_single_checkpoint_report_metadata(lake, small_cfg):
    params, buf = random_buffer(lake, small_cfg)
    rep = influence_single_checkpoint(params, buf, ReturnTarget(buf), small_cfg)
    assert rep.mode is Mode.SINGLE and rep.target == "return"
    assert rep.round == buf.round + 1
    assert np.array_equal(rep.record_ids, buf.record_ids) and len(rep) == len(buf)


def test_empty_validation_raises(lake, small_cfg):
    params, buf = random_buffer(lake, small_cfg)
    with pytest.raises(EmptyValidation):
        influence_single_checkpoint(params, buf, ReturnTarget(buf.subset([])), small_cfg)


# full TracIn -------------------------------------------------------------------------

def test_full_tracin_needs_checkpoints(chain_env, small_cfg):
    params, buf = random_buffer(chain_env, small_cfg)
    _, trace = ppo_update(params, buf, small_cfg, np.random.default_rng(0))
    with pytest.raises(MissingCheckpoints):
        influence_full_tracin(trace, buf, ReturnTarget(buf), small_cfg)


def test_full_tracin_one_step_equals_single_on_members(lake):
    cfg = PpoConfig(n_steps=64, batch_size=16, n_epochs=1, normalize_advantage="none", hidden=(8,))
    params, buf = random_buffer(lake, cfg, seed=1, scale=2.0)
    _, trace = ppo_update(params, buf, cfg, np.random.default_rng(0), keep_checkpoints=True)
    first = trace.members[0]
    one_step = dataclasses.replace(trace, members=trace.members[:1], checkpoints=trace.checkpoints[:1],
                                   lrs=trace.lrs[:1], advantages=trace.advantages[:1])
    full = influence_full_tracin(one_step, buf, ReturnTarget(buf), cfg)
    single = influence_single_checkpoint(params, buf, ReturnTarget(buf), cfg)
    pos = buf.positions(first)
    np.testing.assert_allclose(full.scores[pos], single.scores[pos], atol=1e-12)
    rest = np.setdiff1d(np.arange(len(buf)), pos)
    assert not full.scores[rest].any()
    assert full.mode is Mode.FULL


def test_full_tracin_with_zero_lr_is_epochs_times_single(lake):
    cfg = PpoConfig(n_steps=48, batch_size=16, n_epochs=3, lr=0.0, normalize_advantage="none", hidden=(8,))
    params, buf = random_buffer(lake, cfg, seed=2, scale=2.0)
    _, trace = ppo_update(params, buf, cfg, np.random.default_rng(0), keep_checkpoints=True)
    full = influence_full_tracin(trace, buf, ReturnTarget(buf), cfg)
    single = influence_single_checkpoint(params, buf, ReturnTarget(buf), cfg)
    np.testing.assert_allclose(full.scores, 3 * single.scores, atol=1e-12)


def test_full_tracin_lr_scaling(lake, small_cfg):
    params, buf = random_buffer(lake, small_cfg, seed=6)
    _, trace = ppo_update(params, buf, small_cfg, np.random.default_rng(0), keep_checkpoints=True)
    plain = influence_full_tracin(trace, buf, ReturnTarget(buf), small_cfg)
    scaled = influence_full_tracin(trace, buf, ReturnTarget(buf), small_cfg, scale_by_lr=True)
    np.testing.assert_allclose(scaled.scores, small_cfg.lr * plain.scores, atol=1e-15)


def test_record_in_every_epoch_accumulates(lake):
    cfg = PpoConfig(n_steps=32, batch_size=32, n_epochs=4, lr=0.0, normalize_advantage="none", hidden=(6,))
    params, buf = random_buffer(lake, cfg, seed=8, scale=2.0)
    _, trace = ppo_update(params, buf, cfg, np.random.default_rng(0), keep_checkpoints=True)
    assert len(trace) == 4
    tg = target_grad(params, ActionTarget(buf.obs[0], int(buf.actions[0])))
    g0 = record_grad(params, buf, 0, cfg)
    full = influence_full_tracin(trace, buf, ActionTarget(buf.obs[0], int(buf.actions[0])), cfg)
    assert full.scores[0] == pytest.approx(4 * dot(tg, g0), rel=1e-10)


# reports -----------------------------------------------------------------------------

def test_report_json_roundtrip(lake, small_cfg):
    params, buf = random_buffer(lake, small_cfg, seed=7, scale=2.0)
    shuffled = buf.subset(np.random.default_rng(0).permutation(len(buf)))
    rep = influence_single_checkpoint(params, shuffled, ReturnTarget(buf), small_cfg)
    back = InfluenceReport.from_json(rep.to_json())
    assert np.all(np.diff(back.record_ids) > 0)
    assert back.by_record() == rep.by_record()
    assert (back.round, back.mode, back.target) == (rep.round, rep.mode, rep.target)
    assert back.target_grad_norm == rep.target_grad_norm


def test_report_rejects_non_finite():
    with pytest.raises(NonFinite):
        InfluenceReport(1, Mode.SINGLE, "return", np.array([np.nan]), np.array([0]), 1.0)
    with pytest.raises(ValueError):
        InfluenceReport(1, Mode.SINGLE, "return", np.zeros(2), np.arange(3), 1.0)
