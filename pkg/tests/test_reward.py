import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pixforge import reward as rw

maps16 = arrays(np.float64, 16, elements=st.floats(0, 10)).filter(lambda a: a.sum() > 1e-3)


def test_single_step_single_token_is_unchanged():
    m = np.random.default_rng(0).random((16, 1))
    agg = rw.aggregate_attention(m[None], np.array([True]))
    np.testing.assert_array_equal(agg.map, m[:, 0].reshape(4, 4))
    assert (agg.num_tokens, agg.num_steps) == (1, 1)


def test_two_steps_average_linearly():
    a = np.random.default_rng(1).random((16, 1))
    agg = rw.aggregate_attention(np.stack([a, 3 * a]), np.array([True]))
    np.testing.assert_allclose(agg.map, 2 * a[:, 0].reshape(4, 4), rtol=1e-15)


def test_three_tokens_two_steps_one_hot_mixture():
    # six distinct one-hot pixel maps, one per (step, token)
    rec = np.zeros((2, 16, 3))
    for t in range(2):
        for n in range(3):
            rec[t, 3 * t + n, n] = 1.0
    agg = rw.aggregate_attention(rec, np.array([True, True, True]))
    weights = agg.map.ravel()
    np.testing.assert_allclose(weights[:6] / weights.sum(), 1 / 6)
    assert np.all(weights[6:] == 0)


def test_padding_and_blocks():
    rng = np.random.default_rng(2)
    rec = rng.random((3, 2, 16, 5))
    rel = np.array([False, True, True, False, False])
    agg = rw.aggregate_attention(rec, rel)
    np.testing.assert_allclose(agg.map.ravel(), rec.mean(axis=(0, 1))[:, 1:3].mean(axis=1))
    assert agg.num_tokens == 2
    with pytest.raises(ValueError):
        rw.aggregate_attention(np.zeros((0, 16, 5)), rel)
    with pytest.raises(ValueError):
        rw.aggregate_attention(rec, np.zeros(5, bool))


def test_attention_loss_cases():
    a = np.random.default_rng(3).random((4, 4))
    assert rw.attention_loss(a, a) == pytest.approx(1.0, abs=1e-15)
    e0, e1 = np.eye(16)[0], np.eye(16)[5]
    assert rw.attention_loss(e0, e1) == 0.0
    for n in (4, 9, 16):
        uni = np.zeros(16)
        uni[:n] = 1 / n
        assert rw.attention_loss(e0, uni) == pytest.approx(1 / math.sqrt(n), rel=1e-14)
    with pytest.raises(ValueError):
        rw.attention_loss(np.zeros(16), a)
    with pytest.raises(ValueError):
        rw.attention_loss(np.ones(9), a)


def test_clip_loss_cases():
    v = np.full((4, 4), 0.5)
    assert rw.clip_loss(v, v, 0.1) == (0.0, 0.0)
    assert rw.clip_loss(v, v + 0.05, 0.1)[1] == 0.0
    mae, lc = rw.clip_loss(v, v + 0.2, 0.1)
    assert mae == pytest.approx(0.2) and lc == mae
    with pytest.raises(ValueError):
        rw.clip_loss(v, np.zeros((3, 3)))


def test_total_reward_cases():
    assert rw.DEFAULT_ALPHA == -1.0 and rw.DEFAULT_TAU == 0.05
    assert rw.total_reward(1.0, 0.0, 0.0).total == 1.0
    assert rw.total_reward(0.8, 0.2, 0.2).total == pytest.approx(0.6, abs=1e-15)
    assert rw.RewardBreakdown.CSV_FIELDS == ("l_att", "mae", "l_clip", "total")


def test_score_clip_only_still_reports_alignment():
    rng = np.random.default_rng(4)
    rec = rng.random((2, 16, 3))
    rel = np.array([True, True, False])
    gt = np.eye(16)[3].reshape(4, 4)
    src, out = np.zeros((16, 16)), np.full((16, 16), 0.2)
    full = rw.score(gt, rec, rel, src, out)
    clip_only = rw.score(gt, rec, rel, src, out, use_attention=False)
    assert clip_only.l_att == full.l_att
    assert clip_only.total == -clip_only.l_clip
    assert full.total == full.l_att - full.l_clip


@settings(max_examples=80, deadline=None)
@given(maps16, maps16, st.floats(1e-3, 1e3))
def test_attention_loss_scale_invariant_and_bounded(a, b, c):
    l = rw.attention_loss(a, b)
    assert 0.0 <= l <= 1.0 + 1e-12
    assert abs(rw.attention_loss(c * a, b) - l) < 1e-9


@settings(max_examples=80, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(-5, -1e-3))
def test_total_non_increasing_in_mae(l_att, m1, m2, alpha):
    lo, hi = sorted((m1, m2))
    r_lo = rw.total_reward(l_att, lo, rw.clip_loss(np.zeros(1), np.array([lo]))[1], alpha).total
    r_hi = rw.total_reward(l_att, hi, rw.clip_loss(np.zeros(1), np.array([hi]))[1], alpha).total
    assert r_hi <= r_lo


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 4), elements=st.floats(0, 1)), st.floats(0, 10))
def test_clip_loss_zero_on_diagonal(v, tau):
    assert rw.clip_loss(v, v.copy(), tau) == (0.0, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(-3, 3))
def test_total_is_exact_weighted_sum(l_att, l_clip, alpha):
    assert rw.total_reward(l_att, l_clip, l_clip, alpha).total == l_att + alpha * l_clip
