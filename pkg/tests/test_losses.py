import math

import numpy as np
import pytest
from conftest import random_tokens
from hypothesis import given, settings
from hypothesis import strategies as st

from timeseq import timerep as tr
from timeseq.losses import (
    SIGMA_MIN,
    SigmaState,
    event_loss,
    loss_and_grads,
    reg_nll,
    reg_xent,
    reg_xent_backward,
    seed_sigma,
    total_loss,
    update_sigma,
    xent_targets,
)
from timeseq.model import Batch, Model, ModelConfig
from timeseq.numerics import cross_entropy, softmax

durations = st.floats(1e-3, 1e3)


def test_event_loss_examples(rng):
    assert event_loss(np.zeros(4), 2) == pytest.approx(math.log(4), abs=1e-15)
    assert event_loss(np.array([0.0, 60.0, 0.0]), 1) < 1e-20
    z = rng.normal(size=7)
    assert event_loss(z, 3) == pytest.approx(cross_entropy(np.eye(7)[3], softmax(z)), abs=1e-12)


def test_event_loss_vectorised(rng):
    z = rng.normal(size=(2, 3, 5))
    t = rng.integers(0, 5, size=(2, 3))
    v = event_loss(z, t)
    for i in range(2):
        for j in range(3):
            assert v[i, j] == pytest.approx(event_loss(z[i, j], t[i, j]), abs=1e-14)


def test_reg_nll_examples():
    assert reg_nll(3.0, 3.0, 1.0) == 0.0
    assert reg_nll(5.0, 3.0, 1.0) == 2.0
    assert reg_nll(5.0, 3.0, 2.0) == 0.5


@given(durations, durations, st.floats(SIGMA_MIN, 100))
def test_reg_nll_nonnegative(a, b, sigma):
    v = reg_nll(a, b, sigma)
    assert v >= 0 and ((v == 0) == (a == b))


def test_reg_xent_examples(rng):
    W, b = rng.normal(size=(1, 5)), rng.normal(size=5)
    for d in (0.3, 2.0, 17.0):
        s = tr.project(d, W, b)
        entropy = -(s * np.log(s)).sum()
        assert reg_xent(d, d, W, b) == pytest.approx(entropy, abs=1e-12)
    # zero projection weights make both sides uniform
    assert reg_xent(0.5, 40.0, np.zeros((1, 5)), np.zeros(5)) == pytest.approx(math.log(5), abs=1e-12)


@settings(max_examples=300)
@given(durations, durations, st.integers(0, 2**31 - 1), st.booleans())
def test_reg_xent_nonnegative(a, b, seed, log_input):
    r = np.random.default_rng(seed)
    assert reg_xent(a, b, r.normal(size=(1, 4)), r.normal(size=4), log_input) >= 0


@settings(max_examples=200, deadline=None)
@given(st.floats(0.5, 1000), st.integers(0, 2**31 - 1), st.booleans())
def test_reg_xent_gibbs_minimum_on_grid(d, seed, log_input):
    r = np.random.default_rng(seed)
    # logits must vary by O(1) over the grid; a one-hot projection ties at float zero
    W = r.normal(size=(1, 5)) * (1.0 if log_input else 1.0 / d)
    b = r.normal(size=5)
    grid = np.linspace(0.5 * d, 1.5 * d, 101)
    losses = reg_xent(grid, np.full_like(grid, d), W, b, log_input)
    assert abs(grid[np.argmin(losses)] - d) <= grid[1] - grid[0]
    assert reg_xent(d, d, W, b, log_input) <= losses.min() + 1e-12


def test_reg_xent_backward_matches_finite_difference(rng):
    W, b = rng.normal(size=(1, 4)), rng.normal(size=4)
    pred = rng.uniform(0.5, 5, size=6)
    target = tr.project(rng.uniform(0.5, 5, size=6), W, b)
    dpred, dW, db = reg_xent_backward(pred, target, W, b)
    eps = 1e-6
    for i in range(6):
        e = np.zeros(6)
        e[i] = eps
        num = (reg_xent(pred + e, None, W, b, target=target).sum()
               - reg_xent(pred - e, None, W, b, target=target).sum()) / (2 * eps)
        assert dpred[i] == pytest.approx(num, rel=1e-6, abs=1e-10)
    Wp = W.copy()
    Wp[0, 1] += eps
    Wm = W.copy()
    Wm[0, 1] -= eps
    num = (reg_xent(pred, None, Wp, b, target=target).sum() - reg_xent(pred, None, Wm, b, target=target).sum()) / (2 * eps)
    assert dW[0, 1] == pytest.approx(num, rel=1e-6)


def _xent_model(rng, share):
    cfg = ModelConfig(variant="time_joint", regularizer="xent", share_projection_weights=share,
                      embed_dim=4, hidden=6, proj_size=5, post_recurrent_projection=None)
    m = Model(cfg, 8, seed=1)
    for k in m.params:
        m.params[k] = rng.normal(0, 0.5, m.params[k].shape)
    return m, Batch.from_tokens([random_tokens(rng, 6, 8)])


def test_stop_gradient_on_target_duration(rng):
    m, batch = _xent_model(rng, share=False)
    targets = xent_targets(m, batch)
    base, _, _ = loss_and_grads(m, batch, targets=targets)
    # moving the true next duration with the target held fixed leaves the loss unchanged
    batch.next_dur[0, 2] += 1e-4
    moved, _, _ = loss_and_grads(m, batch, targets=targets)
    assert moved == base


def test_shared_projection_gets_prediction_side_gradient_only(rng):
    m, batch = _xent_model(rng, share=True)
    _, grads, _ = loss_and_grads(m, batch)
    targets = xent_targets(m, batch)
    eps = 1e-6
    W = m.params["proj_W"]
    fixed, free = [], []
    for j in range(W.shape[1]):
        old = W[0, j]
        vals = {}
        for sign in (1, -1):
            W[0, j] = old + sign * eps
            vals[sign] = (loss_and_grads(m, batch, targets=targets)[0], loss_and_grads(m, batch)[0])
        W[0, j] = old
        fixed.append((vals[1][0] - vals[-1][0]) / (2 * eps))
        free.append((vals[1][1] - vals[-1][1]) / (2 * eps))
    np.testing.assert_allclose(grads["proj_W"][0], fixed, rtol=1e-5, atol=1e-9)
    assert not np.allclose(grads["proj_W"][0], free, rtol=1e-3)


def test_sigma_update_rules():
    s = SigmaState(2.0)
    assert s.sigma == 2.0
    update_sigma(s, np.zeros(5))
    assert s.sigma == SIGMA_MIN
    update_sigma(s, [-1.0, 1.0])
    assert s.sigma == 1.0
    assert SigmaState(0.0).sigma == SIGMA_MIN


def test_sigma_constant_within_interval():
    s = SigmaState(3.0, update_interval=3)
    for _ in range(2):
        update_sigma(s, [5.0, -5.0])
        assert s.sigma == 3.0
    update_sigma(s, [5.0, -5.0])
    assert s.sigma == 5.0
    assert s.window == []


def test_seed_sigma():
    d = np.array([1.0, 3.0])
    assert seed_sigma(d) == 1.0
    assert seed_sigma(np.array([1.0, math.e ** 2]), log_target=True) == pytest.approx(1.0)
    assert seed_sigma(np.full(4, 7.0)) == SIGMA_MIN


def test_total_loss_examples():
    assert total_loss([1.0, 3.0], [9.0, 9.0], 0.0) == 2.0
    assert total_loss([1.0, 3.0], None, 1.0) == 2.0
    assert total_loss([2.0, 2.0], [3.0, 3.0], 1.0) == 5.0
    with pytest.raises(ValueError):
        total_loss([1.0], [1.0, 2.0], 1.0)


@given(st.lists(st.floats(0, 10), min_size=1, max_size=20), st.floats(0, 10), st.floats(0, 10))
def test_total_loss_linear_in_lambda(ev, lam1, lam2):
    reg = [v / 2 + 1 for v in ev]
    base = total_loss(ev, reg, 0.0)
    slope = total_loss(ev, reg, 1.0) - base
    assert total_loss(ev, reg, lam1 + lam2) == pytest.approx(base + (lam1 + lam2) * slope, rel=1e-9, abs=1e-9)


def test_loss_and_grads_masks_padding(rng):
    cfg = ModelConfig(variant="no_time", embed_dim=4, hidden=6, post_recurrent_projection=None)
    m = Model(cfg, 8, seed=0)
    a = random_tokens(rng, 4, 8)
    b = random_tokens(rng, 9, 8)
    alone, _, _ = loss_and_grads(m, Batch.from_tokens([a]))
    padded, _, info = loss_and_grads(m, Batch.from_tokens([a, b]))
    both = loss_and_grads(m, Batch.from_tokens([b]))[0]
    assert info["n"] == 3 + 8
    assert padded == pytest.approx((3 * alone + 8 * both) / 11, rel=1e-12)


def test_exclude_idle_targets(rng):
    seq = ([2, 0, 3, 0, 4], [1.0] * 5)
    batch = Batch.from_arrays([seq], exclude_idle_targets=True)
    np.testing.assert_array_equal(batch.mask[0], [0, 1, 0, 1])
