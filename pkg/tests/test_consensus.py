import logging
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tacomap.consensus import (
    ConsensusConfig,
    DescentRule,
    Snapshot,
    TacoState,
    accumulate_importance,
    consensus_target,
    data_grad_fn,
    descend,
    dual_update,
    importance_update,
    init_state,
    mask_weights,
    multiplier_rounds,
    primal_update,
    proxy_loss,
    proxy_value,
    scale_weights,
    taco_step,
)
from tacomap.errors import NumericalFailure
from tacomap.loss import LossWeights
from tacomap.render import RenderConfig, RenderResult, render_batch, sample_depths

RC = RenderConfig(n_samples=12, n_near=4)


def rr(color, depth, valid):
    return RenderResult(np.asarray(color, float), np.asarray(depth, float), np.ones(len(depth)), np.asarray(valid), None)


# -- proxy loss and importance ----------------------------------------------------


def test_proxy_value_examples():
    assert proxy_value(rr([[0, 0, 0], [0, 0, 0]], [0, 0], [True, True])) == 0.0
    assert proxy_value(rr([[1, 0, 0]], [2.0], [True])) == 5.0


def test_proxy_loss_matches_resummation(tiny_model, tiny_theta, batch):
    v = proxy_loss(tiny_model, tiny_theta, batch, np.random.default_rng(7), RC)
    depths = sample_depths(batch.depth, batch.max_range, RC.n_samples, RC.n_near, RC.tr, np.random.default_rng(7))
    res = render_batch(tiny_model, tiny_theta, batch, depths, RC.tr, keep_cache=False).result
    total, n = 0.0, 0
    for i in range(len(batch)):
        if res.valid[i]:
            total += sum(c * c for c in res.color[i]) + res.depth[i] ** 2
            n += 1
    assert v == pytest.approx(total / n, abs=1e-12)


def test_proxy_loss_gradient(tiny_model, tiny_theta, batch):
    v, g = proxy_loss(tiny_model, tiny_theta, batch, np.random.default_rng(1), RC, with_grad=True)
    rng = np.random.default_rng(2)
    for i in rng.choice(tiny_model.num_params, 30, replace=False):
        e = np.zeros_like(tiny_theta)
        e[i] = 1e-5
        fp = proxy_loss(tiny_model, tiny_theta + e, batch, np.random.default_rng(1), RC)
        fm = proxy_loss(tiny_model, tiny_theta - e, batch, np.random.default_rng(1), RC)
        fd = (fp - fm) / 2e-5
        assert abs(fd - g[i]) <= 1e-4 * max(abs(fd), abs(g[i]), 1e-8)


def test_proxy_loss_all_degenerate(tiny_model, tiny_theta, batch, caplog):
    theta = tiny_theta.copy()
    tiny_model.layout.view(theta, "geo.b2")[-1] = 1e5
    with caplog.at_level(logging.WARNING):
        assert proxy_loss(tiny_model, theta, batch, np.random.default_rng(0), RC) == 0.0
    assert "degenerate" in caplog.text


def test_accumulate_importance_examples():
    u = np.zeros(5)
    assert np.array_equal(accumulate_importance(u, np.zeros(5), 3), u)
    out = accumulate_importance(u, np.array([1.0, -2.0, 0.0, 7.0, -1.0]), 3)
    assert out.tolist() == [1.0, 2.0, 0.0, 0.0, 0.0]
    assert not u.any()  # input untouched
    with pytest.raises(NumericalFailure):
        accumulate_importance(u, np.array([np.nan, 0, 0, 0, 0]), 3)


def test_accumulate_importance_sequential_oracle():
    rng = np.random.default_rng(3)
    grads = rng.normal(size=(6, 10))
    u = np.zeros(10)
    expect = np.zeros(10)
    for g in grads:
        u = accumulate_importance(u, g, 7)
        for i in range(7):
            expect[i] += abs(g[i])
    assert np.allclose(u, expect, atol=1e-15)
    assert not u[7:].any()


def test_importance_update_is_grid_only_and_monotone(tiny_model, tiny_theta, batch):
    u0 = np.zeros(tiny_model.num_params)
    u1 = importance_update(u0, tiny_model, tiny_theta, batch, np.random.default_rng(0), RC)
    u2 = importance_update(u1, tiny_model, tiny_theta, batch, np.random.default_rng(1), RC)
    n = tiny_model.layout.grid_len
    assert u1[:n].any() and not u1[n:].any()
    assert np.all(u2 >= u1) and np.all(u1 >= u0)


# -- weights, masks, target -----------------------------------------------------


def test_scale_weights_example():
    wc, wh = scale_weights(np.array([1.0, 3.0]), np.array([0.0, 0.0]), 2.0)
    assert wc.tolist() == [1.0, 3.0] and wh.tolist() == [0.0, 0.0]


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, 8, elements=st.floats(0, 100)),
    arrays(np.float64, 8, elements=st.floats(0, 100)),
    st.floats(0.01, 10),
    st.floats(0.01, 100),
)
def test_scale_weights_invariance_and_mean(uc, uh, rho, k):
    if (uc + uh).mean() <= 1e-6:
        return
    wc, wh = scale_weights(uc, uh, rho)
    assert np.mean(wc + wh) == pytest.approx(rho, rel=1e-12)
    wc2, wh2 = scale_weights(k * uc, k * uh, rho)
    assert np.allclose(wc2, wc, rtol=1e-12, atol=1e-12) and np.allclose(wh2, wh, rtol=1e-12, atol=1e-12)


def test_scale_weights_symmetry_and_zero(caplog):
    u = np.array([0.5, 2.0, 0.0])
    wc, wh = scale_weights(u, u.copy(), 0.3)
    assert np.array_equal(wc, wh)
    with caplog.at_level(logging.WARNING):
        wc, wh = scale_weights(np.zeros(3), np.zeros(3), 0.3)
    assert not wc.any() and not wh.any() and "zero" in caplog.text
    with pytest.raises(ValueError):
        scale_weights(u, u, 0.0)


def test_scale_weights_mean_over_grid_only():
    uc = np.array([1.0, 1.0, 50.0])
    wc, wh = scale_weights(uc, np.array([1.0, 1.0, 0.0]), 1.0, grid_len=2)
    assert np.mean(wc[:2] + wh[:2]) == pytest.approx(1.0, abs=1e-15)


def test_mask_weights_threshold():
    w = np.array([0.0, 0.5, 1.0, 2.0, 4.0])
    assert np.array_equal(mask_weights(w, 0.0), w)
    beta = 1.0
    assert mask_weights(np.array([0.5 * beta]), beta)[0] == 0.0
    assert mask_weights(np.array([2 * beta]), beta)[0] == 2 * beta
    assert mask_weights(np.array([beta]), beta)[0] == beta  # only strictly smaller entries go
    assert not mask_weights(w, 10.0).any()
    with pytest.raises(ValueError):
        mask_weights(w, -1.0)


def test_consensus_target_examples():
    cur, old = np.array([4.0, 1.0]), np.array([0.0, 3.0])
    ones = np.ones(2)
    assert np.array_equal(consensus_target(cur, [old], ones, [ones]), (cur + old) / 2)
    assert np.array_equal(consensus_target(cur, [old], ones, [np.zeros(2)]), cur)
    z = consensus_target(np.array([4.0]), [np.array([0.0])], np.array([3.0]), [np.array([1.0])])
    assert z[0] == 3.0


def test_consensus_target_zero_weight_and_decoder_entries():
    cur, old = np.array([1.0, 2.0, 3.0, 4.0]), np.array([9.0, 9.0, 9.0, 9.0])
    z = consensus_target(cur, [old], np.array([0.0, 1.0, 1.0, 1.0]), [np.array([0.0, 1.0, 1.0, 1.0])], grid_len=3)
    assert z[0] == 1.0  # zero total weight keeps the current value
    assert z[3] == 4.0  # past the grid: current value
    assert z[1] == 5.5


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, 6, elements=st.floats(-10, 10)),
    arrays(np.float64, 6, elements=st.floats(-10, 10)),
    arrays(np.float64, 6, elements=st.floats(0, 5)),
    arrays(np.float64, 6, elements=st.floats(0, 5)),
)
def test_consensus_target_is_convex(cur, old, wc, wh):
    z = consensus_target(cur, [old], wc, [wh])
    lo, hi = np.minimum(cur, old), np.maximum(cur, old)
    assert np.all(z >= lo - 1e-12) and np.all(z <= hi + 1e-12)


# -- primal / dual --------------------------------------------------------------


def zero_loss(theta, rng):
    return 0.0, np.zeros_like(theta), {}


def test_primal_pulls_toward_target_monotonically():
    z = np.array([1.0, -2.0, 0.5])
    th = np.zeros(3)
    dist = [np.linalg.norm(th - z)]
    for _ in range(20):
        th, _ = primal_update(th, zero_loss, z, np.zeros(3), 1.0, 1, 0.1, np.random.default_rng(0))
        dist.append(np.linalg.norm(th - z))
    assert all(b < a for a, b in zip(dist, dist[1:]))


def test_primal_scalar_closed_form():
    a, z, rho = 1.0, 0.0, 2.0

    def quad(theta, rng):
        return float((theta[0] - a) ** 2), 2.0 * (theta - a), {}

    th, _ = primal_update(np.zeros(1), quad, np.array([z]), np.zeros(1), rho, 2000, 0.05, np.random.default_rng(0))
    assert th[0] == pytest.approx((2 * a + rho * z - 0.0) / (2 + rho), abs=1e-12)
    assert th[0] == pytest.approx(0.5, abs=1e-12)


def test_primal_restricted_to_grid():
    z = np.ones(4)
    th, _ = primal_update(np.zeros(4), zero_loss, z, np.full(4, 3.0), 1.0, 5, 0.1, np.random.default_rng(0), grid_len=2)
    assert th[2:].tolist() == [0.0, 0.0] and np.all(th[:2] != 0)


def test_primal_without_penalty_is_plain_descent(tiny_model, tiny_theta, batch):
    fn = data_grad_fn(tiny_model, batch, LossWeights(), RC, 16)
    z = np.zeros_like(tiny_theta)
    a, _ = primal_update(tiny_theta, fn, z, np.zeros_like(z), 0.0, 3, 0.01, np.random.default_rng(4))
    b, _ = descend(tiny_theta, fn, 3, DescentRule(0.01), np.random.default_rng(4), tiny_model.layout.grid_len)
    assert np.array_equal(a, b)


def test_primal_non_finite_raises():
    def bad(theta, rng):
        return 0.0, np.full_like(theta, np.inf), {}

    with pytest.raises(NumericalFailure):
        primal_update(np.zeros(2), bad, np.zeros(2), np.zeros(2), 1.0, 1, 0.1, np.random.default_rng(0))


def test_dual_update_examples():
    v = np.array([0.5, -1.0, 2.0])
    p = np.array([0.3, 0.3, 0.3])
    assert np.array_equal(dual_update(p, v, v, 1.0), p)
    assert np.array_equal(dual_update(np.zeros(3), v, np.zeros(3), 1.0), v)
    p = dual_update(np.zeros(3), v, np.zeros(3), 0.5)
    p = dual_update(p, v, np.zeros(3), 0.5)
    assert np.array_equal(p, v)
    assert dual_update(np.zeros(3), v, np.zeros(3), 1.0, grid_len=2)[2] == 0.0


def test_method_of_multipliers_kkt_oracle():
    a, z, rho = 1.0, 0.0, 1.0

    def solve(p):  # exact argmin of (t-a)^2 + t p + rho/2 (t-z)^2
        return np.array([(2 * a - p[0] + rho * z) / (2 + rho)])

    for k, (theta, p) in enumerate(multiplier_rounds(solve, np.array([z]), rho, 10_000), 1):
        if abs(theta[0]) <= 1e-6 and abs(p[0] - 2.0) <= 1e-5:
            break
    assert abs(theta[0]) <= 1e-6 and abs(p[0] - 2 * (a - z)) <= 1e-5
    assert k < 10_000


def test_descent_rule():
    rule = DescentRule(0.5, decoder_step_size=0.1, clip_norm=1.0)
    out = rule.apply(np.zeros(4), np.array([3.0, 0.0, 4.0, 0.0]), 2)
    assert np.allclose(out, [-0.3, 0.0, -0.08, 0.0])
    with pytest.raises(ValueError):
        DescentRule(0.0)
    with pytest.raises(NumericalFailure):
        DescentRule(1.0).apply(np.zeros(1), np.array([np.nan]), 1)


def test_config_validation():
    for bad in (dict(rho=0.0), dict(beta=-1.0), dict(rounds=0), dict(inner_steps=0), dict(snapshots_kept=0), dict(penalty_form="x")):
        with pytest.raises(ValueError):
            ConsensusConfig(**bad)


def test_snapshot_is_frozen():
    s = Snapshot(np.zeros(2), np.zeros(2), 0)
    with pytest.raises(ValueError):
        s.params[0] = 1.0


# -- full step ---------------------------------------------------------------------


CFG = ConsensusConfig(rho=0.5, beta=0.0, rounds=2, inner_steps=2, step_size=0.05)


def run_steps(model, theta, batches, cfg, seed=0):
    state = init_state(model, theta)
    infos = []
    for t, b in enumerate(batches):
        state, info = taco_step(model, state, b, cfg, LossWeights(), np.random.default_rng([seed, t]), RC, 16)
        infos.append(info)
    return state, infos


def test_first_step_is_plain_descent(tiny_model, tiny_theta, batch):
    state, _ = run_steps(tiny_model, tiny_theta, [batch], CFG)
    fn = data_grad_fn(tiny_model, batch, LossWeights(), RC, 16)
    expect, _ = descend(tiny_theta, fn, 4, CFG.rule, np.random.default_rng([0, 0]), tiny_model.layout.grid_len)
    assert np.array_equal(state.theta, expect)


def test_step_bookkeeping(tiny_model, tiny_theta):
    from conftest import make_batch

    batches = [make_batch(step=t) for t in range(4)]
    cfg = ConsensusConfig(rho=0.5, rounds=2, inner_steps=1, step_size=0.05, snapshots_kept=2)
    state, infos = run_steps(tiny_model, tiny_theta, batches, cfg)
    assert len(state.snapshots) == 2 and [s.step for s in state.snapshots] == [2, 3]
    assert state.step == 4
    assert {"residual", "mean_w_current", "mean_w_hist", "masked_fraction", "sdf"} <= set(infos[-1])
    n = tiny_model.layout.grid_len
    assert not state.importance[n:].any()
    assert state.tracked_bytes() == state.theta.nbytes * 2 + 2 * 2 * state.theta.nbytes


def test_importance_never_decreases(tiny_model, tiny_theta):
    from conftest import make_batch

    state = init_state(tiny_model, tiny_theta)
    for t in range(4):
        prev = state.importance
        state, _ = taco_step(tiny_model, state, make_batch(step=t), CFG, LossWeights(), np.random.default_rng(t), RC, 16)
        assert np.count_nonzero(state.importance < prev) == 0


def test_full_mask_equals_proximal_oracle(tiny_model, tiny_theta):
    from conftest import make_batch

    b0, b1 = make_batch(step=0), make_batch(step=1)
    masked = ConsensusConfig(rho=0.5, beta=1e9, rounds=2, inner_steps=2, step_size=0.05)
    state, _ = run_steps(tiny_model, tiny_theta, [b0], masked)
    # with every historical weight masked the target is the current model
    rng = np.random.default_rng(11)
    got, _ = taco_step(tiny_model, state, b1, masked, LossWeights(), rng, RC, 16)
    n = tiny_model.layout.grid_len
    fn = data_grad_fn(tiny_model, b1, LossWeights(), RC, 16)
    rng = np.random.default_rng(11)
    z = state.theta.copy()
    th, p = state.theta, np.zeros_like(z)
    for _ in range(2):
        th, _ = primal_update(th, fn, z, p, 0.5, 2, masked.rule, rng, n)
        p = dual_update(p, th, z, 0.5, n)
    assert np.array_equal(got.theta, th)


def test_failed_step_leaves_state(tiny_model, tiny_theta, batch):
    state = init_state(tiny_model, tiny_theta)
    before = state.theta.copy()
    bad = ConsensusConfig(step_size=1e308, rounds=1, inner_steps=3)
    with np.errstate(all="ignore"), pytest.raises(NumericalFailure):
        taco_step(tiny_model, state, batch, bad, LossWeights(), np.random.default_rng(0), RC, 16)
    assert np.array_equal(state.theta, before) and not state.snapshots
