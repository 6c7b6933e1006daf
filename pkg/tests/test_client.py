import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetofedbandit.client import (
    ClientPool,
    ClientState,
    apply_sync,
    check_trigger,
    confidence_width,
    explore_step,
    trigger_score,
    ucb_scores,
    ucb_select,
    update_local,
)

LAM, SIGMA, DELTA = 0.1, 0.1, 0.1


def unit(rng, *shape):
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def brute_ucb(V, b, contexts):
    # direct formula with explicit inverse and determinants
    d = V.shape[0]
    Vbar = V + LAM * np.eye(d)
    inv = np.linalg.inv(Vbar)
    theta = inv @ b
    alpha = SIGMA * math.sqrt(2 * math.log(math.sqrt(np.linalg.det(Vbar)) / (DELTA * math.sqrt(LAM**d)))) + math.sqrt(LAM)
    return np.array([x @ theta + alpha * math.sqrt(x @ inv @ x) for x in contexts])


def test_ucb_matches_bruteforce():
    rng = np.random.default_rng(0)
    st_ = ClientState.fresh(0, 4)
    for _ in range(15):
        x = unit(rng, 4)
        update_local(st_, x, float(x @ np.ones(4) / 2 + 0.1 * rng.standard_normal()))
    ctx = unit(rng, 7, 4)
    assert np.allclose(ucb_scores(st_, ctx, LAM, SIGMA, DELTA), brute_ucb(st_.stats.V, st_.stats.b, ctx))


def test_confidence_width_at_start():
    assert confidence_width(3 * math.log(LAM), 3, LAM, SIGMA, DELTA) == pytest.approx(
        SIGMA * math.sqrt(2 * math.log(1 / DELTA)) + math.sqrt(LAM))


def test_ucb_select_ties_and_errors():
    st_ = ClientState.fresh(0, 2)
    ctx = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 0.5]])
    assert ucb_select(st_, ctx, LAM, SIGMA, DELTA) == 0
    with pytest.raises(ValueError):
        ucb_select(st_, ctx, 0.0, SIGMA, DELTA)
    with pytest.raises(ValueError):
        ucb_select(st_, np.zeros((0, 2)), LAM, SIGMA, DELTA)
    with pytest.raises(ValueError):
        explore_step(st_, np.zeros((0, 2)), np.random.default_rng(0))


def test_explore_step_uniform():
    st_ = ClientState.fresh(0, 2)
    rng = np.random.default_rng(0)
    picks = [explore_step(st_, np.zeros((4, 2)), rng) for _ in range(8000)]
    assert np.allclose(np.bincount(picks) / 8000, 0.25, atol=0.02)


def test_update_and_trigger():
    rng = np.random.default_rng(1)
    s = ClientState.fresh(3, 3)
    assert trigger_score(s, LAM) == 0.0
    assert not check_trigger(s, 0.0, LAM)
    xs = unit(rng, 5, 3)
    for x in xs:
        update_local(s, x, 1.0)
    assert s.stats.dt == 5
    assert np.allclose(s.stats.V, xs.T @ xs)
    assert len(s.history) == 5
    expected = 5 * (np.linalg.slogdet(xs.T @ xs + LAM * np.eye(3))[1] - 3 * math.log(LAM))
    assert trigger_score(s, LAM) == pytest.approx(expected)
    assert check_trigger(s, expected, LAM)
    assert not check_trigger(s, expected + 1e-6, LAM)
    with pytest.raises(ValueError):
        check_trigger(s, 1.0, -1.0)


def test_apply_sync_zeroes_buffers():
    s = ClientState.fresh(0, 2)
    update_local(s, np.array([1.0, 0.0]), 2.0)
    V_sync = np.diag([1.0, 1.0])
    b_sync = np.array([2.0, 3.0])
    apply_sync(s, V_sync, b_sync)
    assert np.allclose(s.stats.V, V_sync)
    assert np.allclose(s.stats.b, b_sync)
    assert s.stats.dt == 0 and not s.stats.dV.any() and not s.stats.db.any()
    d = s.to_dict()
    assert d["id"] == 0 and len(d["X"]) == 1


def test_pool_matches_single_client_reference():
    rng = np.random.default_rng(5)
    n, d, T = 4, 3, 60
    pool = ClientPool(n, d, LAM, T)
    states = [ClientState.fresh(i, d) for i in range(n)]
    for t in range(T):
        ctx = unit(rng, n, 6, d)
        choice = pool.select_ucb(ctx, SIGMA, DELTA)
        for i in range(n):
            assert choice[i] == ucb_select(states[i], ctx[i], LAM, SIGMA, DELTA)
        x = ctx[np.arange(n), choice]
        y = rng.standard_normal(n)
        pool.observe(x, y)
        for i in range(n):
            update_local(states[i], x[i], y[i])
        assert np.allclose(pool.trigger_scores(), [trigger_score(s, LAM) for s in states], atol=1e-8)
        if t % 17 == 16:
            members = [0, 2]
            V_sync, b_sync = pool.sync(members)
            for i in members:
                apply_sync(states[i], V_sync, b_sync)
    for i in range(n):
        ref = states[i].stats
        got = pool.state(i).stats
        assert np.allclose(got.V, ref.V) and np.allclose(got.b, ref.b)
        assert np.allclose(got.dV, ref.dV) and got.dt == ref.dt
        Vbar = ref.V + LAM * np.eye(d)
        assert np.allclose(pool.Vinv[i], np.linalg.inv(Vbar), atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), steps=st.integers(1, 80))
def test_incremental_inverse_tracks_exact(seed, steps):
    rng = np.random.default_rng(seed)
    pool = ClientPool(2, 4, LAM, steps)
    for _ in range(steps):
        pool.observe(unit(rng, 2, 4), rng.standard_normal(2))
    Vinv, logdet = pool.Vinv.copy(), pool.logdet.copy()
    pool.refresh()
    assert np.allclose(Vinv, pool.Vinv, atol=1e-8)
    assert np.allclose(logdet, pool.logdet, atol=1e-8)


def test_pool_sync_aggregates_member_buffers():
    rng = np.random.default_rng(2)
    pool = ClientPool(3, 2, LAM, 10)
    for _ in range(4):
        pool.observe(unit(rng, 3, 2), rng.standard_normal(3))
    before = pool.dV.copy()
    V_sync, _ = pool.sync([0, 1])
    assert np.allclose(V_sync, before[0] + before[1])
    assert np.allclose(pool.V[0], pool.V[1])
    assert not pool.dV[[0, 1]].any() and pool.dt[0] == 0
    assert np.allclose(pool.dV[2], before[2]) and pool.dt[2] == 4
    assert pool.trigger_scores()[0] == 0.0
    # the observation record is never touched by syncs
    assert np.allclose(pool.G[0], pool.X[0, :4].T @ pool.X[0, :4])
