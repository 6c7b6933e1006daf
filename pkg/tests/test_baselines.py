import numpy as np

from hetofedbandit.baselines import BaselineKind, dislinucb_clusters, dislinucb_run, nindep_step
from hetofedbandit.client import ClientPool, ClientState, ucb_select
from hetofedbandit.environment import EnvConfig
from hetofedbandit.harness import Algorithm, RunConfig, run


def test_kinds_match_algorithms():
    assert {k.value for k in BaselineKind} == {Algorithm.NINDEP.value, Algorithm.DISLINUCB.value}


def test_dislinucb_single_cluster_threshold():
    cs = dislinucb_clusters(6, 1000, 5)
    assert cs.clusters == [tuple(range(6))]
    assert cs.thresholds[0] == np.float64(1000 * np.log(6 * 1000) / (5 * 6))


def test_nindep_step_is_per_client_ucb():
    rng = np.random.default_rng(0)
    pool = ClientPool(3, 4, 0.1, 10)
    for _ in range(5):
        pool.observe(rng.standard_normal((3, 4)), rng.standard_normal(3))
    ctx = rng.standard_normal((3, 7, 4))
    got = nindep_step(pool, ctx, 0.1, 0.1)
    for i in range(3):
        assert got[i] == ucb_select(pool.state(i), ctx[i], 0.1, 0.1, 0.1)


def test_dislinucb_run_and_zero_nindep_cost():
    env = EnvConfig(d=4, K=40, N=5, M=1, T=200, sigma=0.1, arms_per_round=6)
    cfg = RunConfig(env, Algorithm.NINDEP)
    tr = dislinucb_run(cfg, 1)
    assert tr.algorithm == "DisLinUCB" and tr.n_syncs > 0 and tr.T0 == 0
    ind = run(cfg, 1)
    assert ind.final_comm == 0
    # homogeneous clients gain from pooling
    assert tr.final_regret < ind.final_regret


def test_dislinucb_single_client_equals_linucb():
    env = EnvConfig(d=3, K=20, N=1, M=1, T=200, sigma=0.1, arms_per_round=5)
    a = run(RunConfig(env, Algorithm.DISLINUCB), 4)
    b = run(RunConfig(env, Algorithm.NINDEP), 4)
    assert np.array_equal(a.cum_regret, b.cum_regret)
