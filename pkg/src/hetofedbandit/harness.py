"""Simulation loop, presets, exploration-length formula and CSV output."""

from __future__ import annotations

import csv
import enum
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .baselines import dislinucb_clusters, nindep_step
from .client import ClientPool
from .environment import EnvConfig, Environment, generate_environment, sample_indices
from .numerics import NoncentralChiSq, nc_chisq_quantile
from .server import FederationServer, serve_cluster, static_threshold

# exact recomputation of cached inverses every this many steps
REFRESH_EVERY = 250


class Algorithm(str, enum.Enum):
    HFB = "HetoFedBandit"
    HFB_E = "HetoFedBandit-E"
    HFB_PQ = "HetoFedBandit-PQ"
    HFB_DR = "HetoFedBandit-DR"
    NINDEP = "NIndepLinUCB"
    DISLINUCB = "DisLinUCB"

    @property
    def clustered(self) -> bool:
        return self in (Algorithm.HFB, Algorithm.HFB_E, Algorithm.HFB_PQ, Algorithm.HFB_DR)

    @property
    def reclusters(self) -> bool:
        return self in (Algorithm.HFB_E, Algorithm.HFB_DR)

    @property
    def default_queue(self) -> str:
        return "priority" if self in (Algorithm.HFB_E, Algorithm.HFB_PQ) else "fifo"


@dataclass
class RunConfig:
    env: EnvConfig
    algorithm: Algorithm = Algorithm.HFB
    T0: int = 0
    lam: float = 0.1
    delta: float = 0.1
    upsilon_override: float | None = None
    seeds: list[int] = field(default_factory=lambda: [0])
    queue: str | None = None  # overrides the variant's default queue mode

    def __post_init__(self):
        self.algorithm = Algorithm(self.algorithm)
        if not 0 <= self.T0 <= self.env.T:
            raise ValueError(f"T0={self.T0} must lie in [0, T={self.env.T}]")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.env.sigma <= 0:
            raise ValueError("sigma must be positive for the bandit algorithms")
        if self.queue not in (None, "fifo", "priority"):
            raise ValueError(f"unknown queue mode {self.queue!r}")
        if not self.seeds:
            raise ValueError("at least one seed is required")

    @property
    def queue_mode(self) -> str:
        return self.queue or self.algorithm.default_queue

    def to_dict(self) -> dict:
        out = asdict(self)
        out["algorithm"] = self.algorithm.value
        out["lambda"] = out.pop("lam")
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        env = EnvConfig(**raw.pop("env"))
        if "lambda" in raw:
            raw["lam"] = raw.pop("lambda")
        return cls(env=env, **raw)


@dataclass
class SimTrace:
    algorithm: str
    seed: int
    cum_regret: np.ndarray  # (T + 1,), entry 0 is 0
    comm_cost: np.ndarray  # (T + 1,)
    clusters: list[tuple[int, ...]] | None = None
    clustering_correct: bool | None = None
    T0: int = 0
    n_syncs: int = 0
    n_reclusters: int = 0
    seconds: float = 0.0

    @property
    def final_regret(self) -> float:
        return float(self.cum_regret[-1])

    @property
    def final_comm(self) -> int:
        return int(self.comm_cost[-1])


def _streams(seed: int) -> dict[str, np.random.Generator]:
    # shared by all algorithms for a seed, so comparisons see the same arms and noise
    return {
        name: np.random.default_rng(np.random.SeedSequence([seed, k]))
        for k, name in enumerate(("arms", "noise", "explore"), start=1)
    }


def gram_upload_cost(n: int, d: int) -> int:
    return n * (d * d + d)


def recluster_upload_cost(n: int, d: int) -> int:
    return n * (d * d + d + 1)


class Simulation:
    """One (config, seed) run, advanced one step at a time."""

    def __init__(self, config: RunConfig, seed: int | None = None,
                 observer: Callable[[str, dict], None] | None = None,
                 env: Environment | None = None):
        self.config = config
        self.seed = config.seeds[0] if seed is None else seed
        self.env = env or generate_environment(replace(config.env, seed=self.seed))
        cfg = self.env.config
        self.N, self.d, self.T = cfg.N, cfg.d, cfg.T
        self.alg = config.algorithm
        self.T0 = config.T0 if self.alg.clustered else 0
        self.sigma, self.delta = cfg.sigma, config.delta
        self.rng = _streams(self.seed)
        self.pool = ClientPool(self.N, self.d, config.lam, self.T)
        self.server = FederationServer(self.N, self.d, self.T, self.sigma, self.delta,
                                       config.queue_mode, config.upsilon_override)
        if self.alg is Algorithm.DISLINUCB:
            self.server.clusters = dislinucb_clusters(self.N, self.T, self.d)
        self.observer = observer
        self.t = 0
        self.regret = np.zeros(self.T + 1)
        self.comm = np.zeros(self.T + 1, dtype=np.int64)
        self._rows = np.arange(self.N)
        if self.alg.clustered and self.T0 == 0:
            # no exploration: every pair test is degenerate, so one all-client clique
            self._end_exploration()

    # -- events -------------------------------------------------------------
    def _emit(self, kind: str, **payload) -> None:
        if self.observer is not None:
            self.observer(kind, dict(payload, t=self.t, sim=self))

    # -- server actions -----------------------------------------------------
    def _cluster(self, G: np.ndarray, c: np.ndarray) -> None:
        rule = "data" if self.alg.reclusters else "static"
        self.server.estimate_clusters(G, c, rule)

    def _end_exploration(self) -> None:
        self.server.comm_cost += gram_upload_cost(self.N, self.d)
        self._cluster(self.pool.G, self.pool.c)
        self._emit("clustered", clusters=self.server.clusters.clusters)

    def _handle_triggers(self, x: np.ndarray) -> None:
        scores = self.pool.trigger_scores()
        clusters = self.server.clusters
        if self.alg.reclusters:
            floor = clusters.min_threshold()
            for i in range(self.N):
                if scores[i] <= 0 or scores[i] < floor[i]:
                    continue
                self.server.queue.clear()
                # clients after i have not acted yet this step
                later = self._rows > i
                xx = x[later][:, :, None] * x[later][:, None, :]
                G = self.pool.G.copy()
                c = self.pool.c.copy()
                G[later] -= xx
                c[later] -= x[later] * self._last_y[later][:, None]
                self.server.comm_cost += recluster_upload_cost(self.N, self.d)
                self.server.n_reclusters += 1
                self._cluster(G, c)
                clusters = self.server.clusters
                self._emit("clustered", clusters=clusters.clusters)
                floor = clusters.min_threshold()
                for k in clusters.memberships[i]:
                    self.server.queue.enqueue(k)
        else:
            for i in range(self.N):
                if scores[i] <= 0:
                    continue
                for k in clusters.memberships[i]:
                    if scores[i] >= clusters.thresholds[k]:
                        self.server.queue.enqueue(k)
        k = self.server.queue.pop_next(clusters.clusters, scores) if len(self.server.queue) else None
        if k is not None:
            members = clusters.clusters[k]
            pre = (self.pool.dV[list(members)].copy(), self.pool.db[list(members)].copy())
            self.server.comm_cost += self.server_serve(members)
            self._emit("sync", cluster=k, members=members, buffers=pre)

    def server_serve(self, members) -> int:
        self.server.n_syncs += 1
        return serve_cluster(members, self.pool)

    # -- main step ----------------------------------------------------------
    def step(self) -> None:
        self.t += 1
        t = self.t
        cfg = self.env.config
        idx = sample_indices(cfg.K, cfg.arms_per_round, self.rng["arms"], self.N)
        contexts = self.env.pool[idx]
        noise = self.sigma * self.rng["noise"].standard_normal(self.N)
        means = np.einsum("nkd,nd->nk", contexts, self.env.truth.theta_star)
        if t <= self.T0:
            choice = self.pool.select_random(cfg.arms_per_round, self.rng["explore"])
        else:
            choice = nindep_step(self.pool, contexts, self.sigma, self.delta)
        x = contexts[self._rows, choice]
        y = means[self._rows, choice] + noise
        self._last_y = y
        inst = means.max(axis=1) - means[self._rows, choice]
        self.pool.observe(x, y)
        self._emit("observe", x=x, y=y, choice=choice, contexts=contexts)
        if self.alg.clustered and t == self.T0:
            self._end_exploration()
        elif t > self.T0 and self.alg is not Algorithm.NINDEP:
            self._handle_triggers(x)
        if t % REFRESH_EVERY == 0:
            self.pool.refresh()
        self.regret[t] = self.regret[t - 1] + float(np.maximum(inst, 0.0).sum())
        self.comm[t] = self.server.comm_cost
        self._emit("step_end")

    def run(self) -> SimTrace:
        start = time.perf_counter()
        while self.t < self.T:
            self.step()
        return self.trace(time.perf_counter() - start)

    def trace(self, seconds: float = 0.0) -> SimTrace:
        clusters = correct = None
        if self.alg.clustered and self.server.clusters is not None:
            clusters = list(self.server.clusters.clusters)
            correct = self.server.clusters.matches(self.env.truth.clusters())
        return SimTrace(
            algorithm=self.alg.value,
            seed=self.seed,
            cum_regret=self.regret[: self.t + 1].copy(),
            comm_cost=self.comm[: self.t + 1].copy(),
            clusters=clusters,
            clustering_correct=correct,
            T0=self.T0,
            n_syncs=self.server.n_syncs,
            n_reclusters=self.server.n_reclusters,
            seconds=seconds,
        )


def run(config: RunConfig, seed: int | None = None, observer=None) -> SimTrace:
    """Execute one seeded simulation; deterministic given (config, seed)."""
    return Simulation(config, seed, observer).run()


def run_all(config: RunConfig) -> list[SimTrace]:
    return [run(config, s) for s in config.seeds]


def explore_and_cluster(config: RunConfig, seed: int | None = None) -> Simulation:
    """Advance a clustered variant through exploration and cluster estimation only."""
    if not config.algorithm.clustered:
        raise ValueError("cluster estimation needs a HetoFedBandit variant")
    sim = Simulation(config, seed)
    while sim.t < sim.T0:
        sim.step()
    return sim


def context_lambda_min(pool: np.ndarray) -> float:
    """Smallest eigenvalue of E[x x^T] for an arm drawn uniformly from the pool."""
    return float(np.linalg.eigvalsh(pool.T @ pool / pool.shape[0])[0])


def theoretical_T0(gamma: float, sigma: float, lambda_c: float, N: int, M: int, delta: float,
                   upsilon_c: float, d: int) -> int:
    """Exploration length ``16 psi_d sigma^2 / (lambda_c gamma^2)``, rounded up.

    ``psi_d`` is the ``delta / (N^2 (M - 1))`` quantile of a chi-squared law with
    ``d`` degrees of freedom and non-centrality ``upsilon_c``.  A single cluster
    needs no exploration, so ``M == 1`` returns 0.
    """
    if M <= 1:
        return 0
    if gamma <= 0 or lambda_c <= 0 or sigma <= 0:
        raise ValueError("gamma, lambda_c and sigma must be positive")
    p = delta / (N**2 * (M - 1))
    psi_d = nc_chisq_quantile(p, NoncentralChiSq(d, upsilon_c))
    return int(math.ceil(16.0 * psi_d * sigma**2 / (lambda_c * gamma**2)))


def theoretical_T0_for(config: RunConfig, seed: int | None = None, clip: float | None = 0.25) -> int:
    """Theoretical exploration length for a config, optionally clipped to ``clip * T``."""
    env_cfg = config.env
    env = generate_environment(replace(env_cfg, seed=config.seeds[0] if seed is None else seed))
    ups = static_threshold(env_cfg.N, config.delta, env_cfg.d, env_cfg.sigma)
    T0 = theoretical_T0(env_cfg.gamma, env_cfg.sigma, context_lambda_min(env.pool), env_cfg.N,
                        env_cfg.M, config.delta, ups, env_cfg.d)
    if clip is not None:
        T0 = min(T0, int(clip * env_cfg.T))
    return max(T0, 1)


def emit_csv(traces: list[SimTrace], path: str | Path) -> list[Path]:
    """Write one ``t,cum_regret,comm_cost`` file per run plus ``summary.csv``."""
    if not traces:
        raise ValueError("no traces to write")
    out = Path(path)
    written: list[Path] = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for tr in traces:
            f = out / f"{tr.algorithm}_seed{tr.seed}.csv"
            with f.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["t", "cum_regret", "comm_cost"])
                for t in range(1, len(tr.cum_regret)):
                    w.writerow([t, f"{tr.cum_regret[t]:.10g}", int(tr.comm_cost[t])])
            written.append(f)
        summary = out / "summary.csv"
        with summary.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["algorithm", "seed", "final_regret", "final_comm", "clustering_correct"])
            for tr in traces:
                flag = "" if tr.clustering_correct is None else str(bool(tr.clustering_correct)).lower()
                w.writerow([tr.algorithm, tr.seed, f"{tr.final_regret:.10g}", tr.final_comm, flag])
        written.append(summary)
    except OSError as exc:
        raise OSError(f"failed writing results under {out}: {exc}") from exc
    return written


def tight_static_threshold(N: int, delta: float, d: int, sigma: float) -> float:
    """``F^-1(1 - delta/N^2; d, 1/(N^2 sigma^2))``.

    The static threshold with the per-pair proximity ``eps^2 = 1/N^2`` in the
    non-centrality instead of 1.  Clients in one cluster differ by at most
    ``1/(N sqrt(T))``, so the smaller shift still covers every same-cluster pair
    while rejecting cross-cluster pairs after far less exploration.
    """
    return nc_chisq_quantile(1.0 - delta / N**2, NoncentralChiSq(d, 1.0 / (N**2 * sigma**2)))


@dataclass(frozen=True)
class Preset:
    env: EnvConfig
    T0_static: int  # HetoFedBandit, HetoFedBandit-PQ
    T0_recluster: int  # HetoFedBandit-E, HetoFedBandit-DR
    tight: bool = True

    def config(self, algorithm: Algorithm | str = Algorithm.HFB, seeds=None) -> RunConfig:
        alg = Algorithm(algorithm)
        T0 = 0
        if alg.clustered:
            T0 = self.T0_recluster if alg.reclusters else self.T0_static
        cfg = RunConfig(self.env, alg, T0=T0, seeds=list(range(10)) if seeds is None else list(seeds))
        if self.tight and alg.clustered and not alg.reclusters:
            cfg.upsilon_override = tight_static_threshold(self.env.N, cfg.delta, self.env.d, self.env.sigma)
        return cfg


def _sensitivity(M: int, gamma: float) -> EnvConfig:
    return EnvConfig(d=25, K=1000, N=30, M=M, T=3000, gamma=gamma, sigma=0.1, arms_per_round=25)


# tuned exploration lengths; smaller assumed separation gets a longer phase
PRESETS: dict[str, Preset] = {
    "synthetic-balanced": Preset(
        EnvConfig(d=25, K=1000, N=50, M=5, T=3000, gamma=0.85, sigma=0.1, arms_per_round=25), 50, 20),
    "synthetic-imbalanced": Preset(
        EnvConfig(d=25, K=1000, N=50, M=13, T=2500, gamma=0.85, sigma=0.1, arms_per_round=25,
                  cluster_sizes=[26] + [2] * 12), 50, 20),
    "sensitivity-1": Preset(_sensitivity(1, 0.85), 50, 20),
    "sensitivity-2": Preset(_sensitivity(4, 0.85), 50, 20),
    "sensitivity-3": Preset(_sensitivity(30, 0.85), 50, 20),
    "sensitivity-4": Preset(_sensitivity(4, 0.65), 55, 22),
    "sensitivity-5": Preset(_sensitivity(4, 0.05), 70, 30),
    "desk-small": Preset(
        EnvConfig(d=10, K=200, N=20, M=4, T=2000, gamma=0.85, sigma=0.1, arms_per_round=25), 12, 8),
}


def preset(name: str, algorithm: Algorithm | str = Algorithm.HFB, seeds=None) -> RunConfig:
    try:
        p = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
    return p.config(algorithm, seeds)


def load_config(path: str | Path) -> RunConfig:
    return RunConfig.from_dict(json.loads(Path(path).read_text()))
