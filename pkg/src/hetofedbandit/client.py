"""Client-side bandit logic: exploration, UCB selection, buffers and triggers.

Two forms are provided.  ``ClientState`` and the free functions operate on a
single client and are written for clarity; ``ClientPool`` keeps every client's
statistics in stacked arrays so a simulation step is a handful of batched numpy
calls.  The pool maintains ``(V + lam I)^-1`` and ``logdet(V + lam I)`` with
rank-one updates and refreshes them exactly after every sync.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import logdet, ridge_estimate


@dataclass
class SufficientStats:
    V: np.ndarray
    b: np.ndarray
    dV: np.ndarray
    db: np.ndarray
    dt: int = 0

    @classmethod
    def zeros(cls, d: int) -> "SufficientStats":
        return cls(np.zeros((d, d)), np.zeros(d), np.zeros((d, d)), np.zeros(d), 0)


@dataclass
class ObservationHistory:
    d: int
    X: list = field(default_factory=list)
    y: list = field(default_factory=list)

    def append(self, x, r) -> None:
        self.X.append(np.asarray(x, dtype=float))
        self.y.append(float(r))

    def __len__(self):
        return len(self.y)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.y:
            return np.zeros((0, self.d)), np.zeros(0)
        return np.vstack(self.X), np.asarray(self.y)


@dataclass
class ClientState:
    id: int
    stats: SufficientStats
    history: ObservationHistory
    memberships: tuple[int, ...] = ()

    @classmethod
    def fresh(cls, client_id: int, d: int) -> "ClientState":
        return cls(client_id, SufficientStats.zeros(d), ObservationHistory(d))

    @property
    def d(self) -> int:
        return self.stats.b.shape[0]

    def to_dict(self) -> dict:
        X, y = self.history.arrays()
        s = self.stats
        return {
            "id": self.id,
            "V": s.V.tolist(),
            "b": s.b.tolist(),
            "dV": s.dV.tolist(),
            "db": s.db.tolist(),
            "dt": s.dt,
            "X": X.tolist(),
            "y": y.tolist(),
            "memberships": list(self.memberships),
        }


def confidence_width(logdet_vbar: float, d: int, lam: float, sigma: float, delta: float) -> float:
    """alpha = sigma * sqrt(2 log(det(Vbar)^1/2 / (delta det(lam I)^1/2))) + sqrt(lam)."""
    inner = logdet_vbar - d * math.log(lam) + 2.0 * math.log(1.0 / delta)
    return sigma * math.sqrt(max(inner, 0.0)) + math.sqrt(lam)


def explore_step(state: ClientState, contexts: np.ndarray, rng: np.random.Generator) -> int:
    if len(contexts) == 0:
        raise ValueError("empty action set")
    return int(rng.integers(len(contexts)))


def ucb_scores(state: ClientState, contexts: np.ndarray, lam: float, sigma: float, delta: float) -> np.ndarray:
    d = state.d
    Vbar = state.stats.V + lam * np.eye(d)
    theta = ridge_estimate(Vbar, state.stats.b)
    alpha = confidence_width(logdet(Vbar), d, lam, sigma, delta)
    contexts = np.atleast_2d(contexts)
    sol = np.linalg.solve(Vbar, contexts.T).T
    width = np.sqrt(np.maximum(np.sum(contexts * sol, axis=1), 0.0))
    return contexts @ theta + alpha * width


def ucb_select(state: ClientState, contexts: np.ndarray, lam: float, sigma: float, delta: float) -> int:
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if len(contexts) == 0:
        raise ValueError("empty action set")
    # np.argmax returns the lowest index among ties
    return int(np.argmax(ucb_scores(state, contexts, lam, sigma, delta)))


def update_local(state: ClientState, x: np.ndarray, y: float) -> None:
    s = state.stats
    xx = np.outer(x, x)
    s.V += xx
    s.b += x * y
    s.dV += xx
    s.db += x * y
    s.dt += 1
    state.history.append(x, y)


def trigger_score(state: ClientState, lam: float) -> float:
    s = state.stats
    if s.dt == 0:
        return 0.0
    reg = lam * np.eye(state.d)
    return s.dt * (logdet(s.V + reg) - logdet(s.V - s.dV + reg))


def check_trigger(state: ClientState, threshold: float, lam: float) -> bool:
    if lam <= 0:
        raise ValueError("lambda must be positive")
    score = trigger_score(state, lam)
    return score > 0 and score >= threshold


def apply_sync(state: ClientState, V_sync: np.ndarray, b_sync: np.ndarray) -> None:
    s = state.stats
    s.V += V_sync - s.dV
    s.b += b_sync - s.db
    s.dV = np.zeros_like(s.dV)
    s.db = np.zeros_like(s.db)
    s.dt = 0


class ClientPool:
    """Stacked state of ``n`` clients.

    Besides the sufficient statistics the pool records each client's own
    observations (``X``, ``y``) and their Gram forms, which are what the server
    needs for homogeneity testing.
    """

    def __init__(self, n: int, d: int, lam: float, horizon: int):
        if lam <= 0:
            raise ValueError("lambda must be positive")
        self.n, self.d, self.lam = n, d, lam
        self.V = np.zeros((n, d, d))
        self.b = np.zeros((n, d))
        self.dV = np.zeros((n, d, d))
        self.db = np.zeros((n, d))
        self.dt = np.zeros(n, dtype=np.int64)
        self.Vinv = np.broadcast_to(np.eye(d) / lam, (n, d, d)).copy()
        self.logdet = np.full(n, d * math.log(lam))
        # logdet(V - dV + lam I): constant between syncs
        self.logdet_base = self.logdet.copy()
        self.G = np.zeros((n, d, d))
        self.c = np.zeros((n, d))
        self.q = np.zeros(n)
        self.n_obs = np.zeros(n, dtype=np.int64)
        self.X = np.zeros((n, horizon, d))
        self.y = np.zeros((n, horizon))

    def select_random(self, k: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, k, size=self.n)

    def ucb_scores(self, contexts: np.ndarray, sigma: float, delta: float) -> np.ndarray:
        """UCB index of every arm for every client; ``contexts`` has shape (n, k, d)."""
        theta = np.einsum("nij,nj->ni", self.Vinv, self.b)
        inner = self.logdet - self.d * math.log(self.lam) + 2.0 * math.log(1.0 / delta)
        alpha = sigma * np.sqrt(np.maximum(inner, 0.0)) + math.sqrt(self.lam)
        proj = contexts @ self.Vinv
        width = np.sqrt(np.maximum(np.einsum("nkd,nkd->nk", proj, contexts), 0.0))
        return np.einsum("nkd,nd->nk", contexts, theta) + alpha[:, None] * width

    def select_ucb(self, contexts: np.ndarray, sigma: float, delta: float) -> np.ndarray:
        return np.argmax(self.ucb_scores(contexts, sigma, delta), axis=1)

    def observe(self, x: np.ndarray, y: np.ndarray) -> None:
        """Every client records one observation: rows of ``x`` (n, d), rewards ``y`` (n,)."""
        xx = x[:, :, None] * x[:, None, :]
        xy = x * y[:, None]
        self.V += xx
        self.b += xy
        self.dV += xx
        self.db += xy
        self.dt += 1
        self.G += xx
        self.c += xy
        self.q += y * y
        rows = np.arange(self.n)
        self.X[rows, self.n_obs] = x
        self.y[rows, self.n_obs] = y
        self.n_obs += 1
        # Sherman-Morrison and the matrix determinant lemma
        u = np.einsum("nij,nj->ni", self.Vinv, x)
        denom = 1.0 + np.einsum("ni,ni->n", x, u)
        self.Vinv -= u[:, :, None] * u[:, None, :] / denom[:, None, None]
        self.logdet += np.log(denom)

    def trigger_scores(self) -> np.ndarray:
        return self.dt * (self.logdet - self.logdet_base)

    def refresh(self, members=None) -> None:
        """Recompute inverse and log-determinant exactly (drift control)."""
        idx = np.arange(self.n) if members is None else np.asarray(members, dtype=int)
        Vbar = self.V[idx] + self.lam * np.eye(self.d)
        L = np.linalg.cholesky(0.5 * (Vbar + np.swapaxes(Vbar, -1, -2)))
        self.logdet[idx] = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
        Linv = np.linalg.inv(L)
        self.Vinv[idx] = np.swapaxes(Linv, -1, -2) @ Linv
        if members is None:
            # base only moves at syncs; recompute it from V - dV to match
            base = self.V - self.dV + self.lam * np.eye(self.d)
            Lb = np.linalg.cholesky(0.5 * (base + np.swapaxes(base, -1, -2)))
            self.logdet_base = 2.0 * np.sum(np.log(np.diagonal(Lb, axis1=-2, axis2=-1)), axis=-1)

    def buffer_sums(self, members) -> tuple[np.ndarray, np.ndarray]:
        members = list(members)
        return self.dV[members].sum(axis=0), self.db[members].sum(axis=0)

    def sync(self, members) -> tuple[np.ndarray, np.ndarray]:
        """Aggregate the members' buffers and apply the sync to each member."""
        members = np.asarray(sorted(members), dtype=int)
        V_sync, b_sync = self.buffer_sums(members)
        self.V[members] += V_sync - self.dV[members]
        self.b[members] += b_sync - self.db[members]
        self.dV[members] = 0.0
        self.db[members] = 0.0
        self.dt[members] = 0
        self.refresh(members)
        self.logdet_base[members] = self.logdet[members]
        return V_sync, b_sync

    def state(self, i: int, memberships: tuple[int, ...] = ()) -> ClientState:
        k = int(self.n_obs[i])
        hist = ObservationHistory(self.d, list(self.X[i, :k].copy()), list(self.y[i, :k]))
        stats = SufficientStats(
            self.V[i].copy(), self.b[i].copy(), self.dV[i].copy(), self.db[i].copy(), int(self.dt[i])
        )
        return ClientState(i, stats, hist, tuple(memberships))
