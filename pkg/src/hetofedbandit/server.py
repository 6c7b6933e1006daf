"""Federation server: homogeneity tests, clique clustering, sync queue."""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .numerics import (
    PINV_RTOL,
    NoncentralChiSq,
    gram_rank,
    lambda_extremes,
    matrix_rank,
    mle_from_gram,
    nc_chisq_quantile,
    ncx2_cdf_array,
    pinv_psd,
)

log = logging.getLogger(__name__)

MAX_CLIQUES = 1_000_000


class CliqueLimitError(RuntimeError):
    pass


def _gram_parts(h) -> tuple[np.ndarray, np.ndarray]:
    """(X^T X, X^T y) from a history object, an (X, y) pair or a (G, c) pair."""
    if hasattr(h, "arrays"):
        X, y = h.arrays()
    else:
        X, y = h
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("homogeneity test needs non-empty histories")
    if X.shape[0] != y.shape[0]:
        raise ValueError("history X and y lengths differ")
    return X.T @ X, X.T @ y


def raw_statistic(G1, c1, G2, c2, sigma: float) -> float:
    """Unclamped test statistic from Gram forms."""
    th1 = mle_from_gram(G1, c1)
    th2 = mle_from_gram(G2, c2)
    th12 = mle_from_gram(G1 + G2, c1 + c2)
    e1, e2 = th1 - th12, th2 - th12
    return float((e1 @ G1 @ e1 + e2 @ G2 @ e2) / sigma**2)


def homogeneity_statistic(h1, h2, sigma: float) -> float:
    """Chi-squared homogeneity statistic between two clients' observation histories.

    ``||X1 (t1 - t12)||^2 + ||X2 (t2 - t12)||^2`` over ``sigma^2``, evaluated
    from Gram matrices so raw rows never have to leave the client.
    """
    G1, c1 = _gram_parts(h1)
    G2, c2 = _gram_parts(h2)
    return max(raw_statistic(G1, c1, G2, c2, sigma), 0.0)


def homogeneity_df(X1, X2) -> int:
    X1 = np.atleast_2d(np.asarray(X1, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    if X1.shape[1] != X2.shape[1]:
        raise ValueError("design matrices have different column counts")
    return matrix_rank(X1) + matrix_rank(X2) - matrix_rank(np.vstack([X1, X2]))


def static_threshold(N: int, delta: float, df: int, sigma: float) -> float:
    """Quantile ``F^-1(1 - delta/N^2; df, 1/sigma^2)``; 0 for a degenerate (df=0) test."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if df <= 0:
        log.debug("degenerate homogeneity test (df=0): pair is always clustered")
        return 0.0
    return nc_chisq_quantile(1.0 - delta / N**2, NoncentralChiSq(int(df), 1.0 / sigma**2))


def _middle_lambda_max(G1: np.ndarray, G2: np.ndarray) -> float:
    M = G2 @ pinv_psd(G1 + G2) @ G1
    return lambda_extremes(M)[1]


def data_dependent_psi(G1: np.ndarray, G2: np.ndarray, N: int, sigma: float) -> float:
    lmax = max(lambda_extremes(G1)[1], lambda_extremes(G2)[1])
    if lmax <= 0:
        raise ValueError("both Gram matrices are zero")
    eps2 = 1.0 / (N**2 * lmax)
    return eps2 / sigma**2 * max(_middle_lambda_max(G1, G2), 0.0)


def data_dependent_threshold(X1, X2, N: int, delta: float, sigma: float) -> float:
    """Per-pair threshold whose non-centrality uses the pair's observed Gram mass."""
    X1 = np.atleast_2d(np.asarray(X1, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    G1, G2 = X1.T @ X1, X2.T @ X2
    psi = data_dependent_psi(G1, G2, N, sigma)
    df = homogeneity_df(X1, X2)
    if df <= 0:
        return 0.0
    return nc_chisq_quantile(1.0 - delta / N**2, NoncentralChiSq(df, psi))


@dataclass
class ClientGraph:
    n: int
    adj: np.ndarray = None  # (n, n) bool

    def __post_init__(self):
        if self.adj is None:
            self.adj = np.zeros((self.n, self.n), dtype=bool)
        self.adj = np.asarray(self.adj, dtype=bool)
        np.fill_diagonal(self.adj, False)
        if not np.array_equal(self.adj, self.adj.T):
            raise ValueError("client graph adjacency must be symmetric")

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]]) -> "ClientGraph":
        adj = np.zeros((n, n), dtype=bool)
        for i, j in edges:
            if i != j:
                adj[i, j] = adj[j, i] = True
        return cls(n, adj)

    def add_edge(self, i: int, j: int) -> None:
        if i != j:
            self.adj[i, j] = self.adj[j, i] = True

    @property
    def edges(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.adj, 1))
        return list(zip(i.tolist(), j.tolist()))

    def neighbors(self, i: int) -> set[int]:
        return set(np.flatnonzero(self.adj[i]).tolist())


def maximal_cliques(graph: ClientGraph, limit: int = MAX_CLIQUES) -> list[tuple[int, ...]]:
    """All maximal cliques (Bron-Kerbosch with Tomita pivoting), canonically ordered."""
    nbrs = [graph.neighbors(i) for i in range(graph.n)]
    out: list[tuple[int, ...]] = []
    # explicit stack avoids recursion limits on dense graphs
    stack = [(set(), set(range(graph.n)), set())]
    while stack:
        R, P, X = stack.pop()
        if not P and not X:
            out.append(tuple(sorted(R)))
            if len(out) > limit:
                raise CliqueLimitError(f"more than {limit} maximal cliques")
            continue
        pivot = max(P | X, key=lambda u: len(P & nbrs[u]))
        for v in sorted(P - nbrs[pivot]):
            stack.append((R | {v}, P & nbrs[v], X & nbrs[v]))
            P = P - {v}
            X = X | {v}
    return sorted(out)


def cluster_thresholds(clusters: Sequence[Sequence[int]], T: int, d: int) -> np.ndarray:
    """Per-cluster communication threshold ``T log(|C| T) / (d |C|)``."""
    sizes = np.array([len(c) for c in clusters], dtype=float)
    return T * np.log(sizes * T) / (d * sizes)


@dataclass
class ClusterSet:
    clusters: list[tuple[int, ...]]
    thresholds: np.ndarray
    n: int
    memberships: list[tuple[int, ...]] = field(init=False)

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=float)
        mem: list[list[int]] = [[] for _ in range(self.n)]
        for k, c in enumerate(self.clusters):
            for i in c:
                mem[i].append(k)
        self.memberships = [tuple(m) for m in mem]

    @classmethod
    def from_clusters(cls, clusters, n: int, T: int, d: int) -> "ClusterSet":
        clusters = [tuple(sorted(c)) for c in clusters]
        return cls(clusters, cluster_thresholds(clusters, T, d), n)

    def min_threshold(self) -> np.ndarray:
        """Smallest threshold over each client's clusters (inf when unclustered)."""
        out = np.full(self.n, np.inf)
        for i, ks in enumerate(self.memberships):
            if ks:
                out[i] = self.thresholds[list(ks)].min()
        return out

    def matches(self, truth_clusters: Iterable[Iterable[int]]) -> bool:
        return {frozenset(c) for c in self.clusters} == {frozenset(c) for c in truth_clusters}


class SyncQueue:
    """Pending cluster indices; FIFO or priority by summed client trigger scores."""

    def __init__(self, mode: str = "fifo"):
        if mode not in ("fifo", "priority"):
            raise ValueError(f"unknown queue mode {mode!r}")
        self.mode = mode
        self._items: deque[int] = deque()

    def __len__(self):
        return len(self._items)

    def __contains__(self, k):
        return k in self._items

    def contents(self) -> list[int]:
        return list(self._items)

    def clear(self) -> None:
        self._items.clear()

    def enqueue(self, k: int) -> None:
        if k not in self._items:
            self._items.append(k)

    def pop_next(self, clusters: Sequence[Sequence[int]] | None = None, client_scores=None):
        if not self._items:
            return None
        if self.mode == "fifo":
            return self._items.popleft()
        scores = np.asarray(client_scores, dtype=float)
        best = max(self._items, key=lambda k: (float(scores[list(clusters[k])].sum()), -k))
        self._items.remove(best)
        return best


def sync_cost(size: int, d: int) -> int:
    """Scalars moved by one cluster sync: upload plus download of (dV, db)."""
    return 2 * size * (d * d + d)


def serve_cluster(members: Sequence[int], pool) -> int:
    pool.sync(members)
    return sync_cost(len(members), pool.d)


def _pair_pinv(S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched pseudo-inverse and numerical rank of symmetric PSD matrices.

    When every matrix is provably full rank at the eigen tolerance (Cholesky
    succeeds and ``tr(S) tr(S^-1) < 1/PINV_RTOL``, which bounds the condition
    number) a plain inverse is used; otherwise the eigen decomposition.
    """
    d = S.shape[-1]
    try:
        np.linalg.cholesky(S)
        Sinv = np.linalg.inv(S)
        tr = np.trace(S, axis1=-2, axis2=-1) * np.trace(Sinv, axis1=-2, axis2=-1)
        if np.all(tr < 1.0 / PINV_RTOL):
            return Sinv, np.full(S.shape[0], d)
    except np.linalg.LinAlgError:
        pass
    w, Q = np.linalg.eigh(S)
    wmax = np.max(np.abs(w), axis=-1, keepdims=True)
    keep = w > PINV_RTOL * np.maximum(wmax, np.finfo(float).tiny)
    inv_w = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    return (Q * inv_w[:, None, :]) @ np.swapaxes(Q, -1, -2), keep.sum(axis=1)


def pairwise_tests(
    G: np.ndarray,
    c: np.ndarray,
    sigma: float,
    N: int,
    delta: float,
    rule: str = "static",
    upsilon: float | None = None,
) -> tuple[np.ndarray, dict]:
    """Run every pairwise homogeneity test at once.

    Returns the boolean adjacency and a dict with the statistic, df and (for the
    data-dependent rule) non-centrality matrices.  The comparison ``s <= F^-1(p)``
    is evaluated as ``F(s) <= p``, which is equivalent for a continuous CDF.
    """
    n, d = c.shape
    iu, ju = np.triu_indices(n, 1)
    theta = mle_from_gram(G, c)
    rank = gram_rank(G)
    S = G[iu] + G[ju]
    Sinv, pair_rank = _pair_pinv(0.5 * (S + np.swapaxes(S, -1, -2)))
    th12 = np.einsum("pij,pj->pi", Sinv, c[iu] + c[ju])
    e1 = theta[iu] - th12
    e2 = theta[ju] - th12
    s = (np.einsum("pi,pij,pj->p", e1, G[iu], e1) + np.einsum("pi,pij,pj->p", e2, G[ju], e2)) / sigma**2
    s = np.maximum(s, 0.0)
    df = rank[iu] + rank[ju] - pair_rank
    info = {"pairs": (iu, ju), "s": s, "df": df}
    p = 1.0 - delta / N**2
    if rule == "static" and upsilon is not None:
        edge = s <= upsilon
        info["psi"] = np.full(s.shape, np.nan)
    elif rule == "static":
        psi_c = 1.0 / sigma**2
        thr = np.array([static_threshold(N, delta, int(k), sigma) if k > 0 else 0.0 for k in range(d + 1)])
        edge = (df <= 0) | (s <= thr[np.clip(df, 0, d)])
        info["psi"] = np.full(s.shape, psi_c)
    elif rule == "data":
        lmax = np.linalg.eigvalsh(G)[:, -1]
        pair_lmax = np.maximum(lmax[iu], lmax[ju])
        mid = G[ju] @ Sinv @ G[iu]
        mid_lmax = np.linalg.eigvalsh(0.5 * (mid + np.swapaxes(mid, -1, -2)))[:, -1]
        with np.errstate(divide="ignore", invalid="ignore"):
            psi = np.where(pair_lmax > 0, np.maximum(mid_lmax, 0.0) / (N**2 * pair_lmax * sigma**2), 0.0)
        info["psi"] = psi
        edge = df <= 0
        live = ~edge
        if np.any(live):
            edge[live] = ncx2_cdf_array(s[live], df[live], psi[live]) <= p
    else:
        raise ValueError(f"unknown threshold rule {rule!r}")
    adj = np.zeros((n, n), dtype=bool)
    adj[iu[edge], ju[edge]] = True
    adj |= adj.T
    return adj, info


def build_client_graph(
    histories: Sequence,
    sigma: float,
    delta: float,
    rule: str = "static",
    upsilon: float | None = None,
) -> ClientGraph:
    """Client graph from per-client histories (objects with ``arrays()`` or (X, y) pairs)."""
    parts = [_gram_parts(h) for h in histories]
    G = np.stack([p[0] for p in parts])
    c = np.stack([p[1] for p in parts])
    adj, _ = pairwise_tests(G, c, sigma, len(parts), delta, rule, upsilon)
    return ClientGraph(len(parts), adj)


class FederationServer:
    """Single logical coordinator holding graph, clusters, queue and comm count."""

    def __init__(self, n: int, d: int, T: int, sigma: float, delta: float, queue_mode: str = "fifo",
                 upsilon: float | None = None):
        self.n, self.d, self.T = n, d, T
        self.sigma, self.delta = sigma, delta
        self.upsilon = upsilon
        self.queue = SyncQueue(queue_mode)
        self.graph = ClientGraph(n)
        self.clusters: ClusterSet | None = None
        self.comm_cost = 0
        self.n_syncs = 0
        self.n_reclusters = 0

    def set_clusters(self, clusters: Sequence[Sequence[int]]) -> ClusterSet:
        self.clusters = ClusterSet.from_clusters(clusters, self.n, self.T, self.d)
        return self.clusters

    def estimate_clusters(self, G: np.ndarray, c: np.ndarray, rule: str = "static") -> ClusterSet:
        adj, _ = pairwise_tests(G, c, self.sigma, self.n, self.delta, rule, self.upsilon)
        self.graph = ClientGraph(self.n, adj)
        return self.set_clusters(maximal_cliques(self.graph))

    def serve(self, pool, client_scores=None) -> int | None:
        k = self.queue.pop_next(self.clusters.clusters, client_scores)
        if k is None:
            return None
        cost = serve_cluster(self.clusters.clusters[k], pool)
        self.comm_cost += cost
        self.n_syncs += 1
        return k

    def snapshot(self) -> dict:
        return {
            "n": self.n,
            "edges": [list(e) for e in self.graph.edges],
            "clusters": [list(c) for c in self.clusters.clusters] if self.clusters else [],
            "thresholds": self.clusters.thresholds.tolist() if self.clusters else [],
            "queue": self.queue.contents(),
            "queue_mode": self.queue.mode,
            "comm_cost": self.comm_cost,
        }

    def snapshot_json(self) -> str:
        return json.dumps(self.snapshot())
