"""Reference algorithms: independent LinUCB per client and homogeneous DisLinUCB."""

from __future__ import annotations

import enum

import numpy as np

from .client import ClientPool
from .server import ClusterSet


class BaselineKind(str, enum.Enum):
    NINDEP = "NIndepLinUCB"
    DISLINUCB = "DisLinUCB"


def nindep_step(pool: ClientPool, contexts: np.ndarray, sigma: float, delta: float) -> np.ndarray:
    """Each client picks its own UCB arm; there is never any communication."""
    return pool.select_ucb(contexts, sigma, delta)


def dislinucb_clusters(n: int, T: int, d: int) -> ClusterSet:
    """One cluster holding every client, threshold ``T log(NT) / (d N)``."""
    return ClusterSet.from_clusters([tuple(range(n))], n, T, d)


def dislinucb_run(config, seed: int | None = None):
    from dataclasses import replace

    from .harness import Algorithm, run

    return run(replace(config, algorithm=Algorithm.DISLINUCB), seed)
