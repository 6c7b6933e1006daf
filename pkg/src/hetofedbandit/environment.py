"""Synthetic heterogeneous linear bandit environment."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAX_REJECTION_ATTEMPTS = 100_000


class InfeasibleConfigError(ValueError):
    pass


@dataclass
class EnvConfig:
    d: int = 25
    K: int = 1000
    N: int = 50
    M: int = 5
    T: int = 3000
    gamma: float = 0.85
    sigma: float = 0.1
    arms_per_round: int = 25
    seed: int = 0
    # explicit cluster sizes (imbalanced presets); random assignment when None
    cluster_sizes: list[int] | None = None

    def __post_init__(self):
        for name in ("d", "K", "N", "M", "T", "arms_per_round"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.M > self.N:
            raise ValueError(f"M={self.M} exceeds N={self.N}")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.arms_per_round > self.K:
            raise ValueError(f"arms_per_round={self.arms_per_round} exceeds K={self.K}")
        if self.cluster_sizes is not None:
            self.cluster_sizes = [int(s) for s in self.cluster_sizes]
            if len(self.cluster_sizes) != self.M or sum(self.cluster_sizes) != self.N:
                raise ValueError("cluster_sizes must have M entries summing to N")
            if min(self.cluster_sizes) < 1:
                raise ValueError("cluster sizes must be positive")

    @property
    def epsilon(self) -> float:
        return 1.0 / (self.N * math.sqrt(self.T))


@dataclass
class GroundTruth:
    theta_star: np.ndarray  # (N, d)
    assignment: np.ndarray  # (N,) cluster index per client
    centers: np.ndarray  # (M, d)
    epsilon: float

    def clusters(self) -> list[tuple[int, ...]]:
        groups: dict[int, list[int]] = {}
        for i, k in enumerate(self.assignment):
            groups.setdefault(int(k), []).append(i)
        return sorted(tuple(g) for g in groups.values())


@dataclass
class ActionSet:
    indices: np.ndarray
    contexts: np.ndarray

    def __len__(self):
        return len(self.indices)


@dataclass
class Environment:
    config: EnvConfig
    truth: GroundTruth
    pool: np.ndarray  # (K, d) unit-norm arm contexts

    def to_json(self) -> str:
        payload = {
            "config": asdict(self.config),
            "theta_star": self.truth.theta_star.tolist(),
            "assignment": self.truth.assignment.tolist(),
            "centers": self.truth.centers.tolist(),
            "epsilon": self.truth.epsilon,
            "pool": self.pool.tolist(),
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "Environment":
        raw = json.loads(text)
        truth = GroundTruth(
            theta_star=np.asarray(raw["theta_star"], dtype=float),
            assignment=np.asarray(raw["assignment"], dtype=int),
            centers=np.asarray(raw["centers"], dtype=float),
            epsilon=float(raw["epsilon"]),
        )
        return cls(EnvConfig(**raw["config"]), truth, np.asarray(raw["pool"], dtype=float))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "Environment":
        return cls.from_json(Path(path).read_text())


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _sample_centers(cfg: EnvConfig, rng: np.random.Generator) -> np.ndarray:
    eps = cfg.epsilon
    min_gap = cfg.gamma + 2.0 * eps
    # shrink so every client (center + offset of norm <= eps/2) stays in the unit ball
    radius = 1.0 - eps / 2.0
    centers: list[np.ndarray] = []
    attempts = 0
    while len(centers) < cfg.M:
        if attempts >= MAX_REJECTION_ATTEMPTS:
            raise InfeasibleConfigError(
                f"could not place M={cfg.M} centers at pairwise distance >= gamma+2eps "
                f"(gamma={cfg.gamma}) after {MAX_REJECTION_ATTEMPTS} attempts"
            )
        attempts += 1
        cand = radius * _unit(rng.standard_normal(cfg.d))
        if all(np.linalg.norm(cand - c) >= min_gap for c in centers):
            centers.append(cand)
    return np.array(centers)


def generate_environment(cfg: EnvConfig) -> Environment:
    """Sample cluster centers, client parameters and the arm pool from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    centers = _sample_centers(cfg, rng)
    if cfg.cluster_sizes is None:
        assignment = rng.integers(0, cfg.M, size=cfg.N)
    else:
        assignment = np.repeat(np.arange(cfg.M), cfg.cluster_sizes)
        rng.shuffle(assignment)
    eps = cfg.epsilon
    # offsets of length <= eps/2 keep every intra-cluster pair within eps
    directions = _unit(rng.standard_normal((cfg.N, cfg.d)))
    radii = rng.uniform(0.0, eps / 2.0, size=cfg.N)
    theta = centers[assignment] + radii[:, None] * directions
    norms = np.linalg.norm(theta, axis=1)
    theta = theta / np.maximum(norms, 1.0)[:, None]
    pool = _unit(rng.standard_normal((cfg.K, cfg.d)))
    truth = GroundTruth(theta_star=theta, assignment=assignment, centers=centers, epsilon=eps)
    return Environment(cfg, truth, pool)


def check_assumptions(truth: GroundTruth, gamma: float, atol: float = 1e-12) -> bool:
    theta = truth.theta_star
    dist = np.linalg.norm(theta[:, None, :] - theta[None, :, :], axis=-1)
    same = truth.assignment[:, None] == truth.assignment[None, :]
    ok_within = np.all(dist[same] <= truth.epsilon + atol)
    ok_across = np.all(dist[~same] >= gamma - atol)
    return bool(ok_within and ok_across)


def sample_indices(K: int, k: int, rng: np.random.Generator, n: int = 1) -> np.ndarray:
    """``n`` independent uniform k-subsets of range(K), each sorted ascending."""
    if k == K:
        return np.tile(np.arange(K), (n, 1))
    keys = rng.random((n, K))
    idx = np.argpartition(keys, k - 1, axis=1)[:, :k]
    return np.sort(idx, axis=1)


def draw_action_set(pool: np.ndarray, cfg: EnvConfig, rng: np.random.Generator) -> ActionSet:
    idx = sample_indices(pool.shape[0], cfg.arms_per_round, rng)[0]
    return ActionSet(indices=idx, contexts=pool[idx])


def realize_reward(theta_star: np.ndarray, x: np.ndarray, sigma: float, rng: np.random.Generator) -> float:
    noise = sigma * rng.standard_normal() if sigma > 0 else 0.0
    return float(np.dot(theta_star, x) + noise)


def instant_regret(theta_star: np.ndarray, action_set: ActionSet | np.ndarray, chosen: int) -> float:
    contexts = action_set.contexts if isinstance(action_set, ActionSet) else np.asarray(action_set)
    if not 0 <= chosen < len(contexts):
        raise ValueError(f"chosen index {chosen} outside action set of size {len(contexts)}")
    values = contexts @ theta_star
    return float(max(values.max() - values[chosen], 0.0))
