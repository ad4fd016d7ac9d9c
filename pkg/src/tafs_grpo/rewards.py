"""Black-box reward functions and synthetic target distributions.

Rewards consume plain arrays and return plain arrays. Nothing here touches
the autodiff graph, so step functions and other non-differentiable scores are
fine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

# Quadrant ids: 0 = (+,+), 1 = (-,+), 2 = (-,-), 3 = (+,-)
QUADRANT_SIGNS = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]])


@dataclass
class MixtureTarget:
    centers: np.ndarray  # (C, d)
    std: float = 0.3
    weights: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 2:
            raise ValueError("centers must be (C, d)")
        if self.std < 0:
            raise ValueError("mode std must be >= 0")
        C = self.centers.shape[0]
        if self.weights is None:
            self.weights = np.full(C, 1.0 / C)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (C,) or np.any(self.weights < 0) or not math.isclose(self.weights.sum(), 1.0):
            raise ValueError("mixture weights must be non-negative and sum to 1")

    @property
    def num_modes(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @classmethod
    def circle(cls, modes: int = 8, radius: float = 4.0, std: float = 0.3, phase: float = 0.0) -> "MixtureTarget":
        ang = phase + 2 * np.pi * np.arange(modes) / modes
        centers = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
        # snap round-off so modes on an axis sit exactly on it (and inside their quadrant)
        centers[np.abs(centers) < 1e-9 * radius] = 0.0
        return cls(centers, std)

    def quadrants(self) -> np.ndarray:
        """Quadrant id of each 2-D mode center, by polar angle."""
        return _quadrants_of(self.centers)

    def sample_modes(self, idx: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        noise = rng.standard_normal((len(idx), self.dim))
        return (self.centers[idx] + self.std * noise).astype(np.float32)


def _quadrants_of(centers: np.ndarray) -> np.ndarray:
    if centers.shape[1] != 2:
        raise ValueError("quadrants are defined for 2-D targets only")
    ang = np.mod(np.arctan2(centers[:, 1], centers[:, 0]), 2 * np.pi)
    return (np.floor(ang / (np.pi / 2) + 1e-9).astype(int)) % 4


@dataclass
class RingTarget:
    """Ring of the given radius split into ``sectors`` equal arcs; condition = arc index."""

    sectors: int = 8
    radius: float = 4.0
    width: float = 0.2
    phase: float = 0.0

    def __post_init__(self) -> None:
        if self.sectors < 1:
            raise ValueError("need at least one sector")
        self.weights = np.full(self.sectors, 1.0 / self.sectors)
        mid = self.phase + 2 * np.pi * (np.arange(self.sectors) + 0.5) / self.sectors
        self.centers = np.stack([self.radius * np.cos(mid), self.radius * np.sin(mid)], axis=1)

    @property
    def num_modes(self) -> int:
        return self.sectors

    @property
    def dim(self) -> int:
        return 2

    def quadrants(self) -> np.ndarray:
        return _quadrants_of(self.centers)

    def sample_modes(self, idx: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        idx = np.asarray(idx)
        ang = self.phase + 2 * np.pi * (idx + rng.uniform(0, 1, len(idx))) / self.sectors
        r = self.radius + self.width * rng.standard_normal(len(idx))
        return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1).astype(np.float32)


def sample_target(target, n: int, c: int | None, rng: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. draws from mode ``c``, or from the whole mixture when ``c`` is None."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if c is None:
        idx = rng.choice(target.num_modes, size=n, p=target.weights)
    else:
        idx = np.full(n, int(c))
    return target.sample_modes(idx, rng)


def sample_conditional_batch(target, n: int, rng: np.random.Generator):
    """``(x0, cond)`` with cond drawn from the mixture weights."""
    idx = rng.choice(target.num_modes, size=n, p=target.weights)
    return target.sample_modes(idx, rng), idx


def _check_conditions(c, n_valid: int) -> np.ndarray:
    c = np.asarray(c, dtype=np.int64)
    if np.any(c < 0) or np.any(c >= n_valid):
        raise ValueError(f"condition id out of range [0, {n_valid})")
    return c


class RewardFn:
    """Callable ``score(x, c) -> reward``; ``x`` is ``(d,)`` or ``(B, d)``."""

    def score(self, x: np.ndarray, c) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x, c):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None] if single else x
        cb = np.broadcast_to(np.asarray(c), (xb.shape[0],))
        out = self.score(xb, cb)
        return float(out[0]) if single else out


@dataclass
class ModeReward(RewardFn):
    """``exp(-||x - mu_c||^2 / (2 sigma_r^2))``."""

    centers: np.ndarray
    sigma: float = 1.0

    def __post_init__(self) -> None:
        if self.sigma <= 0:
            raise ValueError("sigma_r must be > 0")
        self.centers = np.asarray(self.centers, dtype=np.float64)

    def score(self, x, c):
        c = _check_conditions(c, len(self.centers))
        d2 = np.sum((x - self.centers[c]) ** 2, axis=1)
        return np.exp(-d2 / (2 * self.sigma**2))


def mode_reward(x, c, centers, sigma_r: float = 1.0):
    return ModeReward(centers, sigma_r)(x, c)


@dataclass
class QuadrantReward(RewardFn):
    """1 if ``x`` lies in the quadrant assigned to ``c`` (axes count as inside), else 0."""

    quadrant_of: Sequence[int] = (0, 1, 2, 3)

    def __post_init__(self) -> None:
        self.quadrant_of = np.asarray(self.quadrant_of, dtype=np.int64)
        if np.any((self.quadrant_of < 0) | (self.quadrant_of > 3)):
            raise ValueError("quadrant ids must be in 0..3")

    def score(self, x, c):
        if x.shape[1] != 2:
            raise ValueError("quadrant_reward needs 2-D points")
        c = _check_conditions(c, len(self.quadrant_of))
        signs = QUADRANT_SIGNS[self.quadrant_of[c]]
        return np.all(x * signs >= 0, axis=1).astype(np.float64)


def quadrant_reward(x, c, quadrant_of=(0, 1, 2, 3)):
    return QuadrantReward(quadrant_of)(x, c)


@dataclass
class ConstantReward(RewardFn):
    value: float = 0.5

    def score(self, x, c):
        return np.full(x.shape[0], float(self.value))


@dataclass
class CompositeReward(RewardFn):
    components: list[tuple[float, RewardFn]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.components:
            raise ValueError("composite reward needs at least one component")
        for w, _ in self.components:
            if not math.isfinite(w):
                raise ValueError("composite weights must be finite")

    def score(self, x, c):
        total = np.zeros(x.shape[0])
        for w, fn in self.components:
            total += w * fn.score(x, c)
        return total


def composite_reward(weighted: Sequence[tuple[float, RewardFn]]) -> CompositeReward:
    return CompositeReward(list(weighted))


@dataclass
class FunctionReward(RewardFn):
    """Wrap an arbitrary ``f(x_batch, c_batch) -> rewards`` callable."""

    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]

    def score(self, x, c):
        return np.asarray(self.fn(x, c), dtype=np.float64)


def default_reward(target: MixtureTarget, sigma_r: float = 1.0, w_mode: float = 0.7, w_quad: float = 0.3):
    """0.7 mode reward + 0.3 quadrant reward, each condition assigned its mode's quadrant."""
    return CompositeReward(
        [(w_mode, ModeReward(target.centers, sigma_r)), (w_quad, QuadrantReward(target.quadrants()))]
    )


@dataclass
class RewardTable:
    """Rewards ``R[row, s-1]`` for a rollout batch; NaN marks unevaluated steps."""

    values: np.ndarray  # (B, S)
    group_size: int
    evaluated: np.ndarray  # (S,) bool

    @property
    def evaluated_steps(self) -> list[int]:
        return [s + 1 for s in np.flatnonzero(self.evaluated)]

    def grouped(self) -> np.ndarray:
        B, S = self.values.shape
        return self.values.reshape(B // self.group_size, self.group_size, S)


def evaluate_group(batch, fn: RewardFn, n_adv: int) -> RewardTable:
    """Score the last ``n_adv`` rewardable stochastic steps of every trajectory.

    Uses only stored clean samples; no model calls.
    """
    candidates = [k for k in range(batch.total_steps) if batch.clean[k] and batch.stds[k] > 0]
    if not 1 <= n_adv <= len(candidates):
        raise ValueError(f"n_adv must be in [1, {len(candidates)}], got {n_adv}")
    chosen = candidates[-n_adv:]
    values = np.full((batch.batch, batch.total_steps), np.nan)
    for k in chosen:
        values[:, k] = fn(batch.samples[k].astype(np.float64), batch.conditions)
    if not np.all(np.isfinite(values[:, chosen])):
        raise ValueError("reward function returned non-finite values")
    evaluated = np.zeros(batch.total_steps, dtype=bool)
    evaluated[chosen] = True
    return RewardTable(values, batch.group_size, evaluated)
