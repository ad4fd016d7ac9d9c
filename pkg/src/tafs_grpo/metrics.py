"""Evaluation: distributional distance, reward statistics, correlations, sweeps, ablations."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .flow import euler_ode_sample
from .rewards import MixtureTarget, RewardFn, sample_target
from .sampler import AnnealSchedule, PolicyHead, rollout_batch

logger = logging.getLogger(__name__)


def sliced_wasserstein(
    a: np.ndarray, b: np.ndarray, projections: int = 64, rng: np.random.Generator | None = None
) -> float:
    """Mean 1-D Wasserstein-1 distance over random unit projections.

    Sets of unequal size are matched by subsampling the larger one without
    replacement.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if len(a) == 0 or len(b) == 0:
        raise ValueError("sliced_wasserstein needs nonempty point sets")
    if a.shape[1] != b.shape[1]:
        raise ValueError("point sets have different dimensions")
    rng = rng or np.random.default_rng(0)
    n = min(len(a), len(b))
    if len(a) > n:
        a = a[rng.choice(len(a), n, replace=False)]
    if len(b) > n:
        b = b[rng.choice(len(b), n, replace=False)]
    dirs = rng.standard_normal((a.shape[1], projections))
    dirs /= np.linalg.norm(dirs, axis=0, keepdims=True)
    pa = np.sort(a @ dirs, axis=0)
    pb = np.sort(b @ dirs, axis=0)
    return float(np.mean(np.abs(pa - pb)))


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("pearson needs two equal-length sequences of length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.sum(dx * dx)), np.sqrt(np.sum(dy * dy))
    if sx == 0 or sy == 0:
        raise ValueError("pearson is undefined for zero-variance input")
    return float(np.clip(np.sum(dx * dy) / (sx * sy), -1.0, 1.0))


def balanced_conditions(num_conditions: int, per_condition: int) -> np.ndarray:
    return np.repeat(np.arange(num_conditions), per_condition)


def generate(
    model,
    n_per_condition: int,
    seed: int,
    sampler: str = "tafs",
    steps: int = 4,
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic-mean samples, ``n_per_condition`` for every condition.

    ``sampler`` is ``"tafs"`` (annealed, policy noise off) or ``"ode"`` (Euler).
    """
    rng = np.random.default_rng([seed, 17])
    conds = balanced_conditions(model.num_conditions, n_per_condition)
    x_T = rng.standard_normal((len(conds), model.dim)).astype(np.float32)
    if sampler == "ode":
        return euler_ode_sample(model, x_T, steps, conds), conds
    if sampler != "tafs":
        raise ValueError(f"unknown sampler {sampler!r}")
    batch = rollout_batch(
        np.arange(model.num_conditions), AnnealSchedule(steps), n_per_condition, model, PolicyHead(), rng,
        deterministic=True, x_T=x_T,
    )
    return batch.final, batch.conditions


def target_samples(target: MixtureTarget, conds: np.ndarray, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 29])
    out = np.zeros((len(conds), target.dim), np.float32)
    for c in np.unique(conds):
        idx = np.flatnonzero(conds == c)
        out[idx] = sample_target(target, len(idx), int(c), rng)
    return out


def mean_terminal_reward(model, reward: RewardFn, steps: int, n_per_condition: int = 128, seed: int = 0,
                         sampler: str = "tafs") -> float:
    x, c = generate(model, n_per_condition, seed, sampler, steps)
    return float(np.mean(reward(x, c)))


def sw_to_target(model, target: MixtureTarget, steps: int, n_per_condition: int = 256, seed: int = 0,
                 sampler: str = "tafs", projections: int = 64) -> float:
    x, c = generate(model, n_per_condition, seed, sampler, steps)
    y = target_samples(target, c, seed)
    return sliced_wasserstein(x, y, projections, np.random.default_rng([seed, 31]))


def correlate_step_rewards(
    model,
    reward: RewardFn,
    schedule: AnnealSchedule,
    n_rollouts: int,
    rng: np.random.Generator,
    head: PolicyHead = PolicyHead(),
) -> dict[int, float]:
    """Pearson r between each intermediate stochastic step's reward and the final reward.

    Rollouts are spread evenly over conditions and pooled.
    """
    if n_rollouts < 30:
        raise ValueError("need at least 30 rollouts")
    S = schedule.total_steps
    if S < 3:
        raise ValueError("need at least one intermediate stochastic step (S >= 3)")
    C = model.num_conditions
    per = -(-n_rollouts // C)
    batch = rollout_batch(np.arange(C), schedule, per, model, head, rng)
    final = reward(batch.samples[S - 1], batch.conditions)
    out = {}
    for s in range(2, S):
        out[s] = pearson(reward(batch.samples[s - 1], batch.conditions), final)
    return out


def step_sweep(model, reward: RewardFn, step_counts: Sequence[int], n_samples: int, seed: int = 0) -> dict[int, float]:
    """Mean terminal reward of deterministic annealed sampling at each step count.

    Every step count sees the same initial noises and renoise draws.
    """
    per = max(1, n_samples // model.num_conditions)
    out = {}
    for S in step_counts:
        if S < 1:
            raise ValueError("step counts must be >= 1")
        out[int(S)] = mean_terminal_reward(model, reward, int(S), per, seed)
    return out


def sign_test_p(wins: int, n: int) -> float:
    """One-sided binomial sign-test p-value for ``wins`` successes out of ``n``."""
    from math import comb

    return sum(comb(n, k) for k in range(wins, n + 1)) / 2**n


@dataclass
class AblationResult:
    name: str
    seeds: list[int]
    terminal_reward: list[float]
    sliced_w: list[float]
    seconds_per_iter: list[float] = field(default_factory=list)

    def summary(self) -> dict:
        r = np.array(self.terminal_reward)
        w = np.array(self.sliced_w)
        return {
            "name": self.name,
            "reward_mean": float(r.mean()),
            "reward_std": float(r.std()),
            "sw_mean": float(w.mean()),
            "sw_std": float(w.std()),
            "n_seeds": len(self.seeds),
        }


def ablation_runner(
    variants: dict[str, Callable[[int], tuple[float, float, float]]],
    seeds: Sequence[int],
) -> dict[str, AblationResult]:
    """Run every variant under every seed.

    Each variant is ``run(seed) -> (terminal_reward, sliced_w, seconds_per_iter)``.
    """
    if len(variants) < 2:
        raise ValueError("need at least two configurations")
    if len(seeds) < 3:
        raise ValueError("need at least three seeds")
    out = {}
    for name, run in variants.items():
        res = AblationResult(name, list(seeds), [], [], [])
        for seed in seeds:
            r, w, sec = run(seed)
            res.terminal_reward.append(r)
            res.sliced_w.append(w)
            res.seconds_per_iter.append(sec)
            logger.info("ablation %s seed %d: reward %.5f sw %.4f", name, seed, r, w)
        out[name] = res
    return out


def directional_flags(results: dict[str, AblationResult], better: str, worse: str) -> dict:
    """Per-seed comparison ``better >= worse`` with a sign-test p-value."""
    a = np.array(results[better].terminal_reward)
    b = np.array(results[worse].terminal_reward)
    wins = int(np.sum(a >= b))
    return {
        "claim": f"{better} >= {worse}",
        "wins": wins,
        "n": len(a),
        "holds_all": wins == len(a),
        "holds_majority": wins > len(a) / 2,
        "sign_test_p": sign_test_p(wins, len(a)),
    }
