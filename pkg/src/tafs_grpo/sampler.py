"""Temperature-annealed few-step sampling.

Each step turns a noisy state into a clean estimate with one model call,
optionally perturbs it with a Gaussian policy head, and then re-corrupts the
result to the next (lower) noise level. Every step therefore emits a
clean-domain point that a reward function can score.

Rollouts are stored as stacked arrays of shape ``(S, B, ...)`` rather than
per-trajectory objects; ``trajectory(i)`` gives a per-row view.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .flow import DivergenceError, sde_sample


@dataclass(frozen=True)
class AnnealSchedule:
    total_steps: int

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")

    @property
    def tau(self) -> float:
        return 1.0 / self.total_steps

    @property
    def timesteps(self) -> np.ndarray:
        """``t_s = 1 - (s - 1) tau`` for ``s = 1..S``."""
        return np.array([1.0 - k * self.tau for k in range(self.total_steps)])

    @property
    def annealed_steps(self) -> int:
        return self.total_steps - 1


@dataclass(frozen=True)
class PolicyHead:
    sigma: float = 0.05
    scale_with_t: bool = False

    def std(self, t: float) -> float:
        return self.sigma * t if self.scale_with_t else self.sigma


@dataclass
class StepRecord:
    step: int
    t: float
    state: np.ndarray
    noise: np.ndarray | None
    mean: np.ndarray
    sample: np.ndarray
    log_prob: float | None


@dataclass
class Trajectory:
    condition: int
    x_T: np.ndarray
    records: list[StepRecord]

    @property
    def final(self) -> np.ndarray:
        return self.records[-1].sample


@dataclass
class RolloutBatch:
    """One or more rollout groups stacked row-wise.

    Rows ``k*G .. (k+1)*G - 1`` form group ``k`` and share a condition. Step
    arrays are indexed ``[s - 1, row]``.

    ``mean_scales[s]`` is the coefficient on the velocity when forming the
    policy mean from ``states[s]``: ``t_s`` for annealed sampling (clean
    estimate) and ``dt`` for the Euler–Maruyama baseline. ``clean[s]`` marks
    steps whose samples live in the data domain and may be rewarded.
    """

    kind: str
    conditions: np.ndarray  # (B,)
    group_size: int
    x_T: np.ndarray  # (B, d)
    times: np.ndarray  # (S,)
    mean_scales: np.ndarray  # (S,)
    stds: np.ndarray  # (S,) 0 for deterministic steps
    states: np.ndarray  # (S, B, d)
    noises: np.ndarray  # (S, B, d) NaN where no noise was injected
    means: np.ndarray  # (S, B, d)
    samples: np.ndarray  # (S, B, d)
    log_probs: np.ndarray  # (S, B) NaN for deterministic steps
    clean: np.ndarray  # (S,) bool

    @property
    def total_steps(self) -> int:
        return len(self.times)

    @property
    def batch(self) -> int:
        return self.x_T.shape[0]

    @property
    def n_groups(self) -> int:
        return self.batch // self.group_size

    @property
    def stochastic(self) -> np.ndarray:
        return self.stds > 0

    @property
    def final(self) -> np.ndarray:
        return self.samples[-1]

    def group_conditions(self) -> np.ndarray:
        return self.conditions[:: self.group_size]

    def group(self, k: int) -> "RolloutBatch":
        lo, hi = k * self.group_size, (k + 1) * self.group_size
        return RolloutBatch(
            kind=self.kind,
            conditions=self.conditions[lo:hi],
            group_size=self.group_size,
            x_T=self.x_T[lo:hi],
            times=self.times,
            mean_scales=self.mean_scales,
            stds=self.stds,
            states=self.states[:, lo:hi],
            noises=self.noises[:, lo:hi],
            means=self.means[:, lo:hi],
            samples=self.samples[:, lo:hi],
            log_probs=self.log_probs[:, lo:hi],
            clean=self.clean,
        )

    def groups(self) -> Iterator["RolloutBatch"]:
        for k in range(self.n_groups):
            yield self.group(k)

    def trajectory(self, i: int) -> Trajectory:
        records = []
        for k in range(self.total_steps):
            noise = self.noises[k, i]
            lp = self.log_probs[k, i]
            records.append(
                StepRecord(
                    step=k + 1,
                    t=float(self.times[k]),
                    state=self.states[k, i].copy(),
                    noise=None if np.isnan(noise).any() else noise.copy(),
                    mean=self.means[k, i].copy(),
                    sample=self.samples[k, i].copy(),
                    log_prob=None if np.isnan(lp) else float(lp),
                )
            )
        return Trajectory(int(self.conditions[i]), self.x_T[i].copy(), records)

    def to_dict(self) -> dict:
        """JSON-friendly dump for debugging."""
        def arr(a):
            return np.where(np.isnan(a), None, a).tolist() if np.issubdtype(a.dtype, np.floating) else a.tolist()

        return {
            "kind": self.kind,
            "group_size": self.group_size,
            "conditions": self.conditions.tolist(),
            "times": self.times.tolist(),
            "stds": self.stds.tolist(),
            "x_T": arr(self.x_T),
            "states": arr(self.states),
            "noises": arr(self.noises),
            "samples": arr(self.samples),
            "log_probs": arr(self.log_probs),
        }


# Alias: a batch holding a single condition is a rollout group.
RolloutGroup = RolloutBatch


def one_step_estimate(x_t, t: float, c, model) -> ad.Tensor:
    """Clean estimate ``x_t + t v(x_t, t, c)``; differentiable w.r.t. the model."""
    if not 0.0 < t <= 1.0:
        raise ValueError(f"one_step_estimate needs t in (0, 1], got {t}")
    x_t = np.asarray(x_t, dtype=np.float32)
    return ad.tensor(x_t) + ad.scale(model(x_t, t, c), t)


def renoise(x0_hat: np.ndarray, t_next: float, rng: np.random.Generator, eps: np.ndarray | None = None):
    """Forward-corrupt a clean point to level ``t_next``. Returns ``(x, eps)``."""
    if not 0.0 < t_next < 1.0:
        raise ValueError(f"renoise needs t_next in (0, 1), got {t_next}")
    x0_hat = np.asarray(x0_hat, dtype=np.float32)
    if eps is None:
        eps = rng.standard_normal(x0_hat.shape).astype(np.float32)
    t32 = np.float32(t_next)
    return (np.float32(1.0) - t32) * x0_hat + t32 * eps, eps


def policy_step(x_t, t: float, c, model, head: PolicyHead, rng: np.random.Generator, deterministic: bool):
    """Sample a clean point from ``N(one_step_estimate, std^2 I)``.

    Returns ``(sample, log_prob, mean)``; ``log_prob`` is ``None`` when
    ``deterministic`` is set.
    """
    mean = one_step_estimate(x_t, t, c, model).data
    if deterministic:
        return mean.copy(), None, mean
    std = head.std(t)
    if std <= 0:
        raise ValueError("policy_step: sigma must be > 0 for stochastic steps")
    z = rng.standard_normal(mean.shape).astype(np.float32)
    sample = mean + np.float32(std) * z
    log_prob = ad.gaussian_logprob(sample, ad.tensor(mean), std).data
    return sample, log_prob, mean


def rollout_batch(
    conditions,
    schedule: AnnealSchedule,
    group_size: int,
    model,
    head: PolicyHead,
    rng: np.random.Generator,
    deterministic: bool = False,
    x_T: np.ndarray | None = None,
) -> RolloutBatch:
    """Annealed rollouts for ``group_size`` noises per condition, batched.

    Step 1 (t = 1) is always the deterministic clean estimate. Steps 2..S
    renoise the previous sample to ``t_s`` and take a stochastic policy step
    (or the mean when ``deterministic``). Draw order on ``rng``: initial
    noise, then per step the renoise draw followed by the policy draw.
    """
    if group_size < 1:
        raise ValueError("group size must be >= 1")
    conds = np.repeat(np.asarray(conditions, dtype=np.int64).reshape(-1), group_size)
    S = schedule.total_steps
    dim = model.dim
    B = conds.shape[0]
    if x_T is None:
        x_T = rng.standard_normal((B, dim)).astype(np.float32)
    else:
        x_T = np.asarray(x_T, dtype=np.float32)
        if x_T.shape != (B, dim):
            raise ValueError(f"x_T must have shape {(B, dim)}")
    times = schedule.timesteps
    stds = np.array([0.0] + [0.0 if deterministic else head.std(t) for t in times[1:]])

    states = np.zeros((S, B, dim), np.float32)
    noises = np.full((S, B, dim), np.nan, np.float32)
    means = np.zeros_like(states)
    samples = np.zeros_like(states)
    logp = np.full((S, B), np.nan, np.float32)

    x = x_T
    for k in range(S):
        t = float(times[k])
        if k > 0:
            x, noises[k] = renoise(samples[k - 1], t, rng)
        states[k] = x
        sample, lp, mean = policy_step(x, t, conds, model, head, rng, deterministic=stds[k] == 0)
        if not np.all(np.isfinite(sample)):
            raise DivergenceError(f"non-finite sample at annealing step {k + 1}")
        means[k], samples[k] = mean, sample
        if lp is not None:
            logp[k] = lp
    return RolloutBatch(
        kind="tafs",
        conditions=conds,
        group_size=group_size,
        x_T=x_T,
        times=times,
        mean_scales=times.copy(),
        stds=stds,
        states=states,
        noises=noises,
        means=means,
        samples=samples,
        log_probs=logp,
        clean=np.ones(S, dtype=bool),
    )


def rollout(c: int, schedule: AnnealSchedule, G: int, model, head: PolicyHead, rng, **kw) -> RolloutBatch:
    """Annealed rollout of one group of ``G`` trajectories sharing condition ``c``."""
    return rollout_batch([c], schedule, G, model, head, rng, **kw)


def rollout_sde_batch(
    conditions, steps: int, group_size: int, model, eta: float, rng: np.random.Generator
) -> RolloutBatch:
    """Euler–Maruyama baseline rollouts in the same record layout.

    Only the terminal state is clean, so only the last step is rewardable.
    """
    conds = np.repeat(np.asarray(conditions, dtype=np.int64).reshape(-1), group_size)
    x_T = rng.standard_normal((conds.shape[0], model.dim)).astype(np.float32)
    res = sde_sample(model, x_T, steps, conds, eta, rng)
    clean = np.zeros(steps, dtype=bool)
    clean[-1] = True
    return RolloutBatch(
        kind="sde",
        conditions=conds,
        group_size=group_size,
        x_T=x_T,
        times=res.times,
        mean_scales=np.full(steps, 1.0 / steps),
        stds=res.stds,
        states=res.states,
        noises=res.noises,
        means=res.means,
        samples=res.next_states,
        log_probs=res.log_probs,
        clean=clean,
    )


def recompute_logprobs(batch: RolloutBatch, model, steps=None, schedule: AnnealSchedule | None = None):
    """Differentiable log-densities of the stored samples under ``model``.

    Re-evaluates the policy mean from the stored noisy states and scores the
    stored samples. Returns ``{step_index (1-based): Tensor(B,)}`` for the
    stochastic steps, or only for ``steps`` when given. Costs one forward per
    returned step.
    """
    if schedule is not None and schedule.total_steps != batch.total_steps:
        raise ValueError(
            f"schedule mismatch: trajectory has {batch.total_steps} steps, schedule {schedule.total_steps}"
        )
    wanted = [s for s in range(1, batch.total_steps + 1) if batch.stds[s - 1] > 0]
    if steps is not None:
        steps = list(steps)
        bad = [s for s in steps if s not in wanted]
        if bad:
            raise ValueError(f"steps {bad} are not stochastic steps of this rollout")
        wanted = steps
    out = {}
    for s in wanted:
        k = s - 1
        mean = policy_mean(batch, k, model)
        out[s] = ad.gaussian_logprob(batch.samples[k], mean, batch.stds[k])
    return out


def policy_mean(batch: RolloutBatch, k: int, model) -> ad.Tensor:
    """Differentiable policy mean for step index ``k`` (0-based)."""
    t = float(batch.times[k])
    v = model(batch.states[k], t, batch.conditions)
    return ad.tensor(batch.states[k]) + ad.scale(v, float(batch.mean_scales[k]))
