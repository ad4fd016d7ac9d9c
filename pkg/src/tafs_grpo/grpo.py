"""Step-aware group-relative advantages and the clipped policy-gradient loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState
from .rewards import RewardFn, RewardTable, evaluate_group
from .sampler import AnnealSchedule, PolicyHead, RolloutBatch, policy_mean, recompute_logprobs, rollout_batch, rollout_sde_batch

logger = logging.getLogger(__name__)

SAMPLERS = ("tafs", "sde")
CREDIT_RULES = ("inherit", "drop")


@dataclass
class GrpoConfig:
    clip_range: float = 0.2
    group_size: int = 16
    conditions_per_iter: int = 8
    n_adv: int | None = None  # None: every annealed step (S - 1)
    inner_epochs: int = 1
    kl_coef: float = 0.0
    adv_std_floor: float = 1e-8
    lr: float = 3e-4
    weight_decay: float = 1e-4
    iterations: int = 500
    total_steps: int = 4
    sampler: str = "tafs"
    sde_eta: float = 0.7
    policy_sigma: float = 0.05
    policy_scale_with_t: bool = False
    credit: str = "inherit"  # or "drop": how unevaluated stochastic steps enter the loss

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not 0 < self.clip_range < 1:
            raise ValueError("clip_range must be in (0, 1)")
        if self.group_size < 2:
            raise ValueError("group_size must be ≥ 2")
        if self.conditions_per_iter < 1:
            raise ValueError("conditions_per_iter must be ≥ 1")
        if self.kl_coef < 0:
            raise ValueError("kl_coef must be ≥ 0")
        if self.inner_epochs < 1:
            raise ValueError("inner_epochs must be ≥ 1")
        if self.iterations < 1:
            raise ValueError("iterations must be ≥ 1")
        if self.credit not in CREDIT_RULES:
            raise ValueError(f"credit must be one of {CREDIT_RULES}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")
        if self.sampler == "tafs":
            if self.total_steps < 2:
                raise ValueError("total_steps must be ≥ 2 for training (step 1 is deterministic)")
            if self.policy_sigma <= 0:
                raise ValueError("policy_sigma must be > 0")
            if not 1 <= self.effective_n_adv <= self.total_steps - 1:
                raise ValueError(f"n_adv must be in [1, {self.total_steps - 1}]")
        else:
            if self.total_steps < 1:
                raise ValueError("total_steps must be ≥ 1")
            if self.sde_eta <= 0:
                raise ValueError("sde_eta must be > 0: a zero-noise SDE has no policy variance to learn from")
            if self.n_adv not in (None, 1):
                raise ValueError("the SDE sampler only has a terminal reward (n_adv = 1)")

    @property
    def effective_n_adv(self) -> int:
        if self.sampler == "sde":
            return 1
        return self.total_steps - 1 if self.n_adv is None else self.n_adv

    @property
    def schedule(self) -> AnnealSchedule:
        return AnnealSchedule(self.total_steps)

    @property
    def head(self) -> PolicyHead:
        return PolicyHead(self.policy_sigma, self.policy_scale_with_t)


@dataclass
class AdvantageTable:
    """Per-step group statistics and advantages; arrays are ``(n_groups, G, S)`` / ``(n_groups, S)``."""

    advantages: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    evaluated: np.ndarray

    @property
    def evaluated_steps(self) -> list[int]:
        return [k + 1 for k in np.flatnonzero(self.evaluated)]

    @property
    def per_row(self) -> np.ndarray:
        """``(B, S)`` advantages with unevaluated steps set to 0."""
        n, G, S = self.advantages.shape
        return np.nan_to_num(self.advantages.reshape(n * G, S), nan=0.0)

    @property
    def aggregate(self) -> np.ndarray:
        """Sum over evaluated steps per trajectory (logged diagnostic only)."""
        return self.per_row.sum(axis=1)


def integrate_advantages(table: RewardTable, floor: float = 1e-8) -> AdvantageTable:
    """Normalise rewards within each group, separately for every evaluated step."""
    if table.group_size < 2:
        raise ValueError("group statistics need G ≥ 2")
    R = table.grouped()
    n, G, S = R.shape
    adv = np.full_like(R, np.nan)
    mu = np.full((n, S), np.nan)
    sd = np.full((n, S), np.nan)
    for k in np.flatnonzero(table.evaluated):
        r = R[:, :, k]
        m = r.mean(axis=1)
        s = r.std(axis=1)  # population std
        mu[:, k], sd[:, k] = m, s
        ok = s > floor
        safe = np.where(ok, s, 1.0)
        adv[:, :, k] = np.where(ok[:, None], (r - m[:, None]) / safe[:, None], 0.0)
    return AdvantageTable(adv, mu, sd, table.evaluated.copy())


def clipped_term(r, A, eps: float):
    """``min(r A, clip(r, 1 - eps, 1 + eps) A)`` for floats or arrays."""
    r = np.asarray(r, dtype=np.float64)
    out = np.minimum(r * A, np.clip(r, 1 - eps, 1 + eps) * A)
    return float(out) if out.ndim == 0 else out


def clipped_term_tensor(ratio: ad.Tensor, A: np.ndarray, eps: float) -> ad.Tensor:
    A = ad.tensor(A)
    return ad.minimum(ad.mul(ratio, A), ad.mul(ad.clip(ratio, 1 - eps, 1 + eps), A))


@dataclass
class PolicySnapshot:
    """Frozen parameter copy (theta_old or the KL reference)."""

    state: dict

    @classmethod
    def take(cls, model) -> "PolicySnapshot":
        return cls(model.params.state())

    def as_model(self, like):
        m = like.clone()
        m.params.load_state(self.state)
        return m


@dataclass
class ObjectiveResult:
    objective: ad.Tensor
    ratios: dict[int, np.ndarray]
    clip_fraction: float
    kl: float


def step_advantages(batch: RolloutBatch, adv: AdvantageTable, credit: str = "inherit") -> dict[int, np.ndarray]:
    """Map each trained step to its per-row advantage.

    Evaluated steps use their own advantage. With ``credit="inherit"`` every
    other stochastic step takes the advantage of the next evaluated step after
    it, so all stochastic steps stay in the loss and ``n_adv = 1`` gives every
    step the terminal advantage. ``credit="drop"`` trains only evaluated steps.
    """
    per_row = adv.per_row
    evaluated = adv.evaluated_steps
    out = {}
    for s in range(1, batch.total_steps + 1):
        if batch.stds[s - 1] <= 0:
            continue
        if s in evaluated:
            out[s] = per_row[:, s - 1]
        elif credit == "inherit":
            later = [e for e in evaluated if e > s]
            if later:
                out[s] = per_row[:, later[0] - 1]
        elif credit != "drop":
            raise ValueError(f"unknown credit rule {credit!r}")
    if not out:
        raise ValueError("no trainable steps")
    return out


def policy_objective(
    batch: RolloutBatch,
    adv: AdvantageTable,
    model,
    clip_range: float,
    kl_coef: float = 0.0,
    reference=None,
    credit: str = "inherit",
) -> ObjectiveResult:
    """Clipped surrogate averaged over trajectories and trained steps (to maximise)."""
    if adv.advantages.shape[:2] != (batch.n_groups, batch.group_size):
        raise ValueError("advantage table does not match the rollout groups")
    if len(adv.evaluated) != batch.total_steps:
        raise ValueError("advantage table and trajectories disagree on the step count")
    per_step = step_advantages(batch, adv, credit)
    steps = sorted(per_step)
    logps = recompute_logprobs(batch, model, steps=steps)

    terms = []
    ratios: dict[int, np.ndarray] = {}
    clipped = 0
    kl_total = None
    for s in steps:
        old = batch.log_probs[s - 1]
        ratio = ad.exp(ad.sub(logps[s], ad.tensor(old)))
        ratios[s] = ratio.data.copy()
        A = per_step[s]
        lo, hi = 1 - clip_range, 1 + clip_range
        r = ratio.data
        clipped += int(np.sum(((A > 0) & (r > hi)) | ((A < 0) & (r < lo))))
        terms.append(ad.mean(clipped_term_tensor(ratio, A, clip_range)))
        if kl_coef > 0:
            if reference is None:
                raise ValueError("kl_coef > 0 needs a reference policy")
            k = s - 1
            diff = ad.sub(policy_mean(batch, k, model), ad.tensor(policy_mean(batch, k, reference).data))
            var = float(batch.stds[k]) ** 2
            kl = ad.scale(ad.mean(ad.sum(ad.mul(diff, diff), axis=1)), 0.5 / var)
            kl_total = kl if kl_total is None else ad.add(kl_total, kl)

    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    objective = ad.scale(total, 1.0 / len(steps))
    kl_value = 0.0
    if kl_total is not None:
        kl_mean = ad.scale(kl_total, 1.0 / len(steps))
        kl_value = float(kl_mean.data)
        objective = ad.sub(objective, ad.scale(kl_mean, kl_coef))
    frac = clipped / (len(steps) * batch.batch)
    return ObjectiveResult(objective, ratios, frac, kl_value)


@dataclass
class Trainer:
    """Mutable RL state: model, optimiser, RNG stream and iteration counter."""

    model: object
    config: GrpoConfig
    reward: RewardFn
    rng: np.random.Generator
    optimizer: AdamState = None
    reference: object = None
    iteration: int = 0
    history: list[dict] = field(default_factory=list)
    snapshot: PolicySnapshot | None = None

    def __post_init__(self) -> None:
        if self.optimizer is None:
            self.optimizer = AdamState(lr=self.config.lr, weight_decay=self.config.weight_decay)
        if self.config.kl_coef > 0 and self.reference is None:
            self.reference = self.model.clone()

    def sample(self, conditions) -> RolloutBatch:
        cfg = self.config
        if cfg.sampler == "sde":
            return rollout_sde_batch(conditions, cfg.total_steps, cfg.group_size, self.model, cfg.sde_eta, self.rng)
        return rollout_batch(conditions, cfg.schedule, cfg.group_size, self.model, cfg.head, self.rng)

    def step(self) -> dict:
        return train_iteration(self)


def _pick_conditions(num_conditions: int, k: int, rng: np.random.Generator) -> np.ndarray:
    if k >= num_conditions:
        return rng.permutation(num_conditions)
    return np.sort(rng.choice(num_conditions, size=k, replace=False))


def train_iteration(trainer: Trainer) -> dict:
    """One pass of: snapshot, rollout, reward, advantages, clipped updates."""
    cfg, model = trainer.config, trainer.model
    t0 = time.perf_counter()
    # ratios are taken against the log-probs stored at rollout time, i.e. under this snapshot
    trainer.snapshot = PolicySnapshot.take(model)
    conds = _pick_conditions(model.num_conditions, cfg.conditions_per_iter, trainer.rng)
    batch = trainer.sample(conds)
    table = evaluate_group(batch, trainer.reward, cfg.effective_n_adv)
    adv = integrate_advantages(table, cfg.adv_std_floor)

    objective = float("nan")
    clip_frac = 0.0
    max_ratio_dev = float("nan")
    kl = 0.0
    for epoch in range(cfg.inner_epochs):
        res = policy_objective(batch, adv, model, cfg.clip_range, cfg.kl_coef, trainer.reference, cfg.credit)
        value = float(res.objective.data)
        if not math.isfinite(value):
            raise FloatingPointError(
                f"non-finite objective at iteration {trainer.iteration + 1}, epoch {epoch + 1}"
            )
        if epoch == 0:
            objective = value
            max_ratio_dev = max(float(np.max(np.abs(r - 1.0))) for r in res.ratios.values())
        clip_frac = res.clip_fraction
        kl = res.kl
        ad.backward(ad.scale(res.objective, -1.0))
        for name, p in model.params.items():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        ad.adam_step(model.params, trainer.optimizer)

    trainer.iteration += 1
    metrics = {"iteration": trainer.iteration}
    clean_steps = [k for k in range(batch.total_steps) if batch.clean[k]]
    for k in clean_steps:
        metrics[f"reward_s{k + 1}"] = float(np.mean(trainer.reward(batch.samples[k], batch.conditions)))
    metrics["terminal_reward"] = metrics[f"reward_s{batch.total_steps}"]
    metrics["mean_abs_adv"] = float(np.mean(np.abs(adv.per_row[:, adv.evaluated])))
    metrics["mean_abs_aggregate_adv"] = float(np.mean(np.abs(adv.aggregate)))
    metrics["clip_fraction"] = clip_frac
    metrics["objective"] = objective
    metrics["max_ratio_dev"] = max_ratio_dev
    metrics["kl"] = kl
    metrics["seconds"] = time.perf_counter() - t0
    trainer.history.append(metrics)
    return metrics


def train(trainer: Trainer, iterations: int | None = None, on_iteration=None) -> list[dict]:
    """Run ``iterations`` (default: config.iterations) training iterations."""
    n = trainer.config.iterations if iterations is None else iterations
    if n < 1:
        raise ValueError("iterations must be ≥ 1")
    out = []
    for _ in range(n):
        m = train_iteration(trainer)
        out.append(m)
        if on_iteration is not None:
            on_iteration(trainer, m)
    return out
