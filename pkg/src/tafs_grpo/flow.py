"""Velocity-field network, conditional flow-matching pretraining, ODE/SDE samplers.

Time convention: t = 0 is clean data and t = 1 is pure noise, with the linear
corruption ``x_t = (1 - t) x0 + t eps``. The network predicts the denoising
direction ``x0 - eps``, so a single evaluation gives the clean estimate
``x_t + t v(x_t, t, c)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, ParamStore, Tensor

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training or sampling produced non-finite values."""


def time_features(t: np.ndarray, width: int) -> np.ndarray:
    """Sinusoidal features of ``t`` with geometrically spaced frequencies."""
    if width % 2:
        raise ValueError("time embedding width must be even")
    half = width // 2
    freqs = np.exp(np.linspace(0.0, math.log(64.0), half)) * math.pi
    ang = np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


@dataclass
class VelocityField:
    """MLP ``v(x, t, c)`` over state, sinusoidal time features and a learned condition table."""

    dim: int = 2
    num_conditions: int = 8
    hidden: Sequence[int] = (128, 128, 128, 128)
    time_dim: int = 16
    cond_dim: int = 16
    seed: int = 0
    zero_init_final: bool = False
    params: ParamStore = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.hidden = tuple(int(h) for h in self.hidden)
        rng = np.random.default_rng(self.seed)
        self.params = ParamStore()
        self.params.add("cond_embed", rng.normal(0.0, 1.0, (self.num_conditions, self.cond_dim)))
        widths = [self.dim + self.time_dim + self.cond_dim, *self.hidden, self.dim]
        n_layers = len(widths) - 1
        for i in range(n_layers):
            fan_in, fan_out = widths[i], widths[i + 1]
            last = i == n_layers - 1
            if last and self.zero_init_final:
                w = np.zeros((fan_in, fan_out))
            else:
                # last layer gets a damped init so the untrained field starts small
                gain = 0.1 if last else 1.0
                w = rng.normal(0.0, gain / math.sqrt(fan_in), (fan_in, fan_out))
            self.params.add(f"layer{i}.w", w)
            self.params.add(f"layer{i}.b", np.zeros(fan_out))
        self._n_layers = n_layers

    @property
    def n_layers(self) -> int:
        return self._n_layers

    def forward(self, x, t, c) -> Tensor:
        """Velocity for a batch. ``t`` is a scalar or one value per row; ``c`` one id per row."""
        x = np.asarray(x.data if isinstance(x, Tensor) else x)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"expected points of shape (B, {self.dim}), got {x.shape}")
        batch = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
        c = np.broadcast_to(np.asarray(c, dtype=np.int64), (batch,))
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(t))):
            raise ValueError("forward_velocity: non-finite input")
        if np.any(t < 0) or np.any(t > 1):
            raise ValueError("forward_velocity: t must lie in [0, 1]")
        if np.any(c < 0) or np.any(c >= self.num_conditions):
            raise ValueError(f"condition id out of range [0, {self.num_conditions})")

        p = self.params
        h = ad.concat(
            [
                ad.tensor(x),
                ad.tensor(time_features(t, self.time_dim)),
                ad.take_rows(p["cond_embed"], c),
            ]
        )
        for i in range(self._n_layers):
            h = ad.matmul(h, p[f"layer{i}.w"]) + p[f"layer{i}.b"]
            if i < self._n_layers - 1:
                h = ad.silu(h)
        return h

    __call__ = forward

    def velocity(self, x, t, c) -> np.ndarray:
        """Forward pass as a plain array (no graph kept)."""
        return self.forward(x, t, c).data

    def clone(self) -> "VelocityField":
        other = VelocityField(
            dim=self.dim,
            num_conditions=self.num_conditions,
            hidden=self.hidden,
            time_dim=self.time_dim,
            cond_dim=self.cond_dim,
            seed=self.seed,
        )
        other.params.load_state(self.params.state())
        return other


@dataclass
class PointMassField:
    """Exact field ``v(x, t) = (point - x) / t`` of a data distribution concentrated at one point.

    Every sampler built on clean estimates lands on ``point`` exactly, which
    makes it an analytic oracle. It has no parameters.
    """

    point: np.ndarray
    num_conditions: int = 1

    def __post_init__(self) -> None:
        self.point = np.asarray(self.point, dtype=np.float32).reshape(-1)
        self.params = ParamStore()

    @property
    def dim(self) -> int:
        return self.point.shape[0]

    def forward(self, x, t, c) -> Tensor:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
        t = np.broadcast_to(np.asarray(t, dtype=np.float32), (x.shape[0],))
        if np.any(t <= 0):
            raise ValueError("the point-mass field is singular at t = 0")
        return ad.tensor((self.point - x) / t[:, None])

    __call__ = forward

    def velocity(self, x, t, c) -> np.ndarray:
        return self.forward(x, t, c).data

    def clone(self) -> "PointMassField":
        return PointMassField(self.point.copy(), self.num_conditions)


def forward_velocity(model, x, t, c) -> Tensor:
    return model(x, t, c)


def cfm_loss(model, x0: np.ndarray, cond: np.ndarray, rng: np.random.Generator) -> Tensor:
    """Conditional flow-matching loss ``mean ||v(x_t, t, c) - (x0 - eps)||^2``."""
    x0 = np.asarray(x0, dtype=np.float32)
    cond = np.asarray(cond)
    if x0.shape[0] == 0:
        raise ValueError("cfm_loss: empty batch")
    if cond.shape[0] != x0.shape[0]:
        raise ValueError("cfm_loss: data and condition batch lengths differ")
    t = rng.uniform(0.0, 1.0, size=x0.shape[0]).astype(np.float32)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    return cfm_loss_at(model, x0, cond, t, eps)


def cfm_loss_at(model, x0, cond, t, eps) -> Tensor:
    """CFM loss at explicit ``(t, eps)`` draws."""
    tt = np.asarray(t, dtype=np.float32)[:, None]
    xt = (1.0 - tt) * x0 + tt * eps
    return ad.mse(model(xt, t, cond), x0 - eps)


@dataclass
class PretrainResult:
    losses: list[float]
    optimizer: AdamState


def pretrain(
    model: VelocityField,
    sample_batch: Callable[[np.random.Generator], tuple[np.ndarray, np.ndarray]],
    steps: int,
    optimizer: AdamState,
    rng: np.random.Generator,
    checkpoint_every: int = 0,
    on_checkpoint: Callable[[int, list[float]], None] | None = None,
    log_every: int = 1000,
) -> PretrainResult:
    """Run ``steps`` iterations of CFM loss + Adam.

    ``sample_batch(rng)`` returns ``(x0, cond)``. The same ``rng`` feeds both the
    data draws and the ``(t, eps)`` draws, in that order.
    """
    if steps < 1:
        raise ValueError("pretrain: steps must be >= 1")
    losses: list[float] = []
    for step in range(1, steps + 1):
        x0, cond = sample_batch(rng)
        loss = cfm_loss(model, x0, cond, rng)
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(f"pretraining diverged at step {step} (loss={value})")
        losses.append(value)
        ad.backward(loss)
        ad.adam_step(model.params, optimizer)
        if log_every and step % log_every == 0:
            logger.info("pretrain step %d loss %.5f", step, value)
        if checkpoint_every and on_checkpoint and step % checkpoint_every == 0:
            on_checkpoint(step, losses)
    return PretrainResult(losses=losses, optimizer=optimizer)


def _check_state(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite state during {where}")


def euler_ode_sample(model, x_T: np.ndarray, steps: int, c) -> np.ndarray:
    """Deterministic Euler integration from t = 1 down to t = 0."""
    if steps < 1:
        raise ValueError("euler_ode_sample: steps must be >= 1")
    x = np.array(x_T, dtype=np.float32)
    dt = 1.0 / steps
    for k in range(steps):
        t = 1.0 - k * dt
        x = x + np.float32(dt) * model.velocity(x, t, c)
        _check_state(x, "ODE sampling")
    return x


@dataclass
class SDEResult:
    """Euler–Maruyama trajectory. ``states[k]`` is the input to transition ``k``."""

    samples: np.ndarray  # (B, d) terminal states
    states: np.ndarray  # (steps, B, d)
    times: np.ndarray  # (steps,)
    means: np.ndarray  # (steps, B, d)
    stds: np.ndarray  # (steps,)
    noises: np.ndarray  # (steps, B, d) standard-normal draws z
    next_states: np.ndarray  # (steps, B, d)
    log_probs: np.ndarray  # (steps, B)


def sde_std(t: float, dt: float, eta: float) -> float:
    return eta * t * math.sqrt(dt)


def sde_sample(model, x_T: np.ndarray, steps: int, c, eta: float, rng: np.random.Generator) -> SDEResult:
    """Euler–Maruyama ``x <- x + dt v + eta t sqrt(dt) z`` with per-transition log-densities."""
    if steps < 1:
        raise ValueError("sde_sample: steps must be >= 1")
    if eta < 0:
        raise ValueError("sde_sample: eta must be >= 0")
    x = np.array(x_T, dtype=np.float32)
    batch, dim = x.shape
    dt = 1.0 / steps
    states = np.zeros((steps, batch, dim), np.float32)
    means = np.zeros_like(states)
    noises = np.zeros_like(states)
    nexts = np.zeros_like(states)
    logp = np.zeros((steps, batch), np.float32)
    times = np.array([1.0 - k * dt for k in range(steps)])
    stds = np.array([sde_std(t, dt, eta) for t in times])
    for k in range(steps):
        t = float(times[k])
        states[k] = x
        mean = x + np.float32(dt) * model.velocity(x, t, c)
        z = rng.standard_normal(x.shape).astype(np.float32)
        x = mean + np.float32(stds[k]) * z
        _check_state(x, "SDE sampling")
        means[k], noises[k], nexts[k] = mean, z, x
        if stds[k] > 0:
            logp[k] = ad.gaussian_logprob(x, ad.tensor(mean), stds[k]).data
        else:
            logp[k] = np.nan
    return SDEResult(x, states, times, means, stds, noises, nexts, logp)
