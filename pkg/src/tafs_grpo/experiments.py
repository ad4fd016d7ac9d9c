"""Config-driven pipelines shared by the command line and the acceptance suite."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .autodiff import AdamState
from .checkpoint import Checkpoint, model_meta, rng_from_state
from .config import ConfigError, RunConfig
from .flow import VelocityField, pretrain
from .grpo import Trainer, train
from .metrics import ablation_runner, mean_terminal_reward, sw_to_target
from .rewards import CompositeReward, ModeReward, MixtureTarget, QuadrantReward, RingTarget, sample_conditional_batch

logger = logging.getLogger(__name__)

PRETRAIN_SECTIONS = ["data", "model", "pretrain"]
RL_SECTIONS = PRETRAIN_SECTIONS + ["schedule", "policy", "reward", "grpo"]


def build_target(cfg: RunConfig):
    if cfg["data.kind"] == "ring":
        return RingTarget(cfg["data.modes"], cfg["data.radius"], cfg["data.std"], cfg["data.phase"])
    return MixtureTarget.circle(cfg["data.modes"], cfg["data.radius"], cfg["data.std"], cfg["data.phase"])


def build_reward(cfg: RunConfig, target):
    mode = ModeReward(target.centers, cfg["reward.sigma_r"])
    kind = cfg["reward.kind"]
    if kind == "mode":
        return mode
    quad = QuadrantReward(target.quadrants())
    if kind == "quadrant":
        return quad
    return CompositeReward([(cfg["reward.w_mode"], mode), (cfg["reward.w_quad"], quad)])


def build_model(cfg: RunConfig, target, seed: int) -> VelocityField:
    return VelocityField(
        dim=cfg["model.dim"],
        num_conditions=target.num_modes,
        hidden=tuple(cfg["model.hidden"]),
        time_dim=cfg["model.time_dim"],
        cond_dim=cfg["model.cond_dim"],
        seed=seed,
    )


def pretrain_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1])


def rl_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 2])


@dataclass
class PretrainState:
    model: VelocityField
    optimizer: AdamState
    rng: np.random.Generator
    step: int = 0


def start_pretrain(cfg: RunConfig, resume: Checkpoint | None = None) -> PretrainState:
    target = build_target(cfg)
    seed = cfg["run.seed"]
    if resume is None:
        model = build_model(cfg, target, seed)
        opt = AdamState(lr=cfg["pretrain.lr"], weight_decay=cfg["pretrain.weight_decay"])
        return PretrainState(model, opt, pretrain_rng(seed), 0)
    if resume.meta.get("stage") != "pretrain":
        raise ConfigError("pretraining can only resume from a pretraining checkpoint")
    model = resume.build_model()
    return PretrainState(model, resume.optimizer, resume.make_rng(), resume.iteration)


def run_pretrain(cfg: RunConfig, state: PretrainState, on_checkpoint=None, on_losses=None) -> PretrainState:
    """Train until ``pretrain.steps``; ``on_checkpoint(state)`` fires every ``checkpoint_every`` steps."""
    target = build_target(cfg)
    batch = cfg["pretrain.batch_size"]
    total = cfg["pretrain.steps"]
    remaining = total - state.step
    if remaining <= 0:
        return state
    start = state.step
    flushed = 0

    def sample(rng):
        return sample_conditional_batch(target, batch, rng)

    # losses are flushed at every checkpoint so the loss log never runs ahead of it
    def hook(step, losses):
        nonlocal flushed
        state.step = start + step
        if on_losses is not None:
            on_losses(start + flushed + 1, losses[flushed:step])
        flushed = step
        if on_checkpoint is not None:
            on_checkpoint(state)

    every = cfg["pretrain.checkpoint_every"]
    res = pretrain(state.model, sample, remaining, state.optimizer, state.rng, every, hook if every else None)
    state.step = total
    if on_losses is not None and flushed < remaining:
        on_losses(start + flushed + 1, res.losses[flushed:])
    return state


def pretrain_checkpoint(cfg: RunConfig, state: PretrainState) -> Checkpoint:
    # weights_hash ignores the seed: RL runs under any seed may start from these weights
    meta = {
        "stage": "pretrain",
        "model": model_meta(state.model),
        "weights_hash": cfg.hash(PRETRAIN_SECTIONS, include_seed=False).hex(),
    }
    return Checkpoint(
        state.model.params.state(), state.optimizer, state.rng.bit_generator.state, state.step,
        cfg.hash(PRETRAIN_SECTIONS), meta,
    )


def make_trainer(cfg: RunConfig, model: VelocityField, seed: int | None = None, resume: Checkpoint | None = None) -> Trainer:
    """Fresh trainer on ``model``, or the exact state stored in an RL checkpoint."""
    target = build_target(cfg)
    gcfg = cfg.grpo()
    seed = cfg["run.seed"] if seed is None else seed
    reward = build_reward(cfg, target)
    if resume is not None and resume.meta.get("stage") == "rl":
        model = resume.build_model()
        trainer = Trainer(model, gcfg, reward, resume.make_rng(), resume.optimizer, iteration=resume.iteration)
        if gcfg.kl_coef > 0:
            ref = resume.meta.get("reference")
            if ref is None:
                raise ConfigError("RL checkpoint has no KL reference policy")
            trainer.reference = model.clone()
            trainer.reference.params.load_state({k: np.asarray(v, np.float32) for k, v in ref.items()})
        return trainer
    return Trainer(model, gcfg, reward, rl_rng(seed))


def rl_checkpoint(cfg: RunConfig, trainer: Trainer) -> Checkpoint:
    meta = {"stage": "rl", "model": model_meta(trainer.model)}
    if trainer.reference is not None:
        # JSON keeps floats exact via repr; the reference is small at this scale
        meta["reference"] = {k: v.astype(float).tolist() for k, v in trainer.reference.params.state().items()}
    return Checkpoint(
        trainer.model.params.state(), trainer.optimizer, trainer.rng.bit_generator.state, trainer.iteration,
        cfg.hash(RL_SECTIONS), meta,
    )


def deterministic_metrics(history_row: dict) -> dict:
    return {k: v for k, v in history_row.items() if k != "seconds"}


def evaluate_policy(cfg: RunConfig, model, seed: int = 0, steps: int | None = None) -> dict:
    """Terminal reward and sliced-Wasserstein of deterministic generation.

    SDE-trained policies are evaluated with the Euler ODE sampler they were
    rolled out with; annealed policies with deterministic annealed sampling.
    """
    target = build_target(cfg)
    reward = build_reward(cfg, target)
    S = cfg["schedule.total_steps"] if steps is None else steps
    sampler = "ode" if cfg["grpo.sampler"] == "sde" else "tafs"
    per = max(1, cfg["eval.samples"] // target.num_modes)
    return {
        "terminal_reward": mean_terminal_reward(model, reward, S, per, seed, sampler),
        "sliced_w": sw_to_target(model, target, S, per, seed, sampler, cfg["eval.projections"]),
    }


ABLATION_PRESETS = {
    "table3": {"full": {}, "sde": {"grpo.sampler": "sde", "grpo.n_adv": "1"}, "n_adv_1": {"grpo.n_adv": "1"}},
    "table4": {"S2": {"schedule.total_steps": "2"}, "S3": {"schedule.total_steps": "3"}, "S4": {"schedule.total_steps": "4"}},
    "table5": {"n_adv_1": {"grpo.n_adv": "1"}, "n_adv_2": {"grpo.n_adv": "2"}, "n_adv_3": {"grpo.n_adv": "3"}},
}


def parse_variants(text: str) -> dict[str, dict[str, str]]:
    """``name: key=value; key=value | name2: ...`` into override dicts."""
    out: dict[str, dict[str, str]] = {}
    for chunk in text.split("|"):
        chunk = chunk.strip()
        if not chunk:
            continue
        name, _, body = chunk.partition(":")
        name = name.strip()
        if not name or name in out:
            raise ConfigError(f"ablate.variants: empty or duplicate variant name {name!r}")
        ov = {}
        for item in body.split(";"):
            item = item.strip()
            if item:
                k, eq, v = item.partition("=")
                if not eq:
                    raise ConfigError(f"ablate.variants: {item!r} is not key=value")
                ov[k.strip()] = v.strip()
        out[name] = ov
    return out


def ablation_variants(cfg: RunConfig) -> dict[str, dict[str, str]]:
    preset = cfg["ablate.preset"]
    if preset == "custom":
        variants = parse_variants(cfg["ablate.variants"])
    elif preset == "all":
        variants = {}
        for table in ("table3", "table4", "table5"):
            variants.update(ABLATION_PRESETS[table])
    else:
        variants = dict(ABLATION_PRESETS[preset])
    if len(variants) < 2:
        raise ConfigError("ablation needs at least two variants")
    return variants


def run_ablation(cfg: RunConfig, base_model: VelocityField, on_run=None):
    """Train every variant from ``base_model`` under every seed in ``ablate.seeds``."""
    iters = cfg["ablate.iterations"] or cfg["grpo.iterations"]
    variants = {}
    for name, ov in ablation_variants(cfg).items():
        vcfg = cfg.with_overrides({**ov, "grpo.iterations": str(iters)})

        def run(seed, vcfg=vcfg, name=name):
            trainer = make_trainer(vcfg, base_model.clone(), seed=seed)
            t0 = time.perf_counter()
            train(trainer, iters)
            sec = (time.perf_counter() - t0) / iters
            ev = evaluate_policy(vcfg, trainer.model, seed=seed)
            if on_run is not None:
                on_run(name, seed, ev, sec)
            return ev["terminal_reward"], ev["sliced_w"], sec

        variants[name] = run
    return ablation_runner(variants, cfg["ablate.seeds"])


__all__ = [
    "ABLATION_PRESETS",
    "PRETRAIN_SECTIONS",
    "RL_SECTIONS",
    "build_model",
    "build_reward",
    "build_target",
    "evaluate_policy",
    "make_trainer",
    "pretrain_checkpoint",
    "rl_checkpoint",
    "run_ablation",
    "run_pretrain",
    "start_pretrain",
    "rng_from_state",
]
