"""Flat key-path run configuration.

One ``section.key = value`` per line; ``#`` starts a comment. Values are
typed by the schema below. Lists are comma separated. Unknown keys are errors.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Any, Callable

from .grpo import CREDIT_RULES, SAMPLERS, GrpoConfig


class ConfigError(ValueError):
    """Invalid configuration text or value."""


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.replace("[", "").replace("]", "").split(",") if x.strip()]


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _str(text: str) -> str:
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    return text


def _opt_int(text: str) -> int | None:
    return None if text.lower() in ("none", "auto", "") else int(text)


_PARSERS: dict[type, Callable[[str], Any]] = {int: int, float: float, bool: _bool, str: _str, list: _int_list}


def _positive(x):
    return x > 0


def _nonneg(x):
    return x >= 0


# key -> (type, default, check, message)
SCHEMA: dict[str, tuple] = {
    "run.seed": (int, 0, None, ""),
    "run.out_dir": (str, "runs/default", None, ""),
    "data.kind": (str, "mixture", lambda v: v in ("mixture", "ring"), "must be 'mixture' or 'ring'"),
    "data.modes": (int, 8, lambda v: v >= 1, "must be ≥ 1"),
    "data.radius": (float, 4.0, _positive, "must be > 0"),
    "data.std": (float, 0.3, _nonneg, "must be ≥ 0"),
    "data.phase": (float, 0.0, None, ""),
    "model.dim": (int, 2, lambda v: v >= 1, "must be ≥ 1"),
    "model.hidden": (list, [128, 128, 128, 128], lambda v: all(h > 0 for h in v), "sizes must be > 0"),
    "model.time_dim": (int, 16, lambda v: v > 0 and v % 2 == 0, "must be a positive even number"),
    "model.cond_dim": (int, 16, _positive, "must be > 0"),
    "pretrain.steps": (int, 5000, lambda v: v >= 1, "must be ≥ 1"),
    "pretrain.batch_size": (int, 256, _positive, "must be > 0"),
    "pretrain.lr": (float, 1e-3, _positive, "must be > 0"),
    "pretrain.weight_decay": (float, 0.0, _nonneg, "must be ≥ 0"),
    "pretrain.checkpoint_every": (int, 0, _nonneg, "must be ≥ 0"),
    "schedule.total_steps": (int, 4, lambda v: v >= 1, "must be ≥ 1"),
    "policy.sigma": (float, 0.05, _positive, "must be > 0"),
    "policy.scale_with_t": (bool, False, None, ""),
    "reward.kind": (str, "composite", lambda v: v in ("composite", "mode", "quadrant"),
                    "must be composite, mode or quadrant"),
    "reward.w_mode": (float, 0.7, None, ""),
    "reward.w_quad": (float, 0.3, None, ""),
    "reward.sigma_r": (float, 1.0, _positive, "must be > 0"),
    "grpo.clip_range": (float, 0.2, lambda v: 0 < v < 1, "must be in (0, 1)"),
    "grpo.group_size": (int, 16, lambda v: v >= 2, "must be ≥ 2"),
    "grpo.conditions_per_iter": (int, 8, lambda v: v >= 1, "must be ≥ 1"),
    "grpo.n_adv": ("opt_int", None, lambda v: v is None or v >= 1, "must be ≥ 1"),
    "grpo.beta": (float, 0.0, _nonneg, "must be ≥ 0"),
    "grpo.inner_epochs": (int, 1, lambda v: v >= 1, "must be ≥ 1"),
    "grpo.lr": (float, 3e-4, _positive, "must be > 0"),
    "grpo.weight_decay": (float, 1e-4, _nonneg, "must be ≥ 0"),
    "grpo.iterations": (int, 500, lambda v: v >= 1, "must be ≥ 1"),
    "grpo.sampler": (str, "tafs", lambda v: v in SAMPLERS, f"must be one of {SAMPLERS}"),
    "grpo.sde_eta": (float, 0.7, _nonneg, "must be ≥ 0"),
    "grpo.credit": (str, "inherit", lambda v: v in CREDIT_RULES, f"must be one of {CREDIT_RULES}"),
    "grpo.adv_std_floor": (float, 1e-8, _positive, "must be > 0"),
    "grpo.checkpoint_every": (int, 100, _nonneg, "must be ≥ 0"),
    "eval.sweep_steps": (list, [2, 3, 4, 5, 6, 7, 8], lambda v: v and all(s >= 1 for s in v), "entries must be ≥ 1"),
    "eval.projections": (int, 64, _positive, "must be > 0"),
    "eval.samples": (int, 2048, _positive, "must be > 0"),
    "eval.ode_steps": (int, 32, _positive, "must be > 0"),
    "eval.correlation_rollouts": (int, 512, lambda v: v >= 30, "must be ≥ 30"),
    "ablate.preset": (str, "all", lambda v: v in ("table3", "table4", "table5", "all", "custom"),
                      "must be table3, table4, table5, all or custom"),
    "ablate.variants": (str, "", None, ""),
    "ablate.seeds": (list, [0, 1, 2], lambda v: len(v) >= 3, "needs at least 3 seeds"),
    "ablate.iterations": ("opt_int", None, lambda v: v is None or v >= 1, "must be ≥ 1"),
}

SECTIONS = sorted({k.split(".")[0] for k in SCHEMA})

# Budget and bookkeeping keys: changing them never changes what a given step computes,
# so a run may be resumed with a longer budget.
UNHASHED = {"run.out_dir", "pretrain.steps", "pretrain.checkpoint_every", "grpo.iterations", "grpo.checkpoint_every"}


def _parse_value(key: str, raw: str):
    kind = SCHEMA[key][0]
    try:
        if kind == "opt_int":
            return _opt_int(raw)
        return _PARSERS[kind](raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ", ".join(str(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        text = self.to_text() + "\n" + "\n".join(f"{k} = {v}" for k, v in overrides.items())
        return parse_config(text)

    def to_text(self) -> str:
        lines = []
        for section in SECTIONS:
            lines.append(f"# {section}")
            for key in SCHEMA:
                if key.startswith(section + "."):
                    lines.append(f"{key} = {_format_value(self.values[key])}")
        return "\n".join(lines) + "\n"

    def hash(self, sections: list[str] | None = None, include_seed: bool = True) -> bytes:
        """sha256 over the canonical text of ``sections`` (all when None), minus UNHASHED keys."""
        keys = [
            k for k in SCHEMA
            if k not in UNHASHED
            and (sections is None or k.split(".")[0] in sections or (include_seed and k == "run.seed"))
            and (include_seed or k != "run.seed")
        ]
        canon = "\n".join(f"{k}={_format_value(self.values[k])}" for k in keys)
        return hashlib.sha256(canon.encode()).digest()

    def grpo(self) -> GrpoConfig:
        v = self.values
        try:
            return GrpoConfig(
                clip_range=v["grpo.clip_range"],
                group_size=v["grpo.group_size"],
                conditions_per_iter=v["grpo.conditions_per_iter"],
                n_adv=v["grpo.n_adv"],
                inner_epochs=v["grpo.inner_epochs"],
                kl_coef=v["grpo.beta"],
                adv_std_floor=v["grpo.adv_std_floor"],
                lr=v["grpo.lr"],
                weight_decay=v["grpo.weight_decay"],
                iterations=v["grpo.iterations"],
                total_steps=v["schedule.total_steps"],
                sampler=v["grpo.sampler"],
                sde_eta=v["grpo.sde_eta"],
                policy_sigma=v["policy.sigma"],
                policy_scale_with_t=v["policy.scale_with_t"],
                credit=v["grpo.credit"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def parse_config(text: str) -> RunConfig:
    """Parse and validate config text; missing keys take their defaults."""
    values = {k: (list(spec[1]) if isinstance(spec[1], list) else spec[1]) for k, spec in SCHEMA.items()}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r} (line {lineno})")
        values[key] = _parse_value(key, raw)
    for key, (_, _, check, msg) in SCHEMA.items():
        if check is not None and not check(values[key]):
            raise ConfigError(f"{key}: {key.split('.', 1)[1]} {msg}")
    cfg = RunConfig(values)
    # cross-field constraints live in GrpoConfig
    cfg.grpo()
    if values["data.kind"] == "mixture" and values["model.dim"] != 2:
        raise ConfigError("model.dim must be 2 for the circular mixture target")
    return cfg


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def parse_override(arg: str) -> tuple[str, str]:
    if "=" not in arg:
        raise ConfigError(f"override {arg!r} is not key=value")
    k, v = arg.split("=", 1)
    k = k.strip()
    if k not in SCHEMA:
        raise ConfigError(f"unknown key {k!r}")
    return k, v.strip()
