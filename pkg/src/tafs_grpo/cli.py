"""Command line entry point: ``tafs-grpo <command> [flags] [key=value ...]``.

Exit codes: 0 success, 1 usage/validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from .artifacts import emit_scatter_svg, read_metrics, write_metrics
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_config, parse_override
from .experiments import (
    PRETRAIN_SECTIONS,
    RL_SECTIONS,
    build_reward,
    build_target,
    deterministic_metrics,
    evaluate_policy,
    make_trainer,
    pretrain_checkpoint,
    rl_checkpoint,
    run_ablation,
    run_pretrain,
    start_pretrain,
)
from .grpo import train
from .metrics import correlate_step_rewards, directional_flags, generate, step_sweep, sw_to_target, target_samples
from .sampler import AnnealSchedule, PolicyHead

logger = logging.getLogger("tafs_grpo")

COMMANDS = ("pretrain", "rl-train", "sample", "eval", "sweep-steps", "ablate", "correlate")
OUT_ENV = "TAFS_GRPO_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tafs-grpo", description="Annealed few-step sampling with step-aware GRPO on 2-D flows.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    helps = {
        "pretrain": "conditional flow-matching pretraining",
        "rl-train": "step-aware GRPO fine-tuning",
        "sample": "draw samples from a checkpoint",
        "eval": "terminal reward and sliced-Wasserstein of a checkpoint",
        "sweep-steps": "terminal reward across inference step counts",
        "ablate": "ablation matrix over variants and seeds",
        "correlate": "intermediate-vs-final reward correlation",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, help=helps[name])
        sp.add_argument("--config", metavar="PATH", help="flat key-path config file")
        sp.add_argument("--seed", type=int, help="overrides run.seed")
        sp.add_argument("--out", metavar="DIR", help=f"output directory (else ${OUT_ENV}, else run.out_dir)")
        sp.add_argument("--resume", metavar="PATH", help="checkpoint to resume or start from")
        sp.add_argument("--allow-config-mismatch", action="store_true",
                        help="accept a checkpoint whose config hash differs")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "sample":
            sp.add_argument("--sampler", choices=("tafs", "ode"), default="tafs")
        sp.add_argument("overrides", nargs="*", metavar="key=value")
    return p


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else parse_config("")
    ov = dict(parse_override(o) for o in args.overrides)
    if args.seed is not None:
        ov["run.seed"] = str(args.seed)
    out = args.out or os.environ.get(OUT_ENV)
    if out:
        ov["run.out_dir"] = out
    return cfg.with_overrides(ov) if ov else cfg


def _prepare_out(cfg: RunConfig) -> str:
    out = cfg["run.out_dir"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    return out


def _check_hash(ck: Checkpoint, cfg: RunConfig, sections, allow: bool, path: str) -> None:
    if ck.config_hash != cfg.hash(sections):
        msg = f"{path}: checkpoint config hash does not match the current config ({', '.join(sections)})"
        if not allow:
            raise ConfigError(msg + "; pass --allow-config-mismatch to override")
        logger.warning(msg)


def _check_weights(ck: Checkpoint, cfg: RunConfig, allow: bool, path: str) -> None:
    """Starting a new stage from a checkpoint: only the model-defining sections must agree."""
    if ck.meta.get("stage") == "rl":
        _check_hash(ck, cfg, RL_SECTIONS, allow, path)
        return
    want = cfg.hash(PRETRAIN_SECTIONS, include_seed=False).hex()
    if ck.meta.get("weights_hash") != want:
        msg = f"{path}: pretrained weights come from a different data/model/pretrain config"
        if not allow:
            raise ConfigError(msg + "; pass --allow-config-mismatch to override")
        logger.warning(msg)


def _load_model(args, cfg):
    if not args.resume:
        raise ConfigError(f"{args.command} needs --resume CHECKPOINT")
    ck = load_checkpoint(args.resume)
    _check_weights(ck, cfg, args.allow_config_mismatch, args.resume)
    return ck.build_model()


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _scatter(cfg, model, path, title, steps=None, sampler="tafs"):
    target = build_target(cfg)
    per = max(1, min(cfg["eval.samples"], 4096) // target.num_modes)
    S = steps or cfg["schedule.total_steps"]
    x, c = generate(model, per, cfg["run.seed"], sampler, S)
    emit_scatter_svg([("target", target_samples(target, c, cfg["run.seed"])), ("model", x)], path, title)


def cmd_pretrain(args, cfg, out) -> None:
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        _check_hash(resume, cfg, PRETRAIN_SECTIONS, args.allow_config_mismatch, args.resume)
    state = start_pretrain(cfg, resume)
    ck_path = os.path.join(out, "pretrain.ckpt")
    loss_path = os.path.join(out, "pretrain_loss.csv")
    if resume is None:
        write_metrics(loss_path, [], ["step", "loss"])
    else:
        _truncate_csv(loss_path, "step", state.step, ["step", "loss"])

    def on_losses(first, losses):
        write_metrics(loss_path, [{"step": first + i, "loss": v} for i, v in enumerate(losses)], ["step", "loss"], append=True)

    def on_checkpoint(st):
        save_checkpoint(ck_path, pretrain_checkpoint(cfg, st))

    t0 = time.perf_counter()
    run_pretrain(cfg, state, on_checkpoint, on_losses)
    save_checkpoint(ck_path, pretrain_checkpoint(cfg, state))
    sw = sw_to_target(state.model, build_target(cfg), cfg["eval.ode_steps"], max(1, cfg["eval.samples"] // state.model.num_conditions),
                      cfg["run.seed"], "ode", cfg["eval.projections"])
    _scatter(cfg, state.model, os.path.join(out, "pretrain_samples.svg"), "pretrained (ODE)", cfg["eval.ode_steps"], "ode")
    print(f"pretrain: {state.step} steps in {time.perf_counter() - t0:.1f}s, sliced-W {sw:.4f} -> {ck_path}")


def _truncate_csv(path, key, upto, columns) -> None:
    """Drop rows written after the checkpoint being resumed from."""
    rows = read_metrics(path) if os.path.exists(path) else []
    rows = [r for r in rows if int(r[key]) <= upto]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for r in rows:
            fh.write(",".join(r[c] for c in columns) + "\n")


def cmd_rl_train(args, cfg, out) -> None:
    ck_path = os.path.join(out, "rl.ckpt")
    csv_path = os.path.join(out, "rl_metrics.csv")
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None and resume.meta.get("stage") == "rl":
        _check_hash(resume, cfg, RL_SECTIONS, args.allow_config_mismatch, args.resume)
        trainer = make_trainer(cfg, None, resume=resume)
    else:
        if resume is None:
            logger.info("no checkpoint given: pretraining first")
            state = run_pretrain(cfg, start_pretrain(cfg))
            save_checkpoint(os.path.join(out, "pretrain.ckpt"), pretrain_checkpoint(cfg, state))
            model = state.model
        else:
            _check_weights(resume, cfg, args.allow_config_mismatch, args.resume)
            model = resume.build_model()
        trainer = make_trainer(cfg, model)
        _scatter(cfg, model, os.path.join(out, "samples_initial.svg"), "before RL")
    start = trainer.iteration
    remaining = cfg["grpo.iterations"] - start
    cols = None
    if start and os.path.exists(csv_path):
        with open(csv_path, encoding="utf-8") as fh:
            cols = fh.readline().strip().split(",")
        _truncate_csv(csv_path, "iteration", start, cols)
    elif os.path.exists(csv_path):
        os.remove(csv_path)
    every = cfg["grpo.checkpoint_every"]

    def on_iteration(tr, m):
        row = deterministic_metrics(m)
        write_metrics(csv_path, [row], list(row), append=True)
        if tr.iteration % 50 == 0:
            logger.info("iter %d terminal reward %.4f (%.1f ms)", tr.iteration, m["terminal_reward"], 1e3 * m["seconds"])
        if every and tr.iteration % every == 0:
            save_checkpoint(ck_path, rl_checkpoint(cfg, tr))

    t0 = time.perf_counter()
    if remaining > 0:
        train(trainer, remaining, on_iteration)
    save_checkpoint(ck_path, rl_checkpoint(cfg, trainer))
    _scatter(cfg, trainer.model, os.path.join(out, "samples_final.svg"), f"after {trainer.iteration} RL iterations")
    ev = evaluate_policy(cfg, trainer.model, cfg["run.seed"])
    _write_json(os.path.join(out, "rl_eval.json"), ev)
    print(f"rl-train: {trainer.iteration} iterations ({time.perf_counter() - t0:.1f}s), "
          f"terminal reward {ev['terminal_reward']:.4f}, sliced-W {ev['sliced_w']:.4f} -> {ck_path}")


def cmd_sample(args, cfg, out) -> None:
    model = _load_model(args, cfg)
    per = max(1, cfg["eval.samples"] // model.num_conditions)
    x, c = generate(model, per, cfg["run.seed"], args.sampler, cfg["schedule.total_steps"])
    rows = [{"x": float(p[0]), "y": float(p[1]), "condition": int(k)} for p, k in zip(x, c)]
    write_metrics(os.path.join(out, "samples.csv"), rows, ["x", "y", "condition"])
    target = build_target(cfg)
    emit_scatter_svg([("target", target_samples(target, c, cfg["run.seed"])), ("model", x)],
                     os.path.join(out, "samples.svg"), f"{args.sampler}, {cfg['schedule.total_steps']} steps")
    print(f"sample: {len(rows)} points -> {out}")


def cmd_eval(args, cfg, out) -> None:
    model = _load_model(args, cfg)
    ev = evaluate_policy(cfg, model, cfg["run.seed"])
    target = build_target(cfg)
    per = max(1, cfg["eval.samples"] // model.num_conditions)
    ev["sliced_w_ode"] = sw_to_target(model, target, cfg["eval.ode_steps"], per, cfg["run.seed"], "ode", cfg["eval.projections"])
    write_metrics(os.path.join(out, "eval.csv"), [ev], ["terminal_reward", "sliced_w", "sliced_w_ode"])
    _write_json(os.path.join(out, "eval.json"), ev)
    print("eval: " + ", ".join(f"{k} {v:.4f}" for k, v in ev.items()))


def cmd_sweep(args, cfg, out) -> None:
    model = _load_model(args, cfg)
    reward = build_reward(cfg, build_target(cfg))
    res = step_sweep(model, reward, cfg["eval.sweep_steps"], cfg["eval.samples"], cfg["run.seed"])
    rows = [{"steps": s, "terminal_reward": r} for s, r in res.items()]
    write_metrics(os.path.join(out, "sweep.csv"), rows, ["steps", "terminal_reward"])
    lo, hi = min(res.values()), max(res.values())
    margin = 1 - lo / hi if hi > 0 else float("nan")
    _write_json(os.path.join(out, "sweep.json"), {"rewards": {str(k): v for k, v in res.items()}, "min_over_max_gap": margin})
    print("sweep-steps: " + ", ".join(f"S={s}: {r:.4f}" for s, r in res.items()) + f" (min within {100 * margin:.1f}% of max)")


def cmd_correlate(args, cfg, out) -> None:
    model = _load_model(args, cfg)
    reward = build_reward(cfg, build_target(cfg))
    head = PolicyHead(cfg["policy.sigma"], cfg["policy.scale_with_t"])
    rng = np.random.default_rng([cfg["run.seed"], 3])
    res = correlate_step_rewards(model, reward, AnnealSchedule(cfg["schedule.total_steps"]),
                                 cfg["eval.correlation_rollouts"], rng, head)
    rows = [{"step": s, "final_step": cfg["schedule.total_steps"], "pearson": r} for s, r in res.items()]
    write_metrics(os.path.join(out, "correlate.csv"), rows, ["step", "final_step", "pearson"])
    print("correlate: " + ", ".join(f"r(R{s}, R{cfg['schedule.total_steps']}) = {r:.3f}" for s, r in res.items()))


def cmd_ablate(args, cfg, out) -> None:
    if args.resume:
        model = _load_model(args, cfg)
    else:
        logger.info("no checkpoint given: pretraining the shared base model")
        model = run_pretrain(cfg, start_pretrain(cfg)).model
    runs = []

    def on_run(name, seed, ev, sec):
        runs.append({"variant": name, "seed": seed, **ev})
        logger.info("%s seed %d: %s", name, seed, ev)

    results = run_ablation(cfg, model, on_run)
    write_metrics(os.path.join(out, "ablation_runs.csv"), runs, ["variant", "seed", "terminal_reward", "sliced_w"])
    summary = [r.summary() for r in results.values()]
    write_metrics(os.path.join(out, "ablation_summary.csv"), summary,
                  ["name", "reward_mean", "reward_std", "sw_mean", "sw_std", "n_seeds"])
    flags = []
    for better, worse in (("full", "n_adv_1"), ("full", "sde"), ("n_adv_3", "n_adv_1"), ("S4", "S3"), ("S3", "S2")):
        if better in results and worse in results:
            flags.append(directional_flags(results, better, worse))
    timing = {k: float(np.mean(v.seconds_per_iter)) for k, v in results.items()}
    _write_json(os.path.join(out, "ablation.json"), {"summary": summary, "directions": flags, "seconds_per_iter": timing})
    for s in summary:
        print(f"{s['name']:>10}: reward {s['reward_mean']:.4f} ± {s['reward_std']:.4f}, "
              f"sliced-W {s['sw_mean']:.4f} ± {s['sw_std']:.4f}")
    for f in flags:
        print(f"{f['claim']}: {f['wins']}/{f['n']} seeds (sign test p = {f['sign_test_p']:.3f})")


HANDLERS = {
    "pretrain": cmd_pretrain,
    "rl-train": cmd_rl_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "sweep-steps": cmd_sweep,
    "ablate": cmd_ablate,
    "correlate": cmd_correlate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _resolve_config(args)
        out = _prepare_out(cfg)
    except UsageError as exc:
        print(f"tafs-grpo: error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, OSError) as exc:
        print(f"tafs-grpo: config error: {exc}", file=sys.stderr)
        return 1
    try:
        HANDLERS[args.command](args, cfg, out)
    except (ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"tafs-grpo: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure: report, do not dump a traceback unless verbose
        if args.verbose:
            logger.exception("run failed")
        print(f"tafs-grpo: run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
