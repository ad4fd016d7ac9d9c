from __future__ import annotations

import pytest

from tafs_grpo.config import SCHEMA, ConfigError, parse_config, parse_override


def test_empty_text_gives_defaults():
    cfg = parse_config("")
    assert all(cfg[k] == spec[1] for k, spec in SCHEMA.items())
    g = cfg.grpo()
    assert g.lr == 3e-4 and g.weight_decay == 1e-4 and g.clip_range == 0.2


def test_group_size_constraint_names_key():
    with pytest.raises(ConfigError, match="group_size must be ≥ 2"):
        parse_config("grpo.group_size = 1")


def test_total_steps_four_gives_three_annealed_steps():
    cfg = parse_config("schedule.total_steps = 4")
    assert cfg.grpo().schedule.annealed_steps == 3


def test_unknown_key_and_type_errors():
    with pytest.raises(ConfigError, match="grpo.nope"):
        parse_config("grpo.nope = 3")
    with pytest.raises(ConfigError, match="grpo.group_size"):
        parse_config("grpo.group_size = many")
    with pytest.raises(ConfigError):
        parse_config("just text")


def test_comments_lists_and_bools():
    cfg = parse_config("""
    # a comment
    model.hidden = 32, 32   # trailing comment
    policy.scale_with_t = true
    grpo.n_adv = 2
    """)
    assert cfg["model.hidden"] == [32, 32] and cfg["policy.scale_with_t"] is True and cfg["grpo.n_adv"] == 2


def test_cross_field_validation():
    with pytest.raises(ConfigError):
        parse_config("schedule.total_steps = 4\ngrpo.n_adv = 4")
    with pytest.raises(ConfigError):
        parse_config("grpo.sampler = sde\ngrpo.sde_eta = 0")


def test_echo_roundtrip_and_hash():
    cfg = parse_config("run.seed = 3\ngrpo.clip_range = 0.1\nrun.out_dir = a")
    again = parse_config(cfg.to_text())
    assert again.values == cfg.values
    assert cfg.hash() == again.with_overrides({"run.out_dir": "b", "grpo.iterations": "9"}).hash()
    assert cfg.hash() != cfg.with_overrides({"grpo.clip_range": "0.3"}).hash()
    assert cfg.hash(["data"]) == cfg.with_overrides({"grpo.clip_range": "0.3"}).hash(["data"])
    assert cfg.hash(["data"]) != cfg.with_overrides({"run.seed": "4"}).hash(["data"])
    assert cfg.hash(["data"], include_seed=False) == cfg.with_overrides({"run.seed": "4"}).hash(["data"], include_seed=False)


def test_parse_override():
    assert parse_override("grpo.lr=1e-3") == ("grpo.lr", "1e-3")
    with pytest.raises(ConfigError):
        parse_override("grpo.lr")
    with pytest.raises(ConfigError):
        parse_override("bogus.key=1")
