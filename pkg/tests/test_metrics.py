from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tafs_grpo.flow import PointMassField
from tafs_grpo.metrics import (
    ablation_runner,
    correlate_step_rewards,
    directional_flags,
    pearson,
    sign_test_p,
    sliced_wasserstein,
    step_sweep,
)
from tafs_grpo.rewards import ConstantReward, ModeReward
from tafs_grpo.sampler import AnnealSchedule, PolicyHead

from conftest import make_tiny


def test_sliced_wasserstein_examples(rng):
    a = rng.normal(size=(50, 2))
    assert sliced_wasserstein(a, a) == 0.0
    assert sliced_wasserstein(np.array([0.0]), np.array([1.0])) == pytest.approx(1.0)
    assert sliced_wasserstein(np.array([0.0, 2.0]), np.array([1.0, 3.0])) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        sliced_wasserstein(np.zeros((0, 2)), a)
    with pytest.raises(ValueError):
        sliced_wasserstein(np.zeros((3, 3)), a)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5), st.floats(-5, 5))
def test_sliced_wasserstein_symmetry_and_translation(seed, dx, dy):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(40, 2)), rng.normal(size=(40, 2)) + 1
    d = sliced_wasserstein(a, b, rng=np.random.default_rng(1))
    assert d == pytest.approx(sliced_wasserstein(b, a, rng=np.random.default_rng(1)), abs=1e-12)
    shift = np.array([dx, dy])
    assert sliced_wasserstein(a + shift, b + shift, rng=np.random.default_rng(1)) == pytest.approx(d, abs=1e-9)
    assert d >= 0


def test_sliced_wasserstein_subsamples_larger_set(rng):
    a = rng.normal(size=(300, 2))
    assert sliced_wasserstein(a, a[:100]) < 0.3


def test_pearson_examples():
    assert pearson([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert pearson([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)
    with pytest.raises(ValueError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson([1], [1])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(-100, 100))
def test_pearson_affine_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=20), rng.normal(size=20)
    assert pearson(a * x + b, y) == pytest.approx(pearson(x, y), abs=1e-9)


def test_correlation_undefined_for_constant_reward(tiny_model, rng):
    with pytest.raises(ValueError):
        correlate_step_rewards(tiny_model, ConstantReward(), AnnealSchedule(4), 30, rng)


def test_correlation_defined_with_oracle_field(rng):
    f = PointMassField(np.array([1.0, 1.0]))
    out = correlate_step_rewards(f, ModeReward(np.array([[1.0, 1.0]])), AnnealSchedule(4), 60, rng, PolicyHead(0.1))
    assert sorted(out) == [2, 3]
    assert all(-1 <= r <= 1 for r in out.values())


def test_correlation_needs_enough_rollouts(tiny_model, rng):
    with pytest.raises(ValueError):
        correlate_step_rewards(tiny_model, ModeReward(np.zeros((3, 2))), AnnealSchedule(4), 29, rng)


def test_step_sweep_rows_and_oracle_independence():
    f = PointMassField(np.array([0.5, -0.5]))
    r = ModeReward(np.array([[0.5, -0.5]]))
    assert list(step_sweep(f, r, [3], 16)) == [3]
    out = step_sweep(f, r, [1, 2, 4, 8], 16)
    assert all(v == pytest.approx(1.0, abs=1e-6) for v in out.values())


def test_step_sweep_is_deterministic(tiny_model):
    r = ModeReward(np.zeros((3, 2)))
    assert step_sweep(tiny_model, r, [2, 3], 30, seed=4) == step_sweep(tiny_model, r, [2, 3], 30, seed=4)


def test_sign_test():
    assert sign_test_p(3, 3) == pytest.approx(0.125)
    assert sign_test_p(0, 3) == pytest.approx(1.0)


def test_ablation_runner_contracts():
    run = lambda seed: (0.5 + 0.01 * seed, 0.1, 0.0)
    res = ablation_runner({"a": run, "b": run}, [0, 1, 2])
    assert res["a"].summary()["reward_mean"] == res["b"].summary()["reward_mean"]
    flags = directional_flags(res, "a", "b")
    assert flags["wins"] == 3 and flags["holds_all"]
    with pytest.raises(ValueError):
        ablation_runner({"a": run}, [0, 1, 2])
    with pytest.raises(ValueError):
        ablation_runner({"a": run, "b": run}, [0, 1])
