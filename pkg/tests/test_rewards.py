from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tafs_grpo.rewards import (
    ConstantReward,
    MixtureTarget,
    ModeReward,
    QuadrantReward,
    RingTarget,
    composite_reward,
    default_reward,
    evaluate_group,
    mode_reward,
    quadrant_reward,
    sample_target,
)
from tafs_grpo.sampler import AnnealSchedule, PolicyHead, rollout_batch

from conftest import make_tiny

CENTERS = np.array([[4.0, 0.0], [0.0, 4.0]])


def test_mode_reward_values():
    assert mode_reward(CENTERS[0], 0, CENTERS) == 1.0
    assert mode_reward(CENTERS[0] + [1.0, 1.0], 0, CENTERS) == pytest.approx(math.exp(-1), abs=1e-5)
    assert mode_reward(CENTERS[0] + [10.0, 0.0], 0, CENTERS) == pytest.approx(1.93e-22, rel=1e-2)


def test_mode_reward_errors():
    with pytest.raises(ValueError):
        mode_reward([0.0, 0.0], 2, CENTERS)
    with pytest.raises(ValueError):
        ModeReward(CENTERS, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 20), st.floats(0.01, 20), st.floats(0, 2 * np.pi))
def test_mode_reward_strictly_decreasing(r1, gap, ang):
    u = np.array([np.cos(ang), np.sin(ang)])
    near = mode_reward(CENTERS[1] + r1 * u, 1, CENTERS, 5.0)
    far = mode_reward(CENTERS[1] + (r1 + gap) * u, 1, CENTERS, 5.0)
    assert far < near or near == 0.0


def test_quadrant_reward_cases():
    assert quadrant_reward([1.0, 1.0], 0) == 1.0
    assert quadrant_reward([-1.0, 1.0], 0) == 0.0
    assert quadrant_reward([0.0, 1.0], 0) == 1.0
    assert quadrant_reward([-2.0, -0.5], 2) == 1.0
    assert quadrant_reward([0.0, 0.0], 3) == 1.0
    with pytest.raises(ValueError):
        QuadrantReward()(np.zeros((1, 3)), 0)


def test_composite_reward_cases(rng):
    x = rng.normal(size=(10, 2)) * 3
    c = rng.integers(0, 2, 10)
    m = ModeReward(CENTERS)
    assert np.array_equal(composite_reward([(1.0, m)])(x, c), m(x, c))
    assert np.allclose(composite_reward([(0.5, m), (0.5, m)])(x, c), m(x, c))
    q = QuadrantReward([0, 1])
    assert np.array_equal(composite_reward([(1.0, m), (0.0, q)])(x, c), m(x, c))
    with pytest.raises(ValueError):
        composite_reward([])
    with pytest.raises(ValueError):
        composite_reward([(float("nan"), m)])


def test_default_reward_assigns_each_mode_its_quadrant():
    target = MixtureTarget.circle(8, 4.0)
    assert list(target.quadrants()) == [0, 0, 1, 1, 2, 2, 3, 3]
    r = default_reward(target)
    vals = r(target.centers, np.arange(8))
    assert np.allclose(vals, 1.0)


def _batch(S=4, G=3, seed=0):
    return rollout_batch([0, 1], AnnealSchedule(S), G, make_tiny(seed), PolicyHead(), np.random.default_rng(seed))


def test_evaluate_group_terminal_only():
    t = evaluate_group(_batch(), ModeReward(np.zeros((3, 2))), 1)
    assert t.evaluated_steps == [4]
    assert np.all(np.isnan(t.values[:, :3])) and np.all(np.isfinite(t.values[:, 3]))


def test_evaluate_group_full_step_aware():
    t = evaluate_group(_batch(), ModeReward(np.zeros((3, 2))), 3)
    assert t.evaluated_steps == [2, 3, 4]
    assert np.all(np.isnan(t.values[:, 0]))


def test_evaluate_group_constant_reward():
    t = evaluate_group(_batch(), ConstantReward(0.5), 3)
    assert np.all(t.values[:, 1:] == 0.5)


def test_evaluate_group_range():
    b = _batch()
    for bad in (0, 4):
        with pytest.raises(ValueError):
            evaluate_group(b, ConstantReward(), bad)


def test_evaluate_group_uses_only_stored_states():
    b = _batch()
    seen = []

    class Spy(ModeReward):
        def score(self, x, c):
            seen.append(x.copy())
            return super().score(x, c)

    evaluate_group(b, Spy(np.zeros((3, 2))), 3)
    for k, x in zip([1, 2, 3], seen):
        assert np.array_equal(x, b.samples[k].astype(np.float64))


def test_sample_target_point_mass_and_degenerate_weights(rng):
    t = MixtureTarget(CENTERS, std=0.0)
    assert np.array_equal(sample_target(t, 5, 1, rng), np.tile(CENTERS[1], (5, 1)).astype(np.float32))
    t2 = MixtureTarget(CENTERS, std=0.0, weights=[1.0, 0.0])
    assert np.all(sample_target(t2, 50, None, rng) == CENTERS[0])
    with pytest.raises(ValueError):
        sample_target(t, 0, 0, rng)


def test_sample_target_conditional_mean():
    t = MixtureTarget(CENTERS, std=0.3)
    x = sample_target(t, 100_000, 0, np.random.default_rng(8))
    se = 0.3 / np.sqrt(100_000)
    assert np.all(np.abs(x.mean(axis=0) - CENTERS[0]) < 5 * se)


def test_mixture_weights_validated():
    with pytest.raises(ValueError):
        MixtureTarget(CENTERS, weights=[0.7, 0.7])
    with pytest.raises(ValueError):
        MixtureTarget(CENTERS, weights=[1.5, -0.5])


def test_ring_target_sectors(rng):
    ring = RingTarget(4, radius=3.0, width=0.0)
    x = sample_target(ring, 200, 1, rng)
    assert np.allclose(np.linalg.norm(x, axis=1), 3.0, atol=1e-5)
    ang = np.mod(np.arctan2(x[:, 1], x[:, 0]), 2 * np.pi)
    assert np.all((ang >= np.pi / 2 - 1e-6) & (ang <= np.pi + 1e-6))
    assert list(ring.quadrants()) == [0, 1, 2, 3]
