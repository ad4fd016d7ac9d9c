from __future__ import annotations

import numpy as np
import pytest

from tafs_grpo import autodiff as ad
from tafs_grpo.flow import PointMassField
from tafs_grpo.sampler import (
    AnnealSchedule,
    PolicyHead,
    one_step_estimate,
    policy_step,
    recompute_logprobs,
    renoise,
    rollout,
    rollout_batch,
)

from conftest import make_tiny
from test_flow import ConstantField


class CountingModel:
    """Wraps a model and counts forward passes."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0
        self.dim = inner.dim
        self.num_conditions = inner.num_conditions

    def __call__(self, x, t, c):
        self.calls += 1
        return self.inner(x, t, c)


def test_schedule_grid():
    s = AnnealSchedule(4)
    assert s.tau == 0.25 and s.annealed_steps == 3
    assert np.allclose(s.timesteps, [1.0, 0.75, 0.5, 0.25])
    with pytest.raises(ValueError):
        AnnealSchedule(0)


@pytest.mark.parametrize("S", [1, 2, 5, 9])
def test_schedule_invariants(S):
    t = AnnealSchedule(S).timesteps
    assert t[0] == 1.0 and t[-1] == pytest.approx(1 / S) and t[-1] > 0
    assert np.all(np.diff(t) < 0)


def test_one_step_estimate_cases(rng):
    pt = np.array([1.0, 2.0])
    for t in (1.0, 0.6, 0.01):
        assert np.allclose(one_step_estimate(rng.normal(size=(3, 2)), t, 0, PointMassField(pt)).data, pt, atol=1e-5)
    zero = ConstantField([0.0, 0.0])
    assert np.array_equal(one_step_estimate(np.array([[2.0, -1.0]]), 0.7, 0, zero).data, [[2.0, -1.0]])
    unit = ConstantField([1.0, 0.0])
    assert np.allclose(one_step_estimate(np.zeros((1, 2)), 0.5, 0, unit).data, [[0.5, 0.0]])
    with pytest.raises(ValueError):
        one_step_estimate(np.zeros((1, 2)), 0.0, 0, zero)


def test_one_step_estimate_differentiable(tiny_model, rng):
    x = rng.normal(size=(3, 2))
    err = ad.finite_diff_check(tiny_model.params, lambda: ad.mean(one_step_estimate(x, 0.5, [0, 1, 2], tiny_model)), rng=rng)
    assert err < 1e-4


def test_renoise_cases(rng):
    x, eps = renoise(np.zeros((1, 2)), 0.5, rng, eps=np.array([[2.0, 2.0]]))
    assert np.allclose(x, [[1.0, 1.0]])
    x0 = np.array([[3.0, -1.0]])
    e = np.array([[0.5, 0.25]])
    assert np.allclose(renoise(x0, 1e-7, rng, e)[0], x0, atol=1e-6)
    assert np.allclose(renoise(x0, 1 - 1e-7, rng, e)[0], e, atol=1e-6)
    for bad in (0.0, 1.0):
        with pytest.raises(ValueError):
            renoise(x0, bad, rng)


def test_renoise_marginal_moments():
    n, t = 10_000, 0.3
    x0 = np.array([2.0, -1.0])
    x, _ = renoise(np.tile(x0, (n, 1)), t, np.random.default_rng(2))
    se_mean = t / np.sqrt(n)
    assert np.all(np.abs(x.mean(axis=0) - (1 - t) * x0) < 5 * se_mean)
    var = x.var(axis=0)
    se_var = t * t * np.sqrt(2 / (n - 1))
    assert np.all(np.abs(var - t * t) < 5 * se_var)


def test_policy_step_deterministic_and_density(rng):
    f = ConstantField([0.0])
    x = np.array([[0.4]])
    s, lp, m = policy_step(x, 0.5, 0, f, PolicyHead(1.0), rng, deterministic=True)
    assert lp is None and np.array_equal(s, m)
    # log-density at the mean, d = 1, sigma = 1
    out = ad.gaussian_logprob(m, ad.tensor(m), 1.0)
    assert float(out.data[0]) == pytest.approx(-0.91894, abs=1e-5)
    with pytest.raises(ValueError):
        policy_step(x, 0.5, 0, f, PolicyHead(0.0), rng, deterministic=False)


def test_policy_step_log_prob_formula(rng):
    f = ConstantField([0.3, -0.2])
    head = PolicyHead(0.05)
    s, lp, m = policy_step(np.zeros((4, 2)), 0.5, 0, f, head, rng, deterministic=False)
    d = (s - m).astype(np.float64)
    expected = -np.log(2 * np.pi * 0.05**2) - np.sum(d * d, axis=1) / (2 * 0.05**2)
    assert np.allclose(lp, expected, atol=1e-3)


def test_degenerate_single_step_rollout(tiny_model, rng):
    b = rollout(0, AnnealSchedule(1), 3, tiny_model, PolicyHead(), rng)
    assert b.total_steps == 1 and not np.any(b.stochastic)
    assert np.all(np.isnan(b.log_probs))


def test_rollout_structure(tiny_model, rng):
    b = rollout(1, AnnealSchedule(4), 2, tiny_model, PolicyHead(), rng)
    assert b.batch == 2 and b.total_steps == 4
    for i in range(2):
        traj = b.trajectory(i)
        assert len(traj.records) == 4
        assert traj.records[0].log_prob is None and traj.records[0].noise is None
        assert np.array_equal(traj.records[0].sample, traj.records[0].mean)
        stochastic = [r for r in traj.records[1:]]
        assert len(stochastic) == 3 and all(np.isfinite(r.log_prob) for r in stochastic)


def test_trajectory_chaining(tiny_model, rng):
    b = rollout_batch([0, 2], AnnealSchedule(5), 3, tiny_model, PolicyHead(), rng)
    for k in range(1, 5):
        t = np.float32(b.times[k])
        expected = (np.float32(1) - t) * b.samples[k - 1] + t * b.noises[k]
        assert np.array_equal(b.states[k], expected)
    assert np.array_equal(b.states[0], b.x_T)


def test_deterministic_rollout_on_point_mass(rng):
    pt = np.array([-1.0, 0.5])
    b = rollout_batch([0], AnnealSchedule(4), 5, PointMassField(pt), PolicyHead(), rng, deterministic=True)
    assert np.max(np.abs(b.samples - pt)) < 1e-5


def test_small_policy_noise_on_point_mass(rng):
    pt = np.array([2.0, 2.0])
    b = rollout_batch([0], AnnealSchedule(4), 5, PointMassField(pt), PolicyHead(1e-7), rng)
    assert np.max(np.abs(b.samples - pt)) < 1e-5


def test_nfe_accounting(tiny_model, rng):
    counting = CountingModel(tiny_model)
    b = rollout_batch([0, 1], AnnealSchedule(4), 3, counting, PolicyHead(), rng)
    assert counting.calls == 4  # batched: one forward per step covers every trajectory
    counting.calls = 0
    recompute_logprobs(b, counting)
    assert counting.calls == 3


def test_recompute_matches_stored_at_theta_old(tiny_model, rng):
    b = rollout_batch([0, 1, 2], AnnealSchedule(4), 4, tiny_model, PolicyHead(), rng)
    lps = recompute_logprobs(b, tiny_model, schedule=AnnealSchedule(4))
    assert sorted(lps) == [2, 3, 4]
    for s, lp in lps.items():
        assert np.max(np.abs(np.exp(lp.data - b.log_probs[s - 1]) - 1)) < 1e-6


def test_recompute_schedule_mismatch(tiny_model, rng):
    b = rollout_batch([0], AnnealSchedule(3), 2, tiny_model, PolicyHead(), rng)
    with pytest.raises(ValueError, match="mismatch"):
        recompute_logprobs(b, tiny_model, schedule=AnnealSchedule(4))


def test_recompute_drops_when_mean_moves_away(rng):
    model = make_tiny(1)
    b = rollout_batch([0], AnnealSchedule(3), 4, model, PolicyHead(), rng)
    before = recompute_logprobs(b, model)[3].data
    # shift the output bias so every mean moves by t * delta away from its sample
    delta = np.sign(b.means[2] - b.samples[2]).mean(axis=0) * 0.5
    model.params[f"layer{model.n_layers - 1}.b"].data += delta.astype(np.float32)
    after = recompute_logprobs(b, model)[3].data
    moved_away = np.all(np.sign(b.means[2] - b.samples[2]) == np.sign(delta), axis=1)
    assert moved_away.any()
    assert np.all(after[moved_away] < before[moved_away])


def test_recompute_gradient_matches_finite_differences(rng):
    model = make_tiny(2)
    b = rollout_batch([0, 1], AnnealSchedule(3), 2, model, PolicyHead(), rng)
    err = ad.finite_diff_check(model.params, lambda: ad.mean(recompute_logprobs(b, model)[2]), rng=rng)
    assert err < 1e-4


def test_rollout_reproducible_and_serialisable(tiny_model):
    a = rollout_batch([0, 1], AnnealSchedule(3), 2, tiny_model, PolicyHead(), np.random.default_rng(3))
    b = rollout_batch([0, 1], AnnealSchedule(3), 2, tiny_model, PolicyHead(), np.random.default_rng(3))
    assert np.array_equal(a.samples, b.samples)
    import json

    json.dumps(a.to_dict())


def test_groups_share_condition(tiny_model, rng):
    b = rollout_batch([2, 0], AnnealSchedule(3), 3, tiny_model, PolicyHead(), rng)
    groups = list(b.groups())
    assert [int(g.conditions[0]) for g in groups] == [2, 0]
    assert all(np.all(g.conditions == g.conditions[0]) and g.batch == 3 for g in groups)
