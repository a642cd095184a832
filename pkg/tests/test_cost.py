import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedsched import cost
from fedsched.core import DeviceProfile, FrequencyVector, JobSpec, SchedulingError, SchedulingPlan


def dev(a=0.01, mu=2.0, d=100):
    return DeviceProfile(0, a, mu, (d,))


def test_sample_support_lower_bound():
    job = JobSpec(0, 0.1, local_epochs=5)
    rng = np.random.default_rng(0)
    draws = [cost.sample_device_time(dev(mu=1.0), job, rng) for _ in range(2000)]
    assert min(draws) >= 5.0


def test_sample_mean_matches_shift_plus_scale():
    job = JobSpec(0, 0.1, local_epochs=5)
    d = dev()
    rng = np.random.default_rng(1)
    draws = np.array([cost.sample_device_time(d, job, rng) for _ in range(200_000)])
    assert abs(draws.mean() - 255.0) / 255.0 < 0.01


def test_expected_time_examples():
    job = JobSpec(0, 0.1, local_epochs=5)
    assert cost.expected_device_time(dev(), job) == pytest.approx(255.0)
    assert cost.expected_device_time(dev(mu=1e15), job) == pytest.approx(5.0)
    assert cost.expected_device_time(dev(d=200), job) == pytest.approx(510.0)


def test_expected_time_without_data():
    job = JobSpec(0, 0.1)
    with pytest.raises(SchedulingError):
        cost.expected_device_time(dev(d=0), job)
    assert np.isinf(cost.expected_times([dev(d=0)], job)[0])


def test_round_time_examples():
    assert cost.round_time([5.0]) == 5.0
    assert cost.round_time([3.0, 7.5, 4.2]) == 7.5
    assert cost.round_time([4.2, 7.5, 3.0]) == 7.5
    with pytest.raises(SchedulingError):
        cost.round_time([])


def test_fairness_examples():
    assert cost.fairness_cost(FrequencyVector([1, 0, 1]), [0]) == pytest.approx(2 / 3)
    assert cost.fairness_cost(FrequencyVector([2, 2, 1]), [2]) == 0.0
    assert cost.fairness_cost(FrequencyVector([0, 3]), [1]) == pytest.approx(4.0)


@given(st.lists(st.integers(0, 20), min_size=2, max_size=12), st.data())
def test_fairness_batch_matches_scalar(counts, data):
    K = len(counts)
    size = data.draw(st.integers(1, K))
    plans = [sorted(data.draw(st.permutations(range(K)))[:size]) for _ in range(3)]
    batch = cost.fairness_costs(np.array(counts), np.array(plans))
    for p, v in zip(plans, batch):
        assert v == pytest.approx(cost.fairness_cost(FrequencyVector(counts), p), abs=1e-9)


@given(st.lists(st.integers(0, 20), min_size=2, max_size=10), st.data())
def test_fairness_relabel_invariant_and_nonnegative(counts, data):
    K = len(counts)
    plan = data.draw(st.lists(st.integers(0, K - 1), unique=True, max_size=K))
    perm = data.draw(st.permutations(range(K)))
    inv = {old: new for new, old in enumerate(perm)}
    base = cost.fairness_cost(FrequencyVector(counts), plan)
    moved = cost.fairness_cost(FrequencyVector([counts[p] for p in perm]), [inv[d] for d in plan])
    assert base >= 0
    assert moved == pytest.approx(base, abs=1e-9)
    after = np.array(counts)
    after[plan] += 1
    assert (base < 1e-12) == bool(np.all(after == after[0]))


def test_round_cost_examples():
    devices = [DeviceProfile(k, 0.01, 1.0, (10,)) for k in range(4)]
    job = JobSpec(0, 0.5, beta=0.0)
    c = cost.round_cost([0, 1], job, FrequencyVector(4), 1, devices)
    assert c.weighted_total == c.time_term
    job = JobSpec(0, 0.5, alpha=0.0, beta=1.0)
    c = cost.round_cost([0, 1], job, FrequencyVector([0, 0, 1, 1]), 3, devices)
    assert c.weighted_total == 0.0
    c = cost.round_cost([0, 1], JobSpec(0, 0.5, beta=0.5), FrequencyVector(4), 4, devices, dynamic=True)
    assert c.beta_eff == 1.0
    assert c.weighted_total == c.alpha * c.time_term + c.beta_eff * c.fairness_term


def test_dynamic_equals_static_at_round_one():
    devices = [DeviceProfile(k, 0.01 * (k + 1), 1.0, (10,)) for k in range(4)]
    job = JobSpec(0, 0.5, beta=0.7)
    s = FrequencyVector([1, 0, 2, 0])
    a = cost.round_cost([1, 3], job, s, 1, devices)
    b = cost.round_cost([1, 3], job, s, 1, devices, dynamic=True)
    assert a == b


def test_total_cost_additive_and_term_independent():
    devices = [DeviceProfile(k, 0.01 * (k + 1), 5.0, (10, 20)) for k in range(6)]
    jobs = [JobSpec(0, 1 / 3), JobSpec(1, 1 / 3, beta=2.0)]
    freqs = {0: FrequencyVector(6), 1: FrequencyVector([1, 0, 0, 1, 0, 0])}
    rounds = {0: 1, 1: 2}
    p0, p1 = SchedulingPlan(0, 1, (0, 1)), SchedulingPlan(1, 2, (2, 3))
    single = cost.total_cost({0: p0}, jobs, freqs, rounds, devices)
    assert single == pytest.approx(cost.round_cost(p0, jobs[0], freqs[0], 1, devices).weighted_total)
    both = cost.total_cost({0: p0, 1: p1}, jobs, freqs, rounds, devices)
    c1 = cost.round_cost(p1, jobs[1], freqs[1], 2, devices).weighted_total
    assert both == pytest.approx(single + c1)
    p1b = SchedulingPlan(1, 2, (4, 5))
    c1b = cost.round_cost(p1b, jobs[1], freqs[1], 2, devices).weighted_total
    assert cost.total_cost({0: p0, 1: p1b}, jobs, freqs, rounds, devices) - both == pytest.approx(c1b - c1)


def test_total_cost_rejects_overlap():
    devices = [DeviceProfile(k, 0.01, 5.0, (10, 10)) for k in range(4)]
    jobs = [JobSpec(0, 0.5), JobSpec(1, 0.5)]
    freqs = {0: FrequencyVector(4), 1: FrequencyVector(4)}
    with pytest.raises(SchedulingError):
        cost.total_cost({0: SchedulingPlan(0, 1, (0, 1)), 1: SchedulingPlan(1, 1, (1, 2))},
                        jobs, freqs, {0: 1, 1: 1}, devices)


def test_omega_variants():
    assert cost.omega(4) == 2.0
    assert cost.omega(4, "linear") == 4.0
    assert cost.omega(1, "log") == 0.0
    with pytest.raises(ValueError):
        cost.omega(0)
    with pytest.raises(ValueError):
        cost.omega(2, "cubic")


def test_loss_estimate_examples():
    assert cost.loss_estimate(1, (1, 1, 0)) == 0.5
    assert cost.loss_estimate(1e12, (1, 1, 0.25)) == pytest.approx(0.25)


@given(st.floats(0.01, 5), st.floats(0.01, 5), st.floats(0, 1), st.integers(1, 1000))
def test_loss_strictly_decreasing(g0, g1, g2, r):
    assert cost.loss_estimate(r + 1, (g0, g1, g2)) < cost.loss_estimate(r, (g0, g1, g2))


def test_round_cap_examples():
    assert cost.estimate_round_cap(JobSpec(0, 0.1, gamma=(1, 1, 0), target_loss=0.1)) == (9, 12)
    assert cost.estimate_round_cap(JobSpec(0, 0.1, gamma=(1, 1, 0), target_loss=0.5)) == (1, 2)
    with pytest.raises(ValueError):
        cost.estimate_round_cap(JobSpec(0, 0.1, gamma=(1, 1, 0.2), target_loss=0.2))


@settings(max_examples=200)
@given(st.floats(0.01, 3), st.floats(0.01, 3), st.floats(0, 0.5), st.floats(0.001, 2))
def test_round_cap_reaches_target(g0, g1, g2, gap):
    gamma = (g0, g1, g2)
    target = g2 + gap
    job = JobSpec(0, 0.1, gamma=gamma, target_loss=target)
    rc, rm = cost.estimate_round_cap(job)
    assert cost.loss_estimate(rc, gamma) <= target + 1e-9
    assert rc == 1 or cost.loss_estimate(rc - 1, gamma) > target - 1e-9
    assert rm == math.ceil(1.3 * rc - 1e-9)
