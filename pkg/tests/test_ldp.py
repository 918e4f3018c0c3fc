import math

import numpy as np
import pytest

import ldp
from action import Path
from errors import ConfigError
from ldp import LdpEstimate, make_entry, trend_check, tube_probability
from twoscale import SimConfig


def test_entry_statistics():
    distances = np.array([0.05, 0.1, 0.2, 0.4])
    entry = make_entry(0.5, distances, distances, delta=0.15, extra_deltas=[0.3])
    assert entry.hits == 2
    assert entry.p_hat == 0.5
    assert entry.log_prob == pytest.approx(0.25 * math.log(0.5))
    assert entry.ci_low < 0.5 < entry.ci_high
    assert entry.log_prob_low <= entry.log_prob <= entry.log_prob_high
    assert entry.hits_by_delta == {'0.3': 3}
    assert not entry.censored


def test_censored_entry_keeps_upper_bound():
    distances = np.full(100, 1.0)
    entry = make_entry(0.2, distances, distances, delta=0.5)
    assert entry.censored
    assert math.isnan(entry.log_prob)
    assert entry.ci_low == 0.0
    assert entry.ci_high == pytest.approx(0.037, abs=1e-3)
    assert entry.log_prob_low == -math.inf
    assert math.isfinite(entry.log_prob_high)


def _estimate(fractions, action_ref):
    entries = []
    for eps, p in fractions:
        hits = int(round(p * 100))
        distances = np.concatenate([np.zeros(hits), np.ones(100 - hits)])
        entries.append(make_entry(eps, distances, distances, delta=0.5))
    return LdpEstimate([e.epsilon for e in entries], 0.5, entries, action_ref)


def test_trend_needs_three_uncensored_points():
    estimate = _estimate([(0.4, 0.5), (0.3, 0.4), (0.2, 0.0)], action_ref=0.1)
    report = trend_check(estimate)
    assert report.status == 'no uncensored data'
    assert report.monotone is None


def test_trend_report():
    estimate = _estimate([(0.4, 0.3), (0.3, 0.4), (0.2, 0.5)], action_ref=0.03)
    report = trend_check(estimate, nu=0.1)
    assert report.status == 'ok'
    assert report.monotone
    assert report.smallest_epsilon == 0.2
    assert report.gap == pytest.approx(0.04 * math.log(0.5) + 0.03)
    assert report.nu_hat == pytest.approx(0.0)
    assert report.lower_bound_holds


def test_constant_system_stays_in_tube(constant):
    phi = Path.linear(0.0, 0.7, T=0.1, n=10)
    cfgs = [SimConfig(epsilon=eps, T=0.1, dt_fast=0.01, replicas=1000, seed=2) for eps in (0.5, 0.3)]
    estimate = tube_probability(constant, phi, 0.05, cfgs, action_ref=0.0)
    assert [e.hits for e in estimate.entries] == [1000, 1000]
    assert all(e.log_prob == 0.0 for e in estimate.entries)
    assert not estimate.all_censored


def test_constant_system_misses_wrong_tube(constant):
    phi = Path.constant(0.0, T=0.1, n=10)
    cfgs = [SimConfig(epsilon=0.5, T=0.1, dt_fast=0.01, replicas=1000, seed=2)]
    estimate = tube_probability(constant, phi, 0.01, cfgs)
    assert estimate.all_censored
    assert trend_check(estimate).status == 'no uncensored data'


def test_horizon_mismatch_is_a_config_error(constant):
    phi = Path.constant(0.0, T=0.1, n=10)
    with pytest.raises(ConfigError):
        tube_probability(constant, phi, 0.1, [SimConfig(epsilon=0.5, T=0.2, replicas=1000)])
    with pytest.raises(ConfigError):
        tube_probability(constant, phi, 0.0, [SimConfig(epsilon=0.5, T=0.1, replicas=1000)])


def test_checkpoints_are_resumed(constant, tmp_path, monkeypatch):
    phi = Path.linear(0.0, 0.7, T=0.1, n=10)
    cfgs = [SimConfig(epsilon=0.5, T=0.1, dt_fast=0.01, replicas=1000, seed=4)]
    first = tube_probability(constant, phi, 0.05, cfgs, checkpoint_dir=str(tmp_path))
    assert list(tmp_path.iterdir())

    def fail(*args, **kwargs):
        raise AssertionError("checkpoint was not used")

    monkeypatch.setattr(ldp, 'tube_distances', fail)
    second = tube_probability(constant, phi, 0.05, cfgs, checkpoint_dir=str(tmp_path))
    assert second.entries[0] == first.entries[0]


def test_changed_settings_invalidate_checkpoint(constant, tmp_path):
    phi = Path.linear(0.0, 0.7, T=0.1, n=10)
    cfgs = [SimConfig(epsilon=0.5, T=0.1, dt_fast=0.01, replicas=1000, seed=4)]
    tube_probability(constant, phi, 0.05, cfgs, checkpoint_dir=str(tmp_path))
    narrower = tube_probability(constant, phi, 1e-3, cfgs, checkpoint_dir=str(tmp_path))
    assert narrower.delta == 1e-3
    assert narrower.entries[0].hits == 1000


@pytest.mark.slow
def test_zero_action_tube_probability_grows(cosine_ring):
    phi = Path.constant(0.0, T=0.5, n=50)
    cfgs = [SimConfig(epsilon=eps, T=0.5, dt_fast=0.01, replicas=2000, seed=9) for eps in (0.4, 0.3, 0.2)]
    estimate = tube_probability(cosine_ring, phi, 0.3, cfgs, action_ref=0.0)
    report = trend_check(estimate, nu=0.1)
    assert report.status == 'ok'
    assert report.monotone
    assert report.lower_bound_holds


def test_too_few_replicas_is_a_config_error(constant):
    phi = Path.constant(0.0, T=0.1, n=10)
    cfgs = [SimConfig(epsilon=0.5, T=0.1, replicas=1000), SimConfig(epsilon=0.3, T=0.1, replicas=999)]
    with pytest.raises(ConfigError) as info:
        tube_probability(constant, phi, 0.1, cfgs)
    assert 'ldp.replicas' in str(info.value)


def test_hits_grow_with_tube_radius(cosine_ring):
    phi = Path.constant(0.0, T=0.1, n=10)
    cfgs = [SimConfig(epsilon=eps, T=0.1, dt_fast=0.01, replicas=1000, seed=3) for eps in (0.5, 0.3)]
    estimate = tube_probability(cosine_ring, phi, 0.2, cfgs, action_ref=0.0, extra_deltas=[0.1, 0.2, 0.4])
    for entry in estimate.entries:
        by_delta = entry.hits_by_delta
        assert by_delta['0.1'] <= by_delta['0.2'] <= by_delta['0.4']
        assert by_delta['0.2'] == entry.hits
        assert entry.log_prob_high <= 0.0
        assert entry.censored or entry.log_prob <= 0.0


@pytest.mark.slow
def test_zero_action_sweep_approaches_zero(cosine_ring):
    phi = Path.constant(0.0, T=1.0, n=100)
    cfgs = [SimConfig(epsilon=eps, T=1.0, dt_fast=0.01, replicas=10_000, seed=12)
            for eps in (0.3, 0.2, 0.15, 0.1)]
    estimate = tube_probability(cosine_ring, phi, 0.3, cfgs, action_ref=0.0)
    report = trend_check(estimate, nu=0.1)
    assert report.status == 'ok'
    assert report.monotone
    assert all(lp <= 0.0 for lp in estimate.log_probs)
    assert estimate.entries[-1].log_prob >= -0.1
