import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import i0, i1

import streams
from errors import SimulationBlowupError
from fastsim import (additive_functional, frozen_steps, invariant_average_f, occupation, simulate_frozen,
                     time_steps)
from model import builtin, system_from_config


def test_time_steps_cover_horizon_with_partial_last_step():
    steps = time_steps(1.0, 0.3)
    assert len(steps) == 4
    assert steps[-1] == pytest.approx(0.1)
    assert steps.sum() == pytest.approx(1.0)
    assert np.all(time_steps(1.0, 0.25) == 0.25)


@pytest.mark.parametrize('t_end, dt', [(1.0, 2.0), (1.0, 0.0), (0.0, 0.1)])
def test_time_steps_rejects_bad_grids(t_end, dt):
    with pytest.raises(ValueError):
        time_steps(t_end, dt)


def test_frozen_path_is_reproducible_and_wrapped(cosine_ring):
    a = simulate_frozen(cosine_ring, 0.0, 0.0, 5.0, 0.01, seed=3)
    b = simulate_frozen(cosine_ring, 0.0, 0.0, 5.0, 0.01, seed=3)
    assert np.array_equal(a.states, b.states)
    assert a.times[-1] == 5.0
    assert np.all((a.states >= 0.0) & (a.states < 2 * np.pi))
    columns, rows = a.to_rows()
    assert columns == ['t', 'y_1']
    assert rows.shape == (501, 2)


def test_blowup_raises_with_step_index():
    spec = system_from_config({
        'dim_slow': 1, 'dim_fast': 1, 'f': ['cos(y1)'], 'B': ['exp(exp(exp(y1 + 3)))'], 'C': [['1']],
        'f_sup_norm': 1.0, 'lipschitz_f': 1.0, 'nondegeneracy_floor': 1.0,
    })
    with pytest.raises(SimulationBlowupError) as info:
        simulate_frozen(spec, 0.0, 3.0, 1.0, 0.01, seed=1)
    assert info.value.step >= 0


def test_occupation_mass_sums_to_one(cosine_ring):
    path = simulate_frozen(cosine_ring, 0.0, 0.0, 50.0, 0.01, seed=4)
    measure = occupation(path, bins=16)
    assert measure.mass.sum() == pytest.approx(1.0)
    assert measure.total_time == pytest.approx(50.0)
    assert len(measure.bin_centers[0]) == 16


@pytest.mark.slow
def test_occupation_matches_invariant_density(full_dep):
    # at x = 0 the invariant density is proportional to exp(0.6 cos y)
    path = simulate_frozen(full_dep, 0.0, 0.0, 20000.0, 0.05, seed=5)
    measure = occupation(path, bins=4)
    edges = measure.bin_edges[0]
    exact = np.array([quad(lambda y: np.exp(0.6 * np.cos(y)), lo, hi)[0]
                      for lo, hi in zip(edges[:-1], edges[1:])])
    exact /= exact.sum()
    assert np.max(np.abs(measure.mass / exact - 1.0)) < 0.1


def test_additive_functional_of_constant_drift(constant):
    rng = streams.generator(1, streams.STREAM_FROZEN_ENSEMBLE)
    x = np.zeros((5, 1))
    total = additive_functional(constant, x, x, np.zeros((5, 1)), 3.0, 0.01, rng)
    assert np.allclose(total, 2.1)
    weighted = additive_functional(constant, x, x, np.zeros((5, 1)), 3.0, 0.01, rng,
                                   weight=np.array([2.0]))
    assert weighted.shape == (5,)
    assert np.allclose(weighted, 4.2)


def test_invariant_average_on_full_dep(full_dep):
    average = invariant_average_f(full_dep, 0.0, t_end=200.0, dt=0.01, seed=6, replicas=64, jobs=2)
    assert average[0] == pytest.approx(i1(0.6) / i0(0.6), abs=0.04)


def test_invariant_average_on_cosine_ring_single_path(cosine_ring):
    average = invariant_average_f(cosine_ring, 0.0, t_end=4000.0, dt=0.02, seed=7)
    assert abs(average[0]) < 0.1


def _terminal_mean_cos(spec, t_end, dt, seed, replicas=100_000):
    rng = streams.generator(seed, streams.STREAM_FROZEN_ENSEMBLE)
    x = np.zeros((replicas, spec.dim_slow))
    final = np.zeros((replicas, spec.dim_fast))
    for _, _, _, final in frozen_steps(spec, x, final, t_end, dt, rng):
        pass
    return float(np.mean(np.cos(final[:, 0])))


def test_weak_error_under_step_halving_on_cosine_ring(cosine_ring):
    exact = np.exp(-0.5)
    coarse = _terminal_mean_cos(cosine_ring, 1.0, 0.1, seed=8)
    fine = _terminal_mean_cos(cosine_ring, 1.0, 0.05, seed=9)
    assert abs(coarse - fine) <= 0.1
    assert abs(coarse - exact) <= 0.1
    assert abs(fine - exact) <= 0.05


@pytest.mark.parametrize('dt', [0.1, 0.05])
def test_weak_error_under_step_halving_on_full_dep(dt):
    spec = builtin('full-dep')
    coarse = _terminal_mean_cos(spec, 1.0, dt, seed=10)
    fine = _terminal_mean_cos(spec, 1.0, dt / 2.0, seed=11)
    assert abs(coarse - fine) <= dt


@pytest.mark.slow
def test_occupation_is_flat_on_cosine_ring(cosine_ring):
    path = simulate_frozen(cosine_ring, 0.0, 0.0, 20000.0, 0.05, seed=1)
    measure = occupation(path, bins=64)
    assert measure.mass.shape == (64,)
    assert measure.mass.max() / measure.mass.min() < 1.3
