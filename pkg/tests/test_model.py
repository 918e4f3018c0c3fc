import math

import numpy as np
import pytest
from hypothesis import given, settings as hsettings
from hypothesis import strategies as st

from errors import ConfigError, UnknownSystemError
from model import (BUILTINS, TorusGeometry, as_batch, builtin, builtin_notes, describe, system_from_config,
                   validate)


def test_unknown_builtin_lists_valid_names():
    with pytest.raises(UnknownSystemError) as info:
        builtin('nope')
    message = str(info.value)
    assert "Unknown system 'nope'" in message
    for name in ('constant', 'cosine-ring', 'full-dep', 'torus-2d'):
        assert name in message


@pytest.mark.parametrize('name', sorted(BUILTINS))
def test_builtins_pass_validation(name):
    report = validate(builtin(name), samples=2000, seed=1)
    assert report.ok, report.violations
    assert report.nonfinite == 0


def test_validation_reports_false_bounds():
    spec = system_from_config({
        'dim_slow': 1, 'dim_fast': 1, 'f': ['2 * cos(y1)'], 'B': ['0'], 'C': [['1']],
        'f_sup_norm': 1.0, 'lipschitz_f': 1.0, 'nondegeneracy_floor': 1.0,
    })
    report = validate(spec, samples=500, seed=2)
    assert not report.ok
    assert any('f_sup_norm' in v for v in report.violations)


def test_validation_catches_non_periodic_drift():
    spec = system_from_config({
        'dim_slow': 1, 'dim_fast': 1, 'f': ['y1 / 10'], 'B': ['0'], 'C': [['1']],
        'f_sup_norm': 1.0, 'lipschitz_f': 1.0, 'nondegeneracy_floor': 1.0,
    })
    report = validate(spec, samples=200, seed=3)
    assert any('periodic' in v for v in report.violations)


def test_expression_system_detects_slow_dependence():
    common = {'dim_slow': 1, 'dim_fast': 1, 'C': [['1']], 'f_sup_norm': 1.0,
              'lipschitz_f': 1.0, 'nondegeneracy_floor': 1.0}
    free = system_from_config(dict(common, f=['cos(y1)'], B=['0']))
    tied = system_from_config(dict(common, f=['cos(y1)'], B=['sin(x1 - y1)']))
    assert free.x_independent
    assert not tied.x_independent


@pytest.mark.parametrize('system, field', [
    ({'builtin': 'constant', 'f': ['1']}, 'system.f'),
    ({'dim_slow': 1, 'dim_fast': 1, 'f': ['cos(y1)'], 'B': ['0'], 'C': [['1']],
      'f_sup_norm': 1.0, 'lipschitz_f': 1.0}, 'system.nondegeneracy_floor'),
    ({'dim_slow': 1, 'dim_fast': 1, 'f': ['cos(y1)', '1'], 'B': ['0'], 'C': [['1']],
      'f_sup_norm': 1.0, 'lipschitz_f': 1.0, 'nondegeneracy_floor': 1.0}, 'system.f'),
    ({'dim_slow': 1, 'dim_fast': 1, 'f': ['cos(y1)'], 'B': ['0'], 'C': [['1']],
      'f_sup_norm': 1.0, 'lipschitz_f': 1.0, 'nondegeneracy_floor': 0.0}, 'system.nondegeneracy_floor'),
])
def test_system_config_errors_name_the_field(system, field):
    with pytest.raises(ConfigError) as info:
        system_from_config(system)
    assert info.value.field == field


def test_torus_2d_covariance(torus_2d):
    cov = torus_2d.covariance(np.zeros(2), np.zeros(2))[0]
    assert np.allclose(cov, [[1.0, 0.4], [0.4, 1.16]])
    assert np.min(np.linalg.eigvalsh(cov)) >= torus_2d.nondegeneracy_floor


def test_full_dep_coefficients(full_dep):
    y = np.array([[0.3]])
    assert np.allclose(full_dep.fast_drift(0.0, y), -0.3 * np.sin(0.3))
    assert np.allclose(full_dep.covariance(np.pi / 2, y), 1.0 + 0.5 * np.cos(0.3))


def test_as_batch_shapes():
    assert as_batch(0.5, 1).shape == (1, 1)
    assert as_batch([1.0, 2.0], 2).shape == (1, 2)
    assert as_batch([1.0, 2.0, 3.0], 1).shape == (3, 1)
    with pytest.raises(ValueError):
        as_batch([1.0, 2.0, 3.0], 2)


def test_fingerprint_is_stable(cosine_ring):
    assert cosine_ring.fingerprint == builtin('cosine-ring').fingerprint
    assert cosine_ring.fingerprint != builtin('constant').fingerprint


@hsettings(max_examples=100, deadline=None)
@given(st.lists(st.floats(min_value=-1e4, max_value=1e4), min_size=2, max_size=2))
def test_wrap_lands_in_fundamental_domain(point):
    geometry = TorusGeometry(2, (2.0 * math.pi, 3.0))
    wrapped = geometry.wrap(np.array([point]))
    assert np.all(wrapped >= 0.0)
    assert np.all(wrapped < geometry.periods)
    assert geometry.distance(wrapped, np.array([point]))[0] < 1e-8


@hsettings(max_examples=100, deadline=None)
@given(st.floats(min_value=-50, max_value=50), st.floats(min_value=-50, max_value=50))
def test_torus_distance_is_symmetric_and_bounded(a, b):
    geometry = TorusGeometry(1)
    d_ab = geometry.distance(np.array([[a]]), np.array([[b]]))[0]
    d_ba = geometry.distance(np.array([[b]]), np.array([[a]]))[0]
    assert d_ab == pytest.approx(d_ba, abs=1e-9)
    assert 0.0 <= d_ab <= math.pi + 1e-12


def test_wrap_is_idempotent():
    geometry = TorusGeometry(2, (2.0 * math.pi, 3.0))
    rng = np.random.default_rng(17)
    points = rng.uniform(-1e4, 1e4, size=(10_000, 2))
    points[:4] = [[-1e-18, -1e-300], [2.0 * math.pi, 3.0], [-2.0 * math.pi, -3.0], [0.0, -0.0]]
    once = geometry.wrap(points)
    assert np.array_equal(geometry.wrap(once), once)
    assert np.all(once >= 0.0)
    assert np.all(once < geometry.periods)


@pytest.mark.parametrize('name', sorted(BUILTINS))
def test_coefficients_are_periodic_in_the_fast_variable(name):
    spec = builtin(name)
    rng = np.random.default_rng(23)
    x = rng.uniform(-5.0, 5.0, size=(1000, spec.dim_slow))
    y = rng.uniform(-10.0, 10.0, size=(1000, spec.dim_fast))
    periods = np.asarray(spec.geometry.periods)
    for shift in (periods, -2.0 * periods):
        moved = y + shift
        assert np.allclose(spec.f(x, moved), spec.f(x, y), atol=1e-9)
        assert np.allclose(spec.fast_drift(x, moved), spec.fast_drift(x, y), atol=1e-9)
        assert np.allclose(spec.covariance(x, moved), spec.covariance(x, y), atol=1e-9)


def test_builtin_notes_travel_with_the_system(cosine_ring):
    assert 'Mathieu' in builtin_notes(cosine_ring)
    summary = describe(cosine_ring)
    assert summary['name'] == 'cosine-ring'
    assert summary['fingerprint'] == cosine_ring.fingerprint
    assert summary['dim_fast'] == 1
    assert validate(cosine_ring, samples=200, seed=1).notes == summary['notes']


def test_closed_form_systems_have_no_notes():
    spec = system_from_config({
        'dim_slow': 1, 'dim_fast': 1, 'f': ['cos(y1)'], 'B': ['0'], 'C': [['1']],
        'f_sup_norm': 1.0, 'lipschitz_f': 1.0, 'nondegeneracy_floor': 1.0,
    })
    assert builtin_notes(spec) is None
    assert describe(spec)['notes'] is None
