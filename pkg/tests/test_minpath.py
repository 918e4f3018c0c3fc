import math

import numpy as np
import pytest

from action import Path
from errors import InfeasiblePathError
from hamiltonian import HamiltonianSurface
from minpath import MinActionProblem, level_set_distance, minimize_action
from rate import RateField, RateFunction


@pytest.fixture(scope='module')
def quadratic_rate():
    surface = HamiltonianSurface.synthetic_surface(lambda b: float(b @ b), lambda b: 2.0 * b,
                                                   [(-5.0, 5.0)], 41)
    return RateFunction(surface)


@pytest.fixture(scope='module')
def constant_rate():
    from model import builtin
    return RateField(builtin('constant'), box_radius=2.0, n_per_axis=11, grid_n=32)


def _bent_start(T=1.0, n=8):
    return Path.from_function(lambda t: t / T + 0.1 * np.sin(np.pi * t / T), T, n)


def test_problem_validation(quadratic_rate):
    with pytest.raises(ValueError):
        MinActionProblem(quadratic_rate, 0.0, 1.0, T=1.0, m=1)
    with pytest.raises(ValueError):
        MinActionProblem(quadratic_rate, 0.0, 1.0, T=0.0, m=4)
    with pytest.raises(ValueError):
        MinActionProblem(quadratic_rate, [0.0], [1.0, 2.0], T=1.0, m=4)
    with pytest.raises(ValueError):
        MinActionProblem(quadratic_rate, 0.0, math.inf, T=1.0, m=4)
    problem = MinActionProblem(quadratic_rate, 0.0, 1.0, T=2.0, m=8)
    assert problem.dim == 1
    assert problem.delta == 0.25


def test_straight_line_is_already_optimal(quadratic_rate):
    result = minimize_action(MinActionProblem(quadratic_rate, 0.0, 1.0, T=1.0, m=8))
    assert result.converged
    assert result.iterations == 0
    assert result.value == pytest.approx(0.25, abs=1e-9)


@pytest.mark.parametrize('quasi_newton', [False, True])
def test_bent_start_relaxes_to_straight_line(quadratic_rate, quasi_newton):
    problem = MinActionProblem(quadratic_rate, 0.0, 1.0, T=1.0, m=8, quasi_newton=quasi_newton)
    result = minimize_action(problem, init=_bent_start())
    assert result.value == pytest.approx(0.25, abs=1e-6)
    assert np.allclose(result.path.values.ravel(), result.path.times, atol=1e-3)
    assert result.per_iter[0] > result.value
    assert result.path.values[0, 0] == 0.0
    assert result.path.values[-1, 0] == 1.0


def test_initial_path_must_match_horizon(quadratic_rate):
    problem = MinActionProblem(quadratic_rate, 0.0, 1.0, T=1.0, m=8)
    with pytest.raises(ValueError):
        minimize_action(problem, init=_bent_start(T=2.0))
    with pytest.raises(ValueError):
        minimize_action(problem, init='spline')


def test_infeasible_start_is_reported(constant_rate):
    problem = MinActionProblem(constant_rate, 0.0, 0.5, T=1.0, m=4)
    with pytest.raises(InfeasiblePathError) as info:
        minimize_action(problem)
    assert info.value.exit_code == 5


def test_constant_system_follows_its_drift(constant_rate):
    result = minimize_action(MinActionProblem(constant_rate, 0.0, 0.7, T=1.0, m=4))
    assert result.converged
    assert result.value == pytest.approx(0.0, abs=1e-8)


def test_level_set_distance_for_quadratic_rate(quadratic_rate):
    path = Path.linear(0.0, 1.0, T=1.0, n=8)
    problem = MinActionProblem(quadratic_rate, 0.0, 1.0, T=1.0, m=8)
    found = level_set_distance(path, 1.0 / 16.0, problem)
    assert found.distance == pytest.approx(0.5, abs=1e-3)
    assert found.achieved_action <= 1.0 / 16.0 + 1e-4
    assert found.path is not None


def test_path_inside_level_set_has_zero_distance(quadratic_rate):
    path = Path.linear(0.0, 0.1, T=1.0, n=8)
    problem = MinActionProblem(quadratic_rate, 0.0, 0.1, T=1.0, m=8)
    found = level_set_distance(path, 1.0, problem)
    assert found.distance == 0.0
    assert found.converged
    with pytest.raises(ValueError):
        level_set_distance(path, -1.0, problem)


def test_level_set_distance_on_single_slope_system(constant_rate):
    path = Path.linear(0.0, 0.8, T=1.0, n=4)
    problem = MinActionProblem(constant_rate, 0.0, 0.8, T=1.0, m=4)
    found = level_set_distance(path, 0.1, problem)
    assert found.distance == pytest.approx(0.1, abs=1e-6)


@pytest.mark.slow
def test_cosine_ring_minimum_matches_rate(cosine_ring):
    rate = RateField(cosine_ring, box_radius=6.0, n_per_axis=31, grid_n=64)
    problem = MinActionProblem(rate, 0.0, 0.5, T=1.0, m=8)
    start = Path.from_function(lambda t: 0.5 * t + 0.05 * np.sin(np.pi * t), 1.0, 8)
    result = minimize_action(problem, init=start)
    assert result.value == pytest.approx(rate.evaluate(0.0, 0.5).value, abs=1e-4)


def test_refining_the_grid_does_not_raise_the_minimum(quadratic_rate):
    values = []
    for m in (8, 16, 32):
        problem = MinActionProblem(quadratic_rate, 0.0, 1.0, T=1.0, m=m)
        values.append(minimize_action(problem, init=_bent_start(n=m)).value)
    assert all(b <= a + 1e-6 for a, b in zip(values, values[1:]))


@pytest.mark.slow
def test_cosine_ring_minimum_over_random_endpoints(cosine_ring):
    rate = RateField(cosine_ring, box_radius=6.0, n_per_axis=31, grid_n=64)
    rng = np.random.default_rng(41)
    for x_start, slope in zip(rng.uniform(-1.0, 1.0, 5), rng.uniform(-0.6, 0.6, 5)):
        problem = MinActionProblem(rate, x_start, x_start + slope, T=1.0, m=8)
        start = Path.from_function(lambda t: x_start + slope * t + 0.05 * np.sin(np.pi * t), 1.0, 8)
        result = minimize_action(problem, init=start)
        assert result.value == pytest.approx(rate.evaluate(x_start, slope).value, abs=1e-3)
