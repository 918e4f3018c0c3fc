import math

import numpy as np
import pytest
from hypothesis import given, settings as hsettings
from hypothesis import strategies as st
from scipy.special import mathieu_a

from hamiltonian import (FeynmanKacOperator, HamiltonianSurface, build_surface, grad_h, h_montecarlo,
                         h_spectral, log_mean_exp, route_agreement)


def mathieu_h(beta):
    return -mathieu_a(0, 4.0 * beta) / 8.0


@pytest.mark.parametrize('name', ['constant', 'cosine-ring', 'full-dep', 'torus-2d'])
def test_zero_beta_gives_zero(name):
    from model import builtin
    spec = builtin(name)
    grid_n = 16 if spec.dim_fast > 1 else 64
    pair = h_spectral(spec, np.zeros(spec.dim_slow), np.zeros(spec.dim_slow), np.zeros(spec.dim_slow),
                      grid_n=grid_n)
    assert abs(pair.eigenvalue) <= 1e-10
    assert pair.min_eigenfunction > 0


def test_constant_system_is_linear(constant):
    for beta in (-1.5, 0.3, 2.0):
        assert h_spectral(constant, 0.0, 0.0, beta).eigenvalue == pytest.approx(0.7 * beta, abs=1e-9)


def test_transport_rows_sum_to_zero(full_dep, torus_2d):
    for spec, n in ((full_dep, 64), (torus_2d, 16)):
        op = FeynmanKacOperator(spec, np.zeros(spec.dim_slow), np.full(spec.dim_slow, 0.4),
                                np.full(spec.dim_slow, 0.5), n)
        sums = np.asarray(op.transport.sum(axis=1)).ravel()
        assert np.max(np.abs(sums)) < 1e-9
        off = op.transport.toarray()
        np.fill_diagonal(off, 0.0)
        assert off.min() >= 0.0


def test_mathieu_cross_check(cosine_ring):
    pair = h_spectral(cosine_ring, 0.0, 0.0, 0.1, grid_n=256)
    assert pair.eigenvalue == pytest.approx(mathieu_h(0.1), abs=2e-5)
    assert pair.eigenvalue == pytest.approx(0.009825, abs=2e-4)


@pytest.mark.parametrize('beta', [-1.0, 0.5, 2.0])
def test_cosine_ring_against_mathieu_values(cosine_ring, beta):
    assert h_spectral(cosine_ring, 0.0, 0.0, beta, grid_n=256).eigenvalue == pytest.approx(
        mathieu_h(beta), abs=1e-4)


def test_matches_dense_eigensolver_in_two_dimensions(torus_2d):
    beta = np.array([0.4, -0.3])
    op = FeynmanKacOperator(torus_2d, np.zeros(2), np.zeros(2), beta, 16)
    dense = np.max(np.linalg.eigvals(op.matrix.toarray()).real)
    pair = h_spectral(torus_2d, np.zeros(2), np.zeros(2), beta, grid_n=16, richardson=False)
    assert pair.eigenvalue == pytest.approx(dense, abs=1e-8)


def test_semigroup_scales_eigenfunction(cosine_ring):
    op = FeynmanKacOperator(cosine_ring, 0.0, 0.0, 0.4, 64)
    pair = op.principal_eigenpair()
    moved = op.apply_semigroup(pair.eigenfunction, 1.0)
    assert np.allclose(moved, math.exp(pair.eigenvalue) * pair.eigenfunction, rtol=1e-7)


@pytest.mark.parametrize('name', ['constant', 'cosine-ring', 'full-dep', 'torus-2d'])
def test_bounded_by_sup_norm(name):
    from model import builtin
    spec = builtin(name)
    grid_n = 16 if spec.dim_fast > 1 else 64
    direction = np.array([0.6, 0.8])[:spec.dim_slow]
    direction = direction / np.linalg.norm(direction)
    x = np.full(spec.dim_slow, 0.3)
    for s in np.linspace(-2.0, 2.0, 21):
        value = h_spectral(spec, x, x, s * direction, grid_n=grid_n, richardson=False).eigenvalue
        assert abs(value) <= spec.f_sup_norm * abs(s) + 1e-8


def test_row_sums_are_the_potential(full_dep, torus_2d):
    for spec, beta, n in ((full_dep, [0.7], 64), (torus_2d, [0.4, -1.1], 16)):
        x_prime = np.full(spec.dim_slow, 0.2)
        op = FeynmanKacOperator(spec, x_prime, np.full(spec.dim_slow, 0.5), beta, n)
        expected = spec.f(np.repeat(x_prime[None, :], len(op.points), axis=0), op.points) @ np.array(beta)
        assert np.allclose(op.row_sums(), expected, atol=1e-9)


def test_gradient_at_small_beta(cosine_ring):
    gradient = grad_h(cosine_ring, 0.0, 0.0, 0.1, grid_n=128)
    assert gradient[0] == pytest.approx(2 * 0.1 - 7 * 0.1 ** 3, abs=2e-3)
    assert grad_h(cosine_ring, 0.0, 0.0, 0.0, grid_n=64)[0] == pytest.approx(0.0, abs=1e-6)


def test_grid_must_be_fine_enough(cosine_ring):
    with pytest.raises(ValueError):
        FeynmanKacOperator(cosine_ring, 0.0, 0.0, 0.1, 8)


def test_log_mean_exp_equal_values_is_exact():
    lme, stderr, ess = log_mean_exp(np.full(50, 3.25))
    assert lme == 3.25
    assert stderr == 0.0
    assert ess == 50.0


@hsettings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=-30, max_value=30), min_size=2, max_size=40),
       st.floats(min_value=-100, max_value=100))
def test_log_mean_exp_shift_equivariant(values, shift):
    values = np.array(values)
    base, _, ess = log_mean_exp(values)
    shifted, _, _ = log_mean_exp(values + shift)
    assert shifted == pytest.approx(base + shift, abs=1e-8)
    assert 1.0 - 1e-9 <= ess <= len(values) + 1e-9


def test_montecarlo_on_constant_system_is_exact(constant):
    estimate = h_montecarlo(constant, 0.0, 0.0, 0.5, t=2.0, dt=0.01, replicas=100, seed=1)
    assert estimate.estimate == pytest.approx(0.35, abs=1e-12)
    assert estimate.stderr == 0.0


def test_montecarlo_zero_beta(cosine_ring):
    estimate = h_montecarlo(cosine_ring, 0.0, 0.0, 0.0, t=5.0, dt=0.01, replicas=100, seed=1)
    assert estimate.estimate == 0.0


@pytest.mark.parametrize('t, replicas', [(0.5, 200), (5.0, 10)])
def test_montecarlo_preconditions(cosine_ring, t, replicas):
    with pytest.raises(ValueError):
        h_montecarlo(cosine_ring, 0.0, 0.0, 0.1, t=t, dt=0.01, replicas=replicas, seed=1)


def test_surface_records_invariant_checks(full_dep):
    surface = build_surface(full_dep, 0.5, 0.5, [(-2.0, 2.0)], 9, grid_n=64)
    assert surface.values.shape == (9,)
    assert surface.checks['zero_ok']
    assert surface.checks['convexity_violations'] == 0
    assert surface.checks['bound_violations'] == 0
    assert surface.checks['min_eigenfunction'] > 0
    assert surface.values[surface.zero_index()] == pytest.approx(0.0, abs=1e-10)


def test_surface_inserts_zero_node(constant):
    surface = build_surface(constant, 0.0, 0.0, [(-1.0, 2.0)], 6, grid_n=32)
    assert 0.0 in surface.axes[0]
    assert np.allclose(surface.values, 0.7 * surface.axes[0], atol=1e-9)
    assert np.allclose(surface.gradients[:, 0], 0.7, atol=1e-6)


def test_synthetic_surface():
    surface = HamiltonianSurface.synthetic_surface(lambda b: float(b @ b), lambda b: 2 * b,
                                                   [(-1.0, 1.0), (-2.0, 2.0)], 5)
    assert surface.dim == 2
    assert surface.radius == 1.0
    assert surface.values.shape == (5, 5)
    assert np.allclose(surface.gradient_at_zero(), 0.0)
    assert surface.exact_value(np.array([1.0, 1.0])) == 2.0


@pytest.mark.slow
def test_route_agreement_error_decays(cosine_ring):
    result = route_agreement(cosine_ring, 0.0, 0.0, 0.1, times=[5.0, 20.0], dt=0.01,
                             replicas=10_000, seed=20240611, grid_n=128)
    assert result.spectral == pytest.approx(mathieu_h(0.1), abs=1e-5)
    assert result.errors[1] < result.errors[0]
    assert result.fitted_constant > 0


@hsettings(max_examples=25, deadline=None)
@given(st.floats(min_value=-2.0, max_value=2.0), st.floats(min_value=-2.0, max_value=2.0))
def test_midpoint_convexity_full_dep(a, b):
    from model import builtin
    spec = builtin('full-dep')

    def h(beta):
        return h_spectral(spec, 0.4, 0.4, beta, grid_n=32, richardson=False).eigenvalue

    left, right, middle = h(a), h(b), h(0.5 * (a + b))
    assert middle <= 0.5 * (left + right) + 1e-8 * (1.0 + abs(left) + abs(right))


@pytest.mark.slow
def test_midpoint_convexity_on_random_pairs(cosine_ring):
    rng = np.random.default_rng(3)
    pairs = rng.uniform(-3.0, 3.0, size=(1000, 2))

    def h(beta):
        return h_spectral(cosine_ring, 0.0, 0.0, beta, grid_n=32, richardson=False).eigenvalue

    for a, b in pairs:
        left, right = h(a), h(b)
        assert h(0.5 * (a + b)) <= 0.5 * (left + right) + 1e-8 * (1.0 + abs(left) + abs(right))


def test_gradient_matches_secant_along_random_directions(torus_2d):
    rng = np.random.default_rng(5)
    step = 1e-3
    for _ in range(4):
        beta = rng.uniform(-1.0, 1.0, size=2)
        direction = rng.normal(size=2)
        direction /= np.linalg.norm(direction)
        plus = h_spectral(torus_2d, np.zeros(2), np.zeros(2), beta + step * direction, grid_n=16,
                          richardson=False).eigenvalue
        minus = h_spectral(torus_2d, np.zeros(2), np.zeros(2), beta - step * direction, grid_n=16,
                           richardson=False).eigenvalue
        secant = (plus - minus) / (2.0 * step)
        directional = float(grad_h(torus_2d, np.zeros(2), np.zeros(2), beta, grid_n=16) @ direction)
        assert abs(secant - directional) <= 1e-3 * max(1.0, abs(directional))


@pytest.mark.parametrize('beta', [3.0, 6.0])
def test_default_grid_is_quiet_across_default_box(cosine_ring, beta):
    pair = h_spectral(cosine_ring, 0.0, 0.0, beta)
    assert pair.grid_n == 128
    assert not any('too coarse' in w for w in pair.warnings)


@pytest.mark.slow
def test_route_agreement_at_long_times(cosine_ring):
    result = route_agreement(cosine_ring, 0.0, 0.0, 0.3, times=[10.0, 40.0], dt=0.01,
                             replicas=10_000, seed=20240611, grid_n=128)
    assert result.errors[0] / result.errors[1] >= 2.5
    for t, error in zip(result.times, result.errors):
        assert error <= 5.0 * result.fitted_constant / t


@pytest.mark.slow
def test_montecarlo_matches_finite_time_semigroup(cosine_ring):
    t, beta = 50.0, 0.1
    estimate = h_montecarlo(cosine_ring, 0.0, 0.0, beta, t=t, dt=0.01, replicas=10_000, seed=7)
    op = FeynmanKacOperator(cosine_ring, 0.0, 0.0, beta, 128)
    exact = math.log(op.apply_semigroup(np.ones(len(op.points)), t)[0]) / t
    assert abs(estimate.estimate - exact) <= 3.0 * estimate.stderr
