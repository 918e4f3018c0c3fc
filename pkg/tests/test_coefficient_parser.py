import numpy as np
import pytest
from hypothesis import given, settings as hsettings
from hypothesis import strategies as st

from coefficient_parser import (compile_expression, compile_matrix_field, compile_time_function,
                                compile_vector_field, variable_names)
from errors import ConfigError


def test_variable_names():
    assert variable_names(2, 1) == ('x1', 'x2', 'y1')


def test_vector_field_shapes_and_values():
    f = compile_vector_field(['cos(y1)', 'x1 * sin(y2) + pi'], 1, 2, 'system.f')
    x = np.array([[2.0], [3.0]])
    y = np.array([[0.0, np.pi / 2], [np.pi, 0.0]])
    out = f(x, y)
    assert out.shape == (2, 2)
    assert np.allclose(out[:, 0], [1.0, -1.0])
    assert np.allclose(out[:, 1], [2.0 + np.pi, np.pi])


def test_constants_broadcast_to_batch():
    C = compile_matrix_field([['1.0', '0'], ['0.4', '1']], 1, 2, 'system.C')
    out = C(np.zeros((3, 1)), np.zeros((3, 2)))
    assert out.shape == (3, 2, 2)
    assert np.allclose(out[1], [[1.0, 0.0], [0.4, 1.0]])


def test_time_function():
    phi = compile_time_function(['0.5 * t', '-t ** 2'], 'path')
    assert np.allclose(phi([0.0, 2.0]), [[0.0, 0.0], [1.0, -4.0]])


@pytest.mark.parametrize('text', [
    '__import__("os")',
    'abs(y1)',
    'y1 % 2',
    'z1 + 1',
    'lambda: 1',
    'sin(y1, y1)',
    '',
    'y1 +',
])
def test_rejects_anything_outside_the_grammar(text):
    with pytest.raises(ConfigError):
        compile_expression(text, ('x1', 'y1'), 'system.f[0]')


def test_matrix_field_checks_shape():
    with pytest.raises(ConfigError, match='system.C'):
        compile_matrix_field([['1']], 1, 2, 'system.C')


@hsettings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=-10, max_value=10), min_size=1, max_size=20),
       st.floats(min_value=-3, max_value=3))
def test_expression_matches_numpy(values, x):
    y = np.array(values)
    expr = compile_expression('exp(-y1 ** 2) * sqrt(1 + x1 ** 2) - 2 * cos(y1) / 3', ('x1', 'y1'))
    env = {'x1': np.full(len(y), x), 'y1': y}
    expected = np.exp(-y ** 2) * np.sqrt(1 + x ** 2) - 2 * np.cos(y) / 3
    assert np.allclose(expr(env), expected)
