import os
import sys

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'src'))

from model import builtin  # noqa: E402


@pytest.fixture
def constant():
    return builtin('constant')


@pytest.fixture
def cosine_ring():
    return builtin('cosine-ring')


@pytest.fixture
def full_dep():
    return builtin('full-dep')


@pytest.fixture
def torus_2d():
    return builtin('torus-2d')


@pytest.fixture
def configs_dir():
    return os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'configs')
