"""공용 픽스처"""

import numpy as np
import pytest

from graded_tensor import WireSpace
from models import ModelKind, ModelSpec, build_model, local_operators


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def space():
    return WireSpace(1)


@pytest.fixture
def ops(space):
    return local_operators(space)


@pytest.fixture
def chain8():
    """8 사이트, 3 입자 자유 페르미온 사슬 (닫힌 껍질)"""
    spec = ModelSpec(kind=ModelKind.FREE_FERMION_1D, dims=[8], particles=3)
    ham, state = build_model(spec)
    return spec, ham, state


@pytest.fixture
def chain16_half():
    """16 사이트, 6 입자, 반정수 운동량"""
    spec = ModelSpec(kind=ModelKind.FREE_FERMION_1D, dims=[16], particles=6, offset=0.5)
    ham, state = build_model(spec)
    return spec, ham, state
