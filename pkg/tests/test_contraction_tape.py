import numpy as np
import pytest

import contraction_tape as tape
from contraction_tape import TapeError


def _complex(rng, *shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def test_madds_count_every_distinct_index(rng):
    a, b = _complex(rng, 2, 3, 4), _complex(rng, 4, 5)
    node, madds = tape.contract("ijk,kl->il", a, b)
    assert madds == 2 * 3 * 4 * 5
    np.testing.assert_allclose(node.value, np.einsum("ijk,kl->il", a, b))
    assert not node.requires_grad
    assert node.inputs == ()


def test_gradient_of_a_chain_matches_direct_derivative(rng):
    x = tape.variable(_complex(rng, 3, 3))
    a, b = _complex(rng, 3, 3), _complex(rng, 3, 3)
    left, _ = tape.contract("ij,jk->ik", a, x)
    both, _ = tape.contract("ik,kl->il", left, b)
    root, _ = tape.contract("ij,ij->", both, np.eye(3))
    (grad,), madds = tape.gradient(root, [x])
    # d Tr(A X B) / dX_jk = (B A)_kj
    np.testing.assert_allclose(grad, (b @ a).T, atol=1e-12)
    assert madds > 0


def test_gradient_sums_over_repeated_use_and_add(rng):
    x = tape.variable(_complex(rng, 4))
    w = _complex(rng, 4)
    first, _ = tape.contract("i,i->", x, w)
    second, _ = tape.contract("i,i->", x, x)
    (grad,), _ = tape.gradient(tape.add(first, second), [x])
    np.testing.assert_allclose(grad, w + 2 * x.value, atol=1e-12)


def test_gradient_broadcasts_indices_only_on_the_target(rng):
    x = tape.variable(_complex(rng, 2, 3))
    root, _ = tape.contract("ij->", x)
    (grad,), _ = tape.gradient(root, [x])
    np.testing.assert_allclose(grad, np.ones((2, 3)))


def test_constant_leaf_has_zero_gradient(rng):
    x = tape.variable(_complex(rng, 2))
    c = tape.constant(_complex(rng, 2))
    root, _ = tape.contract("i,i->", x, x)
    (gx, gc), _ = tape.gradient(root, [x, c])
    np.testing.assert_allclose(gx, 2 * x.value)
    np.testing.assert_allclose(gc, 0.0)


def test_tape_errors(rng):
    a = _complex(rng, 2, 2)
    with pytest.raises(TapeError):
        tape.contract("ij,jk", a, a)
    with pytest.raises(TapeError):
        tape.contract("ii->i", a)
    with pytest.raises(TapeError):
        tape.contract("ij,jk,kl->il", a, a, a)
    with pytest.raises(TapeError):
        tape.gradient(tape.variable(a), [])
    with pytest.raises(TapeError):
        tape.add()
