import numpy as np
import pytest

from graded_tensor import (
    GradedTensor,
    GradedTensorError,
    WireSpace,
    annihilation,
    apply_to_legs,
    block_mask,
    butterfly_gate,
    contract,
    creation,
    crossing_sign,
    f2_gate,
    gate_from_matrix,
    graded_kron,
    lift_species,
    number,
    operator_parity,
    parity_operator,
    phase_gate,
    swap_gate,
    twiddle_gate,
    unitarity_deviation,
)


def test_wire_space_parities():
    space = WireSpace(2)
    assert space.dim == 4
    assert list(space.parities) == [0, 1, 1, 0]
    assert list(space.occupations) == [0, 1, 1, 2]


def test_invalid_species_count():
    with pytest.raises(GradedTensorError):
        WireSpace(0)


def test_crossing_sign_two_odd_legs():
    p = WireSpace(1).parities
    sign = crossing_sign([p, p], [1, 0])
    expected = np.array([[1, 1], [1, -1]])
    np.testing.assert_array_equal(sign, expected)


def test_reorder_inverse_restores_tensor(rng):
    space = WireSpace(1)
    data = rng.normal(size=(2, 2, 2)) + 1j * rng.normal(size=(2, 2, 2))
    tensor = GradedTensor(data, (space,) * 3)
    perm = [2, 0, 1]
    inverse = list(np.argsort(perm))
    back = tensor.reorder(perm).reorder(inverse)
    np.testing.assert_allclose(back.data, tensor.data, atol=1e-15)
    assert back.mode_order == tensor.mode_order


def test_shape_mismatch_raises():
    with pytest.raises(GradedTensorError):
        GradedTensor(np.zeros((2, 3)), (WireSpace(1), WireSpace(1)))


@pytest.mark.parametrize("species", [1, 2, 3])
def test_basic_gates_are_unitary(species):
    space = WireSpace(species)
    for gate in (f2_gate(space), twiddle_gate(3, 8, space), phase_gate(0.3, space),
                 butterfly_gate(1, 4, space), swap_gate(space, space)):
        assert unitarity_deviation(gate.tensor) < 1e-13
        assert gate.tensor.parity_violation() == 0.0


def test_non_unitary_gate_rejected():
    with pytest.raises(GradedTensorError, match="not unitary"):
        gate_from_matrix(np.diag([1.0, 2.0]), WireSpace(1))


def test_parity_breaking_gate_rejected():
    x = np.array([[0, 1], [1, 0]], dtype=complex)
    with pytest.raises(GradedTensorError, match="parity"):
        gate_from_matrix(x, WireSpace(1))


def test_lift_species_single_is_identity_map():
    single = f2_gate(WireSpace(1)).matrix
    np.testing.assert_allclose(lift_species(single, 1), single, atol=1e-15)


def test_f2_moves_one_fermion_with_sign():
    """|10⟩ → (|01⟩ − |10⟩)/√2"""
    space = WireSpace(1)
    data = np.zeros((2, 2))
    data[1, 0] = 1.0
    psi = GradedTensor(data, (space, space))
    out = apply_to_legs(f2_gate(space).tensor, psi, [0, 1])
    np.testing.assert_allclose(out.data, [[0, 2 ** -0.5], [-(2 ** -0.5), 0]], atol=1e-15)


def test_canonical_anticommutation_within_wire():
    space = WireSpace(2)
    c0, c1 = annihilation(space, 0), annihilation(space, 1)
    eye = np.eye(4)
    np.testing.assert_allclose(c0 @ c1 + c1 @ c0, 0, atol=1e-15)
    np.testing.assert_allclose(c0 @ creation(space, 1) + creation(space, 1) @ c0, 0, atol=1e-15)
    np.testing.assert_allclose(c1 @ creation(space, 1) + creation(space, 1) @ c1, eye, atol=1e-15)
    np.testing.assert_allclose(number(space), creation(space, 0) @ c0 + creation(space, 1) @ c1)


def test_operator_parity():
    space = WireSpace(1)
    c = annihilation(space)
    assert operator_parity(c, space) == 1
    assert operator_parity(number(space), space) == 0
    with pytest.raises(GradedTensorError):
        operator_parity(c + number(space), space)


def test_graded_kron_odd_pair_carries_parity():
    """ĉ†₀ĉ₁ 의 2-모드 행렬은 (ĉ†P) ⊗ ĉ"""
    space = WireSpace(1)
    c, cd = annihilation(space), creation(space)
    expected = np.kron(cd @ parity_operator(space), c)
    np.testing.assert_allclose(graded_kron(cd, c, space, 1), expected)
    np.testing.assert_allclose(graded_kron(number(space), number(space), space, 0),
                               np.kron(number(space), number(space)))


def test_block_mask_counts():
    assert block_mask(WireSpace(1)).sum() == 8
    assert block_mask(WireSpace(1), arity=1).sum() == 2


def test_contract_in_natural_order_is_matrix_product(rng):
    space = WireSpace(1)
    matrix = f2_gate(space).matrix
    vector = rng.normal(size=4)
    op = GradedTensor(matrix, (WireSpace(2), WireSpace(2)))
    psi = GradedTensor(vector, (WireSpace(2),))
    out = contract(op, psi, [(1, 0)])
    np.testing.assert_allclose(out.data, matrix @ vector, atol=1e-15)
    with pytest.raises(GradedTensorError):
        contract(op, GradedTensor(np.ones(2), (space,)), [(1, 0)])
    with pytest.raises(GradedTensorError):
        contract(op, op, [(0, 0), (0, 1)])


def _random_even(rng, rank: int, space: WireSpace) -> GradedTensor:
    shape = (space.dim,) * rank
    data = rng.normal(size=shape) + 1j * rng.normal(size=shape)
    parity = sum(np.ix_(*[space.parities] * rank)) % 2
    return GradedTensor(np.where(parity == 0, data, 0.0), (space,) * rank)


@pytest.mark.parametrize("species", [1, 2])
def test_contract_is_associative(species, rng):
    space = WireSpace(species)
    A, B, C = _random_even(rng, 3, space), _random_even(rng, 3, space), _random_even(rng, 2, space)
    left = contract(contract(A, B, [(0, 2)]), C, [(3, 0)])
    right = contract(A, contract(B, C, [(1, 0)]), [(0, 1)])
    # 두 경우 모두 다리 순서 [A1, A2, B0, C1]
    np.testing.assert_allclose(left.data, right.data, atol=1e-12)


@pytest.mark.parametrize("a,b", [(1, 1), (1, 2), (2, 2)])
def test_swap_gate_is_an_involution(a, b):
    first, second = swap_gate(WireSpace(a), WireSpace(b)), swap_gate(WireSpace(b), WireSpace(a))
    size = 2 ** (a + b)
    np.testing.assert_allclose(second.matrix @ first.matrix, np.eye(size), atol=1e-15)


@pytest.mark.parametrize("species", [1, 2])
def test_swap_commutes_with_diagonal_gates(species):
    space = WireSpace(species)
    S = swap_gate(space, space).matrix
    for D1, D2 in [(twiddle_gate(3, 8, space).matrix, phase_gate(0.7, space).matrix),
                   (phase_gate(-1.3, space).matrix, twiddle_gate(1, 4, space).matrix)]:
        np.testing.assert_allclose(S @ np.kron(D1, D2), np.kron(D2, D1) @ S, atol=1e-14)
