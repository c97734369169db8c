import numpy as np
import pytest

from free_fermion_oracle import (
    bdg_solution,
    dense_quadratic_hamiltonian,
    fock_energy,
    plane_wave_orbitals,
    slater_statevector,
)
from graded_tensor import WireSpace
from models import hopping_chain, tfi_hamiltonian, tfi_state
from qfft_circuit import apply_momentum_offset, build_qfft_1d, build_qfft_2d
from spectral_state import (
    MomentumOccupation,
    StateError,
    bogoliubov_from_hamiltonian,
    build_state,
    dense_amplitudes,
    ground_state_occupation,
    pair_energy_residual,
    state_from_dict,
    state_to_dict,
)


def _fidelity(a: np.ndarray, b: np.ndarray) -> float:
    return abs(np.vdot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b))


@pytest.mark.parametrize("n", [2, 4, 8])
def test_dense_amplitudes_match_slater(n, rng):
    circuit = build_qfft_1d(n)
    for _ in range(10):
        occ = tuple(int(b) for b in rng.integers(0, 2, size=n))
        if not any(occ):
            continue
        state = build_state(circuit, MomentumOccupation(occ))
        momenta = [k for k, a in enumerate(occ) if a]
        expected = slater_statevector(plane_wave_orbitals(n, momenta))
        assert _fidelity(expected, dense_amplitudes(state)) == pytest.approx(1.0, abs=1e-10)


def test_dense_amplitudes_half_integer_momenta(rng):
    circuit = apply_momentum_offset(build_qfft_1d(8), 0.5)
    occ = (1, 0, 1, 1, 0, 0, 0, 1)
    state = build_state(circuit, MomentumOccupation(occ))
    expected = slater_statevector(plane_wave_orbitals(8, [0, 2, 3, 7], 0.5))
    assert _fidelity(expected, dense_amplitudes(state)) == pytest.approx(1.0, abs=1e-10)


def test_dense_amplitudes_2d():
    circuit = build_qfft_2d(2, 4)
    occ = (1, 1, 0, 0, 0, 1, 0, 0)
    state = build_state(circuit, MomentumOccupation(occ))
    expected = slater_statevector(plane_wave_orbitals(8, [0, 1, 5], shape=(2, 4)))
    assert _fidelity(expected, dense_amplitudes(state)) == pytest.approx(1.0, abs=1e-10)


def test_occupation_validation():
    with pytest.raises(StateError):
        MomentumOccupation((0, 2), WireSpace(1))
    occ = MomentumOccupation((3, 1, 0), WireSpace(2))
    assert occ.particle_count == 3
    assert occ.parity() == 1


def test_build_state_checks_sizes():
    with pytest.raises(StateError):
        build_state(build_qfft_1d(4), MomentumOccupation((1, 0)))
    with pytest.raises(StateError):
        build_state(build_qfft_1d(4), MomentumOccupation((1, 0, 0, 0), WireSpace(2)))


def test_ground_state_occupation_closed_and_open_shell():
    h = hopping_chain(8)
    closed = ground_state_occupation(h, 3)
    assert closed.occ == (1, 1, 0, 0, 0, 0, 0, 1)
    assert not closed.degenerate
    assert ground_state_occupation(h, 2).degenerate


def test_ground_state_occupation_rejects_pairing():
    with pytest.raises(StateError):
        ground_state_occupation(tfi_hamiltonian(4, 1.0), 2)


@pytest.mark.parametrize("h", [0.4, 1.0, 1.7])
def test_bogoliubov_state_reaches_bdg_energy(h):
    ham, state = tfi_state(8, h)
    assert pair_energy_residual(state.bogoliubov, ham, 0.5) < 1e-12
    vector = dense_amplitudes(state)
    energy = np.real(np.vdot(vector, dense_quadratic_hamiltonian(ham) @ vector))
    spectrum = np.linalg.eigvalsh(dense_quadratic_hamiltonian(ham).toarray())
    # 짝수 패리티 섹터 바닥 에너지
    parity = np.array([bin(i).count("1") % 2 for i in range(2 ** 8)])
    even = np.linalg.eigvalsh(dense_quadratic_hamiltonian(ham).toarray()[np.ix_(parity == 0, parity == 0)])
    assert energy == pytest.approx(even[0], abs=1e-9)
    assert energy >= spectrum[0] - 1e-9


def test_bogoliubov_layer_partners():
    layer, occ = bogoliubov_from_hamiltonian(tfi_hamiltonian(8, 0.8), 0.5)
    partner = layer.partner_of()
    assert all(partner[partner[k]] == k for k in range(8))
    assert layer.pairs[0] == (0, 7)
    assert occ.parity() == 0


def test_state_document_round_trip():
    _, state = tfi_state(4, 0.6)
    restored = state_from_dict(state_to_dict(state))
    np.testing.assert_allclose(dense_amplitudes(restored), dense_amplitudes(state), atol=1e-14)
    with pytest.raises(StateError):
        state_from_dict({"format": "bogus"})


@pytest.mark.parametrize("changes", [{0: 1, 7: 1}, {1: 0, 6: 1, 2: 1, 5: 0}])
def test_bogoliubov_excited_labels_are_eigenstates(changes):
    ham = tfi_hamiltonian(8, 0.8)
    ground, _ = bogoliubov_from_hamiltonian(ham, 0.5)
    labels = list(bdg_solution(ham, 0.5).ground_labels)
    for k, value in changes.items():
        labels[k] = value
    layer, occ = bogoliubov_from_hamiltonian(ham, 0.5, labels)
    assert occ.occ == tuple(labels)
    assert layer.pairs == ground.pairs
    state = build_state(apply_momentum_offset(build_qfft_1d(8), 0.5), occ, layer)
    H = dense_quadratic_hamiltonian(ham)
    vector = dense_amplitudes(state)
    expected = fock_energy(ham, labels, 0.5)
    assert expected > bdg_solution(ham, 0.5).ground_energy
    np.testing.assert_allclose(H @ vector, expected * vector, atol=1e-9)


def test_bogoliubov_labels_are_checked():
    ham = tfi_hamiltonian(4, 0.8)
    with pytest.raises(StateError):
        bogoliubov_from_hamiltonian(ham, 0.5, [0, 1])
    with pytest.raises(StateError):
        bogoliubov_from_hamiltonian(ham, 0.5, [0, 2, 0, 0])
