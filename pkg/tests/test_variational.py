import numpy as np
import pytest
from pydantic import ValidationError

from contraction_engine import ContractionEngine, LocalOperator
from free_fermion_oracle import bdg_solution, dense_spin_diagonalization
from graded_tensor import WireSpace, annihilation, creation, number
from models import hamiltonian_terms, local_operators, tfi_state
from spectral_state import dense_amplitudes
from variational import (
    InitialCircuit,
    OptimizationConfig,
    OptimizationError,
    UpdateRule,
    bond_grow,
    embed_operator,
    flatten_bogoliubov,
    initial_state,
    load_checkpoint,
    minimize_energy,
    polar_update,
    random_parity_unitary,
    save_checkpoint,
    unitarize,
)


def _assert_monotone(trace):
    assert (np.diff(trace["energy"].to_numpy()) <= 1e-9).all()


def test_config_rejects_unknown_fields():
    with pytest.raises(ValidationError):
        OptimizationConfig(sweeps=3)
    with pytest.raises(ValidationError):
        OptimizationConfig(tolerance=0.0)
    assert OptimizationConfig(rule="gradient").rule == UpdateRule.GRADIENT


def test_random_parity_unitary_is_block_unitary(rng):
    space = WireSpace(1)
    gate = random_parity_unitary(space, rng)
    np.testing.assert_allclose(gate.conj().T @ gate, np.eye(4), atol=1e-12)
    # |00⟩,|11⟩ 짝수 블록과 |01⟩,|10⟩ 홀수 블록 사이 성분은 0
    assert np.abs(gate[np.ix_([0, 3], [1, 2])]).max() == 0.0


def test_polar_update_minimizes_linear_term(rng):
    space = WireSpace(1)
    env = np.zeros((4, 4), dtype=complex)
    for block in ([0, 3], [1, 2]):
        env[np.ix_(block, block)] = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    best = np.real(np.sum(env * polar_update(env, space)))
    for _ in range(20):
        trial = random_parity_unitary(space, rng)
        assert best <= np.real(np.sum(env * trial)) + 1e-12
    np.testing.assert_allclose(unitarize(polar_update(env, space), space), polar_update(env, space), atol=1e-12)


def test_free_fermion_ground_state_is_stationary(chain8):
    _, ham, state = chain8
    exact = -2.0 - 2.0 * np.sqrt(2.0)
    result, trace = minimize_energy(state, hamiltonian_terms(ham), OptimizationConfig(max_sweeps=2))
    assert trace["energy"].iloc[0] == pytest.approx(exact, abs=1e-10)
    assert trace["energy"].iloc[-1] == pytest.approx(exact, abs=1e-8)
    assert ContractionEngine(result).energy(hamiltonian_terms(ham)) == pytest.approx(exact, abs=1e-8)


def test_tfi_bogoliubov_start_holds_oracle_energy():
    ham, state = tfi_state(8, 1.0)
    exact = bdg_solution(ham, 0.5).ground_energy
    _, trace = minimize_energy(state, hamiltonian_terms(ham), OptimizationConfig(max_sweeps=2))
    assert trace["energy"].iloc[0] == pytest.approx(exact, abs=1e-10)
    assert trace["energy"].iloc[-1] == pytest.approx(exact, abs=1e-8)
    assert trace["unitarity"].max() < 1e-10
    _assert_monotone(trace)


@pytest.mark.parametrize("rule", [UpdateRule.SVD_POLAR, UpdateRule.GRADIENT])
def test_random_start_decreases_energy(rule):
    ham, state = tfi_state(4, 0.7)
    terms = hamiltonian_terms(ham)
    cfg = OptimizationConfig(max_sweeps=6, rule=rule, initial=InitialCircuit.RANDOM, seed=3)
    result, trace = minimize_energy(state, terms, cfg)
    exact = bdg_solution(ham, 0.5).ground_energy
    _assert_monotone(trace)
    assert trace["energy"].iloc[-1] < trace["energy"].iloc[0] - 1e-6
    assert trace["energy"].iloc[-1] >= exact - 1e-9
    assert trace["unitarity"].max() < 1e-10
    assert trace.attrs["rule"] == rule.value
    assert trace.attrs["seed"] == 3
    assert ContractionEngine(result).energy(terms) == pytest.approx(trace["energy"].iloc[-1], abs=1e-9)


def test_random_start_is_reproducible():
    _, state = tfi_state(4, 0.7)
    cfg = OptimizationConfig(initial=InitialCircuit.RANDOM, seed=11)
    a = dense_amplitudes(initial_state(state, cfg))
    b = dense_amplitudes(initial_state(state, cfg))
    np.testing.assert_array_equal(a, b)


def test_flatten_bogoliubov_keeps_state():
    _, state = tfi_state(8, 0.6)
    flat = flatten_bogoliubov(state)
    assert flat.bogoliubov is None
    overlap = abs(np.vdot(dense_amplitudes(flat), dense_amplitudes(state)))
    assert overlap == pytest.approx(1.0, abs=1e-10)


def test_invalid_terms_rejected(chain8):
    _, _, state = chain8
    ops = local_operators()
    non_hermitian = LocalOperator.one_site(np.diag([1.0, 1.0j]), "bad")
    with pytest.raises(OptimizationError, match="Hermitian"):
        minimize_energy(state, [(non_hermitian, (0,))], OptimizationConfig(max_sweeps=1))
    with pytest.raises(OptimizationError):
        minimize_energy(state, [(ops["n"], (8,))], OptimizationConfig(max_sweeps=1))
    with pytest.raises(OptimizationError):
        minimize_energy(state, [(ops["n"], (0, 1))], OptimizationConfig(max_sweeps=1))


def test_checkpoint_round_trip(tmp_path):
    ham, state = tfi_state(4, 0.9)
    path = tmp_path / "ckpt" / "state.json"
    cfg = OptimizationConfig(max_sweeps=1, initial=InitialCircuit.RANDOM, seed=5)
    result, _ = minimize_energy(state, hamiltonian_terms(ham), cfg, checkpoint=path)
    restored = load_checkpoint(path)
    np.testing.assert_allclose(dense_amplitudes(restored), dense_amplitudes(result), atol=1e-12)
    save_checkpoint(restored, tmp_path / "again.json")
    assert load_checkpoint(tmp_path / "again.json").num_sites == 4


@pytest.mark.slow
def test_identity_start_reaches_tfi_ground_state():
    ham, state = tfi_state(8, 1.5)
    exact = dense_spin_diagonalization(8, 1.5, "even").energy
    cfg = OptimizationConfig(max_sweeps=200, initial=InitialCircuit.IDENTITY, tolerance=1e-12)
    _, trace = minimize_energy(state, hamiltonian_terms(ham), cfg)
    _assert_monotone(trace)
    assert abs(trace["energy"].iloc[-1] - exact) / abs(exact) <= 1e-3


# ==================== 사이트 병합 ====================

@pytest.mark.parametrize("slot", [0, 1, 2])
def test_embed_operator_matches_merged_species(slot):
    single, merged = WireSpace(1), WireSpace(3)
    np.testing.assert_allclose(embed_operator(annihilation(single), slot, 3, single),
                               annihilation(merged, slot), atol=1e-15)
    np.testing.assert_allclose(embed_operator(number(single), slot, 3, single),
                               number(merged, slot), atol=1e-15)


def test_bond_grow_factor_one_is_unchanged(chain8):
    _, ham, state = chain8
    grown = bond_grow(state, 1)
    assert grown.state is state
    assert len(grown.terms(hamiltonian_terms(ham))) == len(hamiltonian_terms(ham))


def test_bond_grow_rejects_bad_factor(chain8):
    _, _, state = chain8
    with pytest.raises(OptimizationError):
        bond_grow(state, 3)
    with pytest.raises(OptimizationError):
        bond_grow(state, 8)


def test_bond_grow_keeps_particles_and_bounds_energy(chain8):
    _, ham, state = chain8
    grown = bond_grow(state, 2)
    assert grown.state.num_sites == 4
    assert grown.state.wire_space.dim == 4
    engine = ContractionEngine(grown.state)
    total = 0.0
    for site in range(8):
        op, wire = grown.lift(number(WireSpace(1)), site)
        total += np.real(engine.expect_one_site(op, wire))
    assert total == pytest.approx(3.0, abs=1e-10)
    energy = engine.energy(grown.terms(hamiltonian_terms(ham)))
    assert energy == pytest.approx(-2.0 - 2.0 * np.sqrt(2.0), abs=1e-10)


def test_bond_grow_observables_agree(chain8):
    _, _, state = chain8
    grown = bond_grow(state, 2)
    original, merged = ContractionEngine(state), ContractionEngine(grown.state)
    space = WireSpace(1)
    ops = local_operators(space)
    for site in range(8):
        op, wire = grown.lift(number(space), site)
        assert merged.expect_one_site(op, wire) == pytest.approx(original.expect_one_site(ops["n"], site), abs=1e-10)
    for a, b in ((1, 4), (0, 7), (5, 2)):
        op_a, wire_a = grown.lift(creation(space), a)
        op_b, wire_b = grown.lift(annihilation(space), b)
        expected = original.expect_two_site(ops["cdag"], a, ops["c"], b)
        assert merged.expect_two_site(op_a, wire_a, op_b, wire_b) == pytest.approx(expected, abs=1e-10)


@pytest.mark.parametrize("factor", [2, 4])
def test_bond_grow_keeps_bogoliubov_energy(factor):
    ham, state = tfi_state(8, 0.8)
    grown = bond_grow(state, factor)
    assert grown.state.bogoliubov is None
    assert grown.state.momentum_offset == 0.5
    energy = ContractionEngine(grown.state).energy(grown.terms(hamiltonian_terms(ham)))
    assert energy == pytest.approx(bdg_solution(ham, 0.5).ground_energy, abs=1e-9)


def test_merged_optimum_does_not_exceed_unmerged():
    ham, template = tfi_state(8, 1.4)
    terms = hamiltonian_terms(ham)
    cfg = OptimizationConfig(max_sweeps=2, initial=InitialCircuit.RANDOM, seed=3)
    unmerged, trace = minimize_energy(template, terms, cfg)
    best = trace["energy"].iloc[-1]
    grown = bond_grow(unmerged, 2)
    _, merged = minimize_energy(grown.state, grown.terms(terms), OptimizationConfig(max_sweeps=2))
    assert merged["energy"].iloc[0] == pytest.approx(best, abs=1e-9)
    assert merged["energy"].iloc[-1] <= best + 1e-10
    _assert_monotone(merged)


def test_trace_records_engine_stats(chain8):
    _, ham, state = chain8
    _, trace = minimize_energy(state, hamiltonian_terms(ham), OptimizationConfig(max_sweeps=1))
    assert trace.attrs["engine_stats"]["steps"] > 0
    assert trace.attrs["engine_stats"]["madds"] > 0
