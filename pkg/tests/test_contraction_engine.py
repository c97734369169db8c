import numpy as np
import pytest
from scipy import linalg

from contraction_engine import ContractionEngine, ContractionError, LocalOperator
from free_fermion_oracle import bdg_solution, covariance_matrix, dense_spin_diagonalization
from graded_tensor import WireSpace, block_mask
from models import ModelKind, ModelSpec, build_model, hamiltonian_terms, hopping_chain, local_operators, tfi_state
from qfft_circuit import Circuit, Permutation
from spectral_state import MomentumOccupation, build_state
from variational import directional_derivative


@pytest.mark.parametrize("n", [8, 32])
def test_single_site_query_cost(n):
    _, state = build_model(ModelSpec(kind=ModelKind.FREE_FERMION_1D, dims=[n], particles=3))
    engine = ContractionEngine(state)
    engine.expect_one_site(local_operators()["n"], n // 3)
    assert engine.last_stats.steps == n - 1


def test_all_sites_share_cache():
    n = 32
    _, state = build_model(ModelSpec(kind=ModelKind.FREE_FERMION_1D, dims=[n], particles=7))
    engine = ContractionEngine(state, threads=1)
    values = engine.expect_all_one_site(local_operators()["n"])
    assert engine.last_stats.steps <= 2 * n * int(np.log2(n))
    np.testing.assert_allclose(values, 7 / n, atol=1e-12)


def test_density_matches_particle_filling(chain8):
    _, _, state = chain8
    engine = ContractionEngine(state)
    values = engine.expect_all_one_site(local_operators()["n"])
    np.testing.assert_allclose(np.real(values).sum(), 3.0, atol=1e-12)


def test_g1_matches_covariance(chain16_half):
    _, ham, state = chain16_half
    G = covariance_matrix(ham, state.occupation, 0.5)
    ops = local_operators()
    series = ContractionEngine(state).expect_all_two_site(ops["cdag"], ops["c"], site0=3)
    expected = [G[3, (3 + d) % 16] for d in range(16)]
    np.testing.assert_allclose(series.values, expected, atol=1e-10)


@pytest.mark.slow
def test_g1_sign_at_64_sites():
    spec = ModelSpec(kind=ModelKind.FREE_FERMION_1D, dims=[64], particles=13)
    ham, state = build_model(spec)
    G = covariance_matrix(ham, state.occupation)
    ops = local_operators()
    series = ContractionEngine(state).expect_all_two_site(ops["cdag"], ops["c"], site0=0)
    np.testing.assert_allclose(series.values, G[0, :], atol=1e-10)


def test_reduced_density_is_a_state(chain8):
    _, _, state = chain8
    engine = ContractionEngine(state)
    for sites in ([2], [1, 6], [6, 1]):
        rho = engine.reduced_density(sites)
        np.testing.assert_allclose(rho, rho.conj().T, atol=1e-12)
        assert np.trace(rho) == pytest.approx(1.0, abs=1e-12)
        assert np.linalg.eigvalsh(rho).min() > -1e-12


def test_odd_operator_expectation_is_zero(chain8):
    _, _, state = chain8
    engine = ContractionEngine(state)
    value = engine.expect_one_site(local_operators()["c"], 4)
    assert value == 0
    assert engine.last_stats.odd_operator_queries == 1


def test_query_errors(chain8):
    _, _, state = chain8
    engine = ContractionEngine(state)
    ops = local_operators()
    with pytest.raises(ContractionError):
        engine.expect_one_site(ops["n"], 8)
    with pytest.raises(ContractionError):
        engine.expect_two_site(ops["cdag"], 2, ops["c"], 2)
    with pytest.raises(ContractionError):
        engine.expect_one_site(local_operators(WireSpace(2))["n"], 0)
    with pytest.raises(ContractionError):
        engine.environment(hamiltonian_terms(chain8[1]), 10_000)
    with pytest.raises(ContractionError):
        LocalOperator.one_site(np.eye(3))


def test_environment_contracts_to_routed_energy():
    ham, state = tfi_state(8, 0.8)
    engine = ContractionEngine(state)
    terms = hamiltonian_terms(ham)
    gate_id = engine.two_body_gate_ids()[5]
    env = engine.environment(terms, gate_id).data.reshape(4, 4)
    routed = engine.routed_terms(terms, gate_id)
    assert routed
    core = engine.gate_matrix(gate_id)
    assert np.real(np.sum(env * core)) == pytest.approx(engine.energy(routed), abs=1e-10)


def test_environment_gradient_matches_finite_difference(rng):
    ham, state = tfi_state(8, 1.2)
    engine = ContractionEngine(state)
    terms = hamiltonian_terms(ham)
    mask = block_mask(WireSpace(1))
    step = 1e-6
    for gate_id in engine.two_body_gate_ids()[::4]:
        gate = engine.gate_matrix(gate_id)
        env = engine.environment(terms, gate_id).data.reshape(gate.shape)
        # 패리티 블록을 보존하는 반에르미트 생성자
        raw = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
        generator = np.where(mask, raw - raw.conj().T, 0.0)
        up = engine.trial_energy(terms, gate_id, gate @ linalg.expm(step * generator))
        down = engine.trial_energy(terms, gate_id, gate @ linalg.expm(-step * generator))
        numeric = (up - down) / (2 * step)
        analytic = directional_derivative(env, gate, generator)
        assert numeric == pytest.approx(analytic, rel=1e-4, abs=1e-7)


def test_replace_gate_checks_shape(chain8):
    _, _, state = chain8
    engine = ContractionEngine(state)
    gate_id = engine.two_body_gate_ids()[0]
    with pytest.raises(ContractionError):
        engine.replace_gate(gate_id, np.eye(2))


def test_energy_matches_filled_dispersion(chain8):
    _, ham, state = chain8
    energy = ContractionEngine(state).energy(hamiltonian_terms(ham))
    assert energy == pytest.approx(-2.0 - 2.0 * np.sqrt(2.0), abs=1e-10)


# ==================== 보골리우보프 상태 ====================

@pytest.mark.parametrize("n", [8, 16])
@pytest.mark.parametrize("h", [0.5, 1.3])
def test_tfi_energy_matches_bdg(n, h):
    ham, state = tfi_state(n, h)
    energy = ContractionEngine(state).energy(hamiltonian_terms(ham))
    assert energy == pytest.approx(bdg_solution(ham, 0.5).ground_energy, abs=1e-9)


def test_tfi_two_site_matches_dense():
    n, h = 8, 0.8
    ham, state = tfi_state(n, h)
    dense = dense_spin_diagonalization(n, h, "even")
    probs = np.abs(dense.vector) ** 2
    basis = np.arange(2 ** n)
    z = [1 - 2 * ((basis >> (n - 1 - i)) & 1) for i in range(n)]
    ops = local_operators()
    engine = ContractionEngine(state)
    zz = [engine.expect_two_site(ops["z"], 0, ops["z"], j) for j in range(1, n)]
    np.testing.assert_allclose(zz, [np.sum(probs * z[0] * z[j]) for j in range(1, n)], atol=1e-8)
    G = bdg_solution(ham, 0.5).G
    hopping = [engine.expect_two_site(ops["cdag"], 2, ops["c"], j) for j in range(n) if j != 2]
    np.testing.assert_allclose(hopping, [G[2, j] for j in range(n) if j != 2], atol=1e-9)


def test_one_site_bogoliubov_matches_dense():
    n, h = 8, 1.1
    _, state = tfi_state(n, h)
    engine = ContractionEngine(state)
    z = local_operators()["z"]
    values = [engine.expect_one_site_bogoliubov(z, x) for x in range(n)]
    np.testing.assert_allclose(values, dense_spin_diagonalization(n, h, "even").z, atol=1e-9)


def test_one_site_bogoliubov_at_16_sites():
    ham, state = tfi_state(16, 0.5)
    engine = ContractionEngine(state)
    expected = 1.0 - 2.0 * bdg_solution(ham, 0.5).density
    z = local_operators()["z"]
    for x in (0, 5, 11):
        assert engine.expect_one_site_bogoliubov(z, x) == pytest.approx(expected[x], abs=1e-10)


def test_one_site_bogoliubov_needs_pairs(chain8):
    _, _, state = chain8
    with pytest.raises(ContractionError):
        ContractionEngine(state).expect_one_site_bogoliubov(local_operators()["n"], 0)


# ==================== 원뿔 ====================

def test_causal_cone_of_bare_template_is_empty():
    occ = MomentumOccupation((1, 0, 1, 0, 0, 0, 1, 0))
    state = build_state(Circuit(8, WireSpace(1), (), Permutation(tuple(range(8)))), occ)
    engine = ContractionEngine(state)
    assert engine.causal_cone([3]) == []
    assert engine.causal_cone([2, 6]) == []
    n = local_operators()["n"]
    assert engine.expect_one_site(n, 2) == pytest.approx(1.0)
    assert engine.expect_one_site(n, 3) == pytest.approx(0.0)
    assert engine.last_stats.steps == 0


@pytest.mark.parametrize("n", [8, 16, 32, 64])
def test_one_site_cone_size(n):
    _, state = build_model(ModelSpec(kind=ModelKind.FREE_FERMION_1D, dims=[n], particles=3))
    cone = ContractionEngine(state).causal_cone([n // 3])
    assert len(cone) == n - 1
    levels = sorted({gate.level for gate in cone})
    assert len(levels) == int(np.log2(n))
    # 맨 아래 층에서 위로 갈수록 블록 수가 두 배
    counts = [sum(1 for gate in cone if gate.level == level) for level in reversed(levels)]
    assert counts == [2 ** k for k in range(len(levels))]


# ==================== 비용 ====================

def _per_step_madds(species: int):
    spec = ModelSpec(kind=ModelKind.FREE_FERMION_1D, dims=[16], particles=3, species=species)
    _, state = build_model(spec)
    ops = local_operators(state.wire_space)
    engine = ContractionEngine(state, threads=1)
    engine.expect_one_site(ops["n"], 5)
    engine.expect_two_site(ops["cdag"], 1, ops["c"], 6)
    return {kind: engine.stats.madds_per_step(kind) for kind in ("single", "fusion", "pair")}


def _exponents(low: int, high: int):
    small, large = _per_step_madds(low), _per_step_madds(high)
    ratio = 2 ** (high - low)
    return {kind: np.log(large[kind] / small[kind]) / np.log(ratio) for kind in small}


def test_step_cost_scaling_with_chi():
    exponents = _exponents(1, 2)
    assert exponents["single"] == pytest.approx(5.0, abs=1e-12)
    assert 4.5 <= exponents["single"] <= 5.5
    assert exponents["fusion"] <= 8.5
    assert 7.0 <= exponents["pair"] <= 8.5


@pytest.mark.slow
def test_step_cost_scaling_up_to_chi_8():
    exponents = _exponents(2, 3)
    assert exponents["single"] == pytest.approx(5.0, abs=1e-12)
    assert 7.0 <= exponents["pair"] <= 8.5


def test_all_two_site_step_bound():
    n = 32
    _, state = build_model(ModelSpec(kind=ModelKind.FREE_FERMION_1D, dims=[n], particles=7))
    ops = local_operators()
    engine = ContractionEngine(state, threads=1)
    engine.expect_all_two_site(ops["cdag"], ops["c"], site0=5)
    assert engine.last_stats.steps <= 2 * n * int(np.log2(n))


# ==================== 대칭 ====================

@pytest.mark.parametrize("first,second", [
    ("cdag", "c"), ("cdag", "cdag"), ("n", "z"), ("majorana_plus", "majorana_minus")])
def test_two_site_adjoint_symmetry(first, second):
    _, state = tfi_state(8, 0.7)
    ops = local_operators()
    A, B = ops[first], ops[second]
    engine = ContractionEngine(state)
    for i, j in ((1, 6), (5, 2), (3, 4)):
        forward = engine.expect_two_site(A, i, B, j)
        backward = engine.expect_two_site(B.dagger(), j, A.dagger(), i)
        assert forward == pytest.approx(np.conj(backward), abs=1e-12)


# ==================== 여러 종 ====================

@pytest.mark.parametrize("n,particles", [(4, 2), (8, 6), (16, 6)])
def test_multi_species_matches_covariance(n, particles):
    spec = ModelSpec(kind=ModelKind.FREE_FERMION_1D, dims=[n], particles=particles, species=2)
    _, state = build_model(spec)
    engine = ContractionEngine(state)
    chain = hopping_chain(n)
    site0 = 1
    for b in range(2):
        labels = [(label >> b) & 1 for label in state.occupation.occ]
        G = covariance_matrix(chain, labels)
        ops = local_operators(state.wire_space, species=b)
        values = [engine.expect_two_site(ops["cdag"], site0, ops["c"], j) for j in range(n) if j != site0]
        np.testing.assert_allclose(values, [G[site0, j] for j in range(n) if j != site0], atol=1e-10)
        density = engine.expect_all_one_site(ops["n"])
        np.testing.assert_allclose(density, np.real(np.diag(G)), atol=1e-10)
    cross = engine.expect_two_site(local_operators(state.wire_space, 0)["cdag"], 0,
                                   local_operators(state.wire_space, 1)["c"], n - 1)
    assert cross == pytest.approx(0.0, abs=1e-12)


# ==================== 환경 재사용 ====================

def test_environment_is_one_energy_pass():
    ham, state = tfi_state(8, 0.9)
    engine = ContractionEngine(state)
    terms = hamiltonian_terms(ham)
    gate_id = engine.two_body_gate_ids()[3]
    engine.energy(terms)
    plain = engine.last_stats.steps
    engine.environment(terms, gate_id)
    assert engine.last_stats.steps == plain
    assert engine.last_stats.kind_madds["adjoint"] > 0


def test_trial_energy_reuses_environment_densities():
    ham, state = tfi_state(8, 0.9)
    engine = ContractionEngine(state)
    terms = hamiltonian_terms(ham)
    gate_id = engine.two_body_gate_ids()[-1]
    routed = engine.routed_terms(terms, gate_id)
    gate = engine.gate_matrix(gate_id)
    cold = engine.trial_energy(routed, gate_id, gate)
    cold_steps = engine.last_stats.steps
    engine.environment(routed, gate_id)
    warm = engine.trial_energy(routed, gate_id, gate)
    assert engine.last_stats.cache_hits > 0
    assert engine.last_stats.steps < cold_steps
    assert warm == pytest.approx(cold, abs=1e-12)
    engine.replace_gate(gate_id, gate)
    engine.trial_energy(routed, gate_id, gate)
    assert engine.last_stats.steps == cold_steps
