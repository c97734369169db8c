"""
스펙트럴 텐서 네트워크 상태 (Spectral State)

운동량 공간 곱 Fock 상태 |α₁⟩…|αₙ⟩ → (선택) ±k 보골리우보프 층 → QFFT 회로 → 실공간 파동함수.
상태는 회로와 점유만 들고 다니며 dense 진폭은 검증용으로만 만든다.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from free_fermion_oracle import (
    QuadraticHamiltonian,
    bdg_solution,
    dispersion,
    max_abs,
    pair_block,
)
from graded_tensor import (
    Gate,
    GradedTensor,
    WireSpace,
    apply_to_legs,
    bogoliubov_gate,
    gate_from_matrix,
)
from qfft_circuit import (
    Circuit,
    apply_momentum_offset,
    circuit_from_dict,
    circuit_to_dict,
    gate_from_dict,
    gate_to_dict,
)
from settings import SETTINGS

logger = logging.getLogger(__name__)

STATE_FORMAT = "stn-state/1"

__all__ = [
    "BogoliubovLayer", "MomentumOccupation", "SpectralState", "StateError",
    "apply_momentum_offset", "bogoliubov_from_hamiltonian", "build_state",
    "dense_amplitudes", "ground_state_occupation", "state_from_dict", "state_to_dict",
]


class StateError(ValueError):
    """상태 구성 오류"""


@dataclass(frozen=True)
class MomentumOccupation:
    """운동량 와이어별 Fock 라벨 (비트 b = 종 b 점유)"""
    occ: Tuple[int, ...]
    space: WireSpace = WireSpace(1)
    degenerate: bool = False

    def __post_init__(self):
        occ = tuple(int(a) for a in self.occ)
        bad = [a for a in occ if not 0 <= a < self.space.dim]
        if bad:
            raise StateError(f"occupation labels {bad} out of range [0, {self.space.dim})")
        object.__setattr__(self, "occ", occ)

    def __len__(self) -> int:
        return len(self.occ)

    @property
    def particle_count(self) -> int:
        return int(sum(self.space.occupations[a] for a in self.occ))

    def parity(self) -> int:
        return self.particle_count % 2


@dataclass(frozen=True)
class BogoliubovLayer:
    """운동량 공간 맨 위의 (k, q) 쌍 게이트와 자기 짝 와이어 게이트"""
    pairs: Tuple[Tuple[int, int], ...]
    gates: Tuple[Gate, ...]
    unpaired: Tuple[int, ...] = ()
    unpaired_gates: Tuple[Gate, ...] = ()

    def __post_init__(self):
        if len(self.pairs) != len(self.gates) or len(self.unpaired) != len(self.unpaired_gates):
            raise StateError("every Bogoliubov pair and unpaired wire needs one gate")
        wires = [w for pair in self.pairs for w in pair] + list(self.unpaired)
        if sorted(wires) != list(range(len(wires))):
            raise StateError("Bogoliubov pairs and unpaired wires must partition the wires")
        if any(g.arity != 2 for g in self.gates) or any(g.arity != 1 for g in self.unpaired_gates):
            raise StateError("pair gates must be two-wire, unpaired gates one-wire")

    @property
    def num_wires(self) -> int:
        return 2 * len(self.pairs) + len(self.unpaired)

    def partner_of(self) -> Dict[int, int]:
        mapping = {k: k for k in self.unpaired}
        for k, q in self.pairs:
            mapping[k], mapping[q] = q, k
        return mapping


@dataclass(frozen=True, eq=False)
class SpectralState:
    """회로 + 운동량 점유 (+ 보골리우보프 층)"""
    circuit: Circuit
    occupation: MomentumOccupation
    bogoliubov: Optional[BogoliubovLayer] = None

    @property
    def momentum_offset(self) -> float:
        return self.circuit.momentum_offset

    @property
    def num_sites(self) -> int:
        return self.circuit.num_wires

    @property
    def wire_space(self) -> WireSpace:
        return self.circuit.wire_space


def ground_state_occupation(h: QuadraticHamiltonian, count: int, offset: float = 0.0,
                            species: int = 1,
                            energies: Optional[np.ndarray] = None) -> MomentumOccupation:
    """
    분산 ε(k)가 가장 낮은 count개 모드를 채운다

    Args:
        h: pairing 없는 2차 해밀토니안. species > 1이면 모드 순서는 x·s + b
        count: 입자 수 N (0 ≤ N ≤ n·s)
        energies: 미리 계산한 분산 (종, 와이어) 배열. 큰 2D 격자에서 기저 변환을 건너뛴다

    동률은 (ε, 와이어, 종) 오름차순으로 깨고 페르미 준위가 축퇴면 degenerate=True.
    """
    if h.has_pairing:
        raise StateError("ground_state_occupation needs zero pairing; use bogoliubov_from_hamiltonian")
    space = WireSpace(species)
    if h.num_modes % species:
        raise StateError(f"{h.num_modes} modes cannot hold {species} species")
    n = h.num_modes // species
    if not 0 <= count <= n * species:
        raise StateError(f"particle count {count} out of range [0, {n * species}]")

    levels = []
    for b in range(species):
        for c in range(species):
            if energies is None and b != c and max_abs(h.hopping[b::species, c::species]) > 1e-14:
                raise StateError("hopping mixes species; dispersion is not species-diagonal")
        if energies is None:
            block = QuadraticHamiltonian(h.hopping[b::species, b::species],
                                         shape=h.shape if int(np.prod(h.shape)) == n else ())
            eps = dispersion(block, offset)
        else:
            eps = np.asarray(energies, dtype=float).reshape(species, n)[b]
        levels.extend((round(float(eps[k]), 10), k, b, float(eps[k])) for k in range(n))
    levels.sort()

    labels = [0] * n
    for _key, k, b, _eps in levels[:count]:
        labels[k] |= 1 << b
    degenerate = (0 < count < len(levels)
                  and abs(levels[count][3] - levels[count - 1][3]) < SETTINGS.tolerance)
    if degenerate:
        logger.warning("Fermi level is degenerate at N=%d (ε=%.6f); tie broken by wire index",
                       count, levels[count - 1][3])
    return MomentumOccupation(tuple(labels), space, degenerate)


def build_state(c: Circuit, occ: MomentumOccupation,
                bog: Optional[BogoliubovLayer] = None) -> SpectralState:
    if len(occ) != c.num_wires:
        raise StateError(f"occupation has {len(occ)} wires, circuit has {c.num_wires}")
    if occ.space != c.wire_space:
        raise StateError("occupation wire space differs from circuit wire space")
    if bog is not None:
        if bog.num_wires != c.num_wires:
            raise StateError(f"Bogoliubov layer covers {bog.num_wires} wires, circuit has {c.num_wires}")
        if any(g.space != c.wire_space for g in bog.gates + bog.unpaired_gates):
            raise StateError("Bogoliubov gates act on a different wire space")
    return SpectralState(c, occ, bog)


def dense_amplitudes(state: SpectralState) -> np.ndarray:
    """
    명시적 게이트 적용으로 만든 전체 상태 벡터 (검증용)

    기저는 사이트 오름차순 곱 ĉ†_{x₁}…ĉ†_{x_N}|0⟩, 사이트 0 라벨이 최상위 자리.
    """
    n, space = state.num_sites, state.wire_space
    if n * space.num_species > SETTINGS.dense_max_modes:
        raise StateError(f"dense amplitudes limited to {SETTINGS.dense_max_modes} modes, "
                         f"got {n * space.num_species}")
    # 1) 운동량 곱 상태 (논리 id 순서)
    data = np.zeros((space.dim,) * n, dtype=np.complex128)
    data[state.occupation.occ] = 1.0
    psi = GradedTensor(data, (space,) * n, tuple(range(n)))

    # 2) 보골리우보프 층
    if state.bogoliubov is not None:
        for k, gate in zip(state.bogoliubov.unpaired, state.bogoliubov.unpaired_gates):
            psi = apply_to_legs(gate.tensor, psi, [k])
        for pair, gate in zip(state.bogoliubov.pairs, state.bogoliubov.gates):
            psi = apply_to_legs(gate.tensor, psi, list(pair))

    # 3) 회로 (순열 층은 재라벨링)
    for op in state.circuit.logical_ops():
        psi = apply_to_legs(op.gate.tensor, psi, list(op.ids))

    # 4) id 순서 → 사이트 순서 (부호 포함)
    psi = psi.reorder(list(state.circuit.id_of_site()))
    vector = psi.data.reshape(-1)
    norm = np.linalg.norm(vector)
    if abs(norm - 1.0) > 1e-10:
        logger.warning("dense state norm deviates from 1: %.3e", norm - 1.0)
    return vector


def _rotation_gate(vecs: np.ndarray, space: WireSpace) -> Gate:
    """|00⟩ → 짝수 블록 낮은 고유벡터, |11⟩ → 높은 고유벡터, 홀수 상태는 그대로"""
    W = np.eye(4, dtype=np.complex128)
    W[np.ix_([0, 3], [0, 3])] = vecs
    angle = float(np.arctan2(abs(vecs[1, 0]), abs(vecs[0, 0])))
    return bogoliubov_gate(W, space, angle)


def bogoliubov_from_hamiltonian(h: QuadraticHamiltonian, offset: float = 0.0,
                                labels: Optional[Sequence[int]] = None) -> Tuple[BogoliubovLayer, MomentumOccupation]:
    """
    (k, q = −k) 쌍마다 2×2 BdG 블록을 대각화해 보골리우보프 층과 점유를 만든다

    Args:
        labels: 와이어별 준입자 Fock 라벨 (0/1). None이면 바닥 상태 라벨.
            쌍의 |11⟩ 은 높은 짝수 고유상태가 된다 (free_fermion_oracle.fock_energy 참고)

    Raises:
        StateError: 회전 뒤 잔여 비대각 결합이 허용오차를 넘거나 라벨이 잘못됐을 때
    """
    solution = bdg_solution(h, offset)
    space = WireSpace(1)
    gates = []
    for k, q in solution.pairs:
        vecs = solution.even_vectors[(k, q)]
        block = pair_block(solution.dispersion[k], solution.dispersion[q], solution.gaps[(k, q)])
        rotated = vecs.conj().T @ block @ vecs
        if abs(rotated[0, 1]) > SETTINGS.unitary_tolerance * max(1.0, np.max(np.abs(block))):
            raise StateError(f"pair ({k}, {q}) is not diagonalized (residual {abs(rotated[0, 1]):.3e})")
        gates.append(_rotation_gate(vecs, space))
    identity = gate_from_matrix(np.eye(2), space, "ID")
    layer = BogoliubovLayer(tuple(solution.pairs), tuple(gates),
                            tuple(solution.unpaired), tuple(identity for _ in solution.unpaired))
    chosen = solution.ground_labels if labels is None else labels
    if len(chosen) != len(solution.ground_labels):
        raise StateError(f"need {len(solution.ground_labels)} quasiparticle labels, got {len(chosen)}")
    occ = MomentumOccupation(tuple(int(a) for a in chosen), space)
    logger.debug("Bogoliubov layer: %d pairs, %d unpaired, E0=%.12f, excited=%s",
                 len(solution.pairs), len(solution.unpaired), solution.ground_energy, labels is not None)
    return layer, occ


def pair_energy_residual(layer: BogoliubovLayer, h: QuadraticHamiltonian, offset: float) -> float:
    """W† H_pair W 의 최대 비대각 성분"""
    solution = bdg_solution(h, offset)
    worst = 0.0
    for (k, q), gate in zip(layer.pairs, layer.gates):
        block = pair_block(solution.dispersion[k], solution.dispersion[q], solution.gaps[(k, q)])
        even = gate.matrix[np.ix_([0, 3], [0, 3])]
        rotated = even.conj().T @ block @ even
        worst = max(worst, abs(rotated[0, 1]), abs(rotated[1, 0]))
    return float(worst)


# ==================== 직렬화 ====================

def state_to_dict(state: SpectralState) -> Dict:
    doc = {
        "format": STATE_FORMAT,
        "circuit": circuit_to_dict(state.circuit),
        "occupation": list(state.occupation.occ),
        "num_species": state.wire_space.num_species,
        "momentum_offset": state.momentum_offset,
        "bogoliubov": None,
    }
    if state.bogoliubov is not None:
        bog = state.bogoliubov
        doc["bogoliubov"] = {
            "pairs": [list(p) for p in bog.pairs],
            "gates": [gate_to_dict(g) for g in bog.gates],
            "unpaired": list(bog.unpaired),
            "unpaired_gates": [gate_to_dict(g) for g in bog.unpaired_gates],
        }
    return doc


def state_from_dict(doc: Dict) -> SpectralState:
    if doc.get("format") != STATE_FORMAT:
        raise StateError(f"unsupported state format {doc.get('format')!r}")
    circuit = circuit_from_dict(doc["circuit"])
    space = circuit.wire_space
    occ = MomentumOccupation(tuple(doc["occupation"]), space)
    bog = None
    if doc.get("bogoliubov"):
        entry = doc["bogoliubov"]
        bog = BogoliubovLayer(
            tuple(tuple(p) for p in entry["pairs"]),
            tuple(gate_from_dict(g, space) for g in entry["gates"]),
            tuple(entry["unpaired"]),
            tuple(gate_from_dict(g, space) for g in entry["unpaired_gates"]),
        )
    return build_state(circuit, occ, bog)
