"""
변분 에너지 최소화 (Variational Optimizer)

스펙트럴 텐서 네트워크의 2-와이어 게이트를 하나씩 환경(environment)으로 갱신해
국소 해밀토니안 Σ h_t 의 기댓값을 낮춘다.

갱신 규칙:
- svd-polar: M = envᵀ = U S V† 일 때 G ← −V U† (패리티 블록마다), 측지선 역추적
- gradient: Y = envᵀ G, P = (Y† − Y)/2, G ← G·exp(−ηP) (역추적 η)

에너지가 1e-12 보다 많이 오르는 단계는 받아들이지 않는다.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg
from scipy.stats import unitary_group

from contraction_engine import ContractionEngine, LocalOperator, Term
from graded_tensor import (
    Gate,
    GradedTensor,
    WireSpace,
    apply_to_legs,
    gate_from_matrix,
    parity_blocks,
    parity_operator,
)
from qfft_circuit import (
    Circuit,
    GateLayer,
    GatePlacement,
    LogicalOp,
    Permutation,
    prepend_layer,
    replace_gates,
)
from spectral_state import MomentumOccupation, SpectralState, build_state, state_from_dict, state_to_dict

logger = logging.getLogger(__name__)

ACCEPT_TOLERANCE = 1e-12


class OptimizationError(ValueError):
    """변분 최적화 입력 오류"""


class UpdateRule(str, Enum):
    SVD_POLAR = "svd-polar"
    GRADIENT = "gradient"


class InitialCircuit(str, Enum):
    QFFT = "qfft"
    RANDOM = "random-unitary"
    IDENTITY = "identity"


class OptimizationConfig(BaseModel):
    """최적화 설정 (seed는 에너지 기록 메타데이터에 남는다)"""
    model_config = ConfigDict(extra="forbid")

    max_sweeps: int = Field(200, ge=0, description="최대 스윕 수 (스윕 = 모든 2-body 게이트 1회 갱신)")
    tolerance: float = Field(1e-10, gt=0, description="스윕 간 에너지 감소가 이보다 작으면 종료")
    rule: UpdateRule = Field(UpdateRule.SVD_POLAR, description="svd-polar | gradient")
    seed: int = Field(0, description="random-unitary 초기화 시드")
    initial: InitialCircuit = Field(InitialCircuit.QFFT, description="qfft | random-unitary | identity")
    step_size: float = Field(0.5, gt=0, description="gradient 규칙의 첫 시도 보폭")
    max_backtracks: int = Field(10, ge=0, description="거부 시 보폭을 반으로 줄이는 최대 횟수")
    threads: int = Field(1, ge=1, description="엔진 스레드 수")


# ==================== 게이트 보조 ====================

def _blockwise(matrix: np.ndarray, space: WireSpace, fn) -> np.ndarray:
    """패리티 블록마다 fn을 적용한 블록 대각 행렬"""
    result = np.zeros_like(matrix, dtype=np.complex128)
    for idx in parity_blocks(space, 2):
        block = np.ix_(idx, idx)
        result[block] = fn(matrix[block])
    return result


def unitarize(matrix: np.ndarray, space: WireSpace) -> np.ndarray:
    """블록별 극분해의 유니터리 인자 (누적 반올림 제거)"""
    return _blockwise(matrix, space, lambda b: linalg.polar(b)[0])


def random_parity_unitary(space: WireSpace, rng: np.random.Generator) -> np.ndarray:
    """패리티 블록마다 Haar 유니터리인 χ²×χ² 게이트"""
    dim = space.dim ** 2
    return _blockwise(np.eye(dim, dtype=np.complex128), space,
                      lambda b: unitary_group.rvs(b.shape[0], random_state=rng)
                      if b.shape[0] > 1 else np.exp(2j * np.pi * rng.random()) * np.ones((1, 1)))


def polar_update(env: np.ndarray, space: WireSpace) -> np.ndarray:
    """Re tr(envᵀ G)를 최소화하는 유니터리 G = −V U†"""
    def solve(block: np.ndarray) -> np.ndarray:
        u, _s, vh = np.linalg.svd(block)
        return -(vh.conj().T @ u.conj().T)
    return _blockwise(env.T, space, solve)


def riemannian_gradient(env: np.ndarray, gate: np.ndarray) -> np.ndarray:
    """반에르미트 생성자 P: dE/dt|_{G·exp(tA)} = 2 Re tr(envᵀ G A), 최급강하 방향은 −P"""
    y = env.T @ gate
    return 0.5 * (y.conj().T - y)


def directional_derivative(env: np.ndarray, gate: np.ndarray, generator: np.ndarray) -> float:
    """G(t) = G·exp(tA) 방향의 에너지 미분"""
    return float(2.0 * np.real(np.sum(env * (gate @ generator))))


def _unitary_power(unitary: np.ndarray, t: float, space: WireSpace) -> np.ndarray:
    return _blockwise(unitary, space, lambda b: linalg.expm(t * linalg.logm(b)))


# ==================== 항과 템플릿 점검 ====================

def check_terms(terms: Sequence[Term], space: WireSpace, num_sites: int) -> None:
    """
    Raises:
        OptimizationError: 지원 밖 항, 차원 불일치, 에르미트가 아닌 항
    """
    for op, sites in terms:
        if len(sites) != op.support:
            raise OptimizationError(f"{op.label}: {op.support}-site operator placed on sites {sites}")
        if op.dim != space.dim:
            raise OptimizationError(f"{op.label}: dimension {op.dim} != wire dimension {space.dim}")
        if any(not 0 <= x < num_sites for x in sites):
            raise OptimizationError(f"{op.label}: sites {sites} out of range [0, {num_sites})")
        matrix = op.matrix()
        if np.max(np.abs(matrix - matrix.conj().T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(matrix))):
            raise OptimizationError(f"term {op.label} on sites {sites} is not Hermitian")


def flatten_bogoliubov(state: SpectralState) -> SpectralState:
    """보골리우보프 층을 회로 맨 위 게이트 층으로 옮긴다 (같은 물리 상태)"""
    bog = state.bogoliubov
    if bog is None:
        return state
    placements = [GatePlacement(g, (k,)) for k, g in zip(bog.unpaired, bog.unpaired_gates)]
    placements += [GatePlacement(g, pair) for pair, g in zip(bog.pairs, bog.gates)]
    circuit = prepend_layer(state.circuit, GateLayer(tuple(placements)))
    return build_state(circuit, state.occupation)


def initial_state(template: SpectralState, cfg: OptimizationConfig) -> SpectralState:
    """
    초기 회로 선택

    - qfft: 템플릿 그대로
    - random-unitary: 2-body 게이트를 시드 고정 Haar 게이트로, 1-body 게이트는 항등
    - identity: 모든 게이트를 항등
    """
    state = flatten_bogoliubov(template)
    if cfg.initial == InitialCircuit.QFFT:
        return state
    space = state.wire_space
    rng = np.random.default_rng(cfg.seed)
    identity = {1: gate_from_matrix(np.eye(space.dim), space, "ID"),
                2: gate_from_matrix(np.eye(space.dim ** 2), space, "ID")}
    gates: Dict[int, Gate] = {}
    for index, op in enumerate(state.circuit.logical_ops()):
        if op.gate.arity == 2 and cfg.initial == InitialCircuit.RANDOM:
            gates[index] = gate_from_matrix(random_parity_unitary(space, rng), space, "VAR")
        else:
            gates[index] = identity[op.gate.arity]
    return build_state(replace_gates(state.circuit, gates), state.occupation)


def _check_template(template: SpectralState) -> None:
    n = template.num_sites
    if n < 2 or n & (n - 1):
        raise OptimizationError(f"template must have a power-of-two number of sites, got {n}")
    if any(d & (d - 1) for d in template.circuit.shape):
        raise OptimizationError(f"template shape {template.circuit.shape} is not a power of two")


# ==================== 게이트 갱신 ====================

@dataclass
class GateStep:
    """받아들인 게이트 갱신 하나"""
    gate_id: int
    matrix: np.ndarray
    delta: float
    scale: float


def _candidates(rule: UpdateRule, env: np.ndarray, gate: np.ndarray, space: WireSpace,
                cfg: OptimizationConfig):
    """(보폭, 후보 게이트)를 보폭이 줄어드는 순서로 낸다"""
    if rule == UpdateRule.SVD_POLAR:
        target = polar_update(env, space)
        rotation = gate.conj().T @ target
        yield 1.0, target
        for k in range(1, cfg.max_backtracks + 1):
            t = 2.0 ** -k
            yield t, gate @ _unitary_power(rotation, t, space)
        return
    generator = riemannian_gradient(env, gate)
    if np.max(np.abs(generator), initial=0.0) < 1e-14:
        return
    for k in range(cfg.max_backtracks + 1):
        eta = cfg.step_size * 2.0 ** -k
        yield eta, gate @ _blockwise(-eta * generator, space, linalg.expm)


def update_gate(engine: ContractionEngine, terms: Sequence[Term], gate_id: int,
                cfg: OptimizationConfig) -> Optional[GateStep]:
    """
    게이트 하나를 환경으로 갱신한다

    Returns:
        에너지를 1e-12 넘게 올리지 않는 첫 후보, 없으면 None
    """
    routed = engine.routed_terms(terms, gate_id)
    if not routed:
        return None
    space = engine.network.space
    gate = engine.gate_matrix(gate_id)
    env = engine.environment(routed, gate_id).data.reshape(gate.shape)
    # ⟨env, G⟩ 가 원뿔을 지나는 항들의 현재 에너지
    base = float(np.real(np.sum(env * gate)))
    for scale, candidate in _candidates(cfg.rule, env, gate, space, cfg):
        candidate = unitarize(candidate, space)
        trial = engine.trial_energy(routed, gate_id, candidate)
        if trial <= base + ACCEPT_TOLERANCE:
            return GateStep(gate_id, candidate, trial - base, scale)
    logger.debug("gate %d: no %s step lowers the energy", gate_id, cfg.rule.value)
    return None


def sweep_order(engine: ContractionEngine, sweep: int) -> List[int]:
    """홀수 스윕은 실공간 쪽(깊은 층)부터 위로, 짝수 스윕은 반대로"""
    ids = sorted(engine.two_body_gate_ids(), key=lambda g: (-engine.gate_level(g), g))
    return ids if sweep % 2 else ids[::-1]


def _unitarity_deviation(engine: ContractionEngine) -> float:
    worst = 0.0
    for gate_id in engine.two_body_gate_ids():
        g = engine.gate_matrix(gate_id)
        worst = max(worst, float(np.max(np.abs(g.conj().T @ g - np.eye(g.shape[0])))))
    return worst


def optimized_state(state: SpectralState, engine: ContractionEngine) -> SpectralState:
    """엔진 블록의 현재 게이트로 회로를 다시 만든다"""
    space = state.wire_space
    gates = {gate_id: gate_from_matrix(engine.gate_matrix(gate_id), space, "VAR")
             for gate_id in engine.two_body_gate_ids()}
    return build_state(replace_gates(state.circuit, gates), state.occupation)


# ==================== 최소화 ====================

def minimize_energy(template: SpectralState, terms: Sequence[Term],
                    cfg: Optional[OptimizationConfig] = None,
                    checkpoint: Optional[Path] = None) -> Tuple[SpectralState, pd.DataFrame]:
    """
    스윕 단위 변분 최소화

    Args:
        template: 초기 상태 (보골리우보프 층은 회로 맨 위 층으로 옮겨 함께 최적화)
        terms: 1-/2-사이트 에르미트 항 목록
        cfg: 최적화 설정
        checkpoint: 스윕마다 상태 문서를 쓸 JSON 경로

    Returns:
        (최적화 상태, 에너지 기록 DataFrame[sweep, energy, accepted, rejected, unitarity])

    Raises:
        OptimizationError: 2의 거듭제곱이 아닌 템플릿, 잘못된 항
    """
    cfg = cfg or OptimizationConfig()
    _check_template(template)
    check_terms(terms, template.wire_space, template.num_sites)

    # 1) 초기 회로
    state = initial_state(template, cfg)
    engine = ContractionEngine(state, threads=cfg.threads)
    energy = engine.energy(terms)
    rows = [{"sweep": 0, "energy": energy, "accepted": 0, "rejected": 0,
             "unitarity": _unitarity_deviation(engine)}]
    logger.info("variational start: rule=%s init=%s seed=%d E=%.12f",
                cfg.rule.value, cfg.initial.value, cfg.seed, energy)

    # 2) 스윕
    converged = False
    for sweep in range(1, cfg.max_sweeps + 1):
        start = energy
        accepted = rejected = 0
        for gate_id in sweep_order(engine, sweep):
            step = update_gate(engine, terms, gate_id, cfg)
            if step is None:
                rejected += 1
                continue
            engine.replace_gate(gate_id, step.matrix)
            energy += step.delta
            accepted += 1
        # 누적 오차를 피하려고 스윕마다 전체 에너지를 다시 잰다
        energy = engine.energy(terms)
        rows.append({"sweep": sweep, "energy": energy, "accepted": accepted,
                     "rejected": rejected, "unitarity": _unitarity_deviation(engine)})
        logger.debug("sweep %d: E=%.12f accepted=%d rejected=%d", sweep, energy, accepted, rejected)
        if checkpoint is not None:
            save_checkpoint(optimized_state(state, engine), checkpoint)
        if start - energy < cfg.tolerance:
            converged = True
            break

    # 3) 결과
    result = optimized_state(state, engine)
    trace = pd.DataFrame(rows, columns=["sweep", "energy", "accepted", "rejected", "unitarity"])
    trace.attrs.update({"rule": cfg.rule.value, "initial": cfg.initial.value, "seed": cfg.seed,
                        "converged": converged, "sweeps": int(rows[-1]["sweep"]),
                        "engine_stats": engine.stats.as_dict()})
    logger.info("variational done: E=%.12f after %d sweeps (converged=%s)",
                energy, rows[-1]["sweep"], converged)
    return result, trace


def save_checkpoint(state: SpectralState, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(state_to_dict(state), indent=1), encoding="utf-8")


def load_checkpoint(path: Path) -> SpectralState:
    return state_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ==================== 사이트 병합 ====================

def _parity_parts(matrix: np.ndarray, space: WireSpace) -> List[Tuple[int, np.ndarray]]:
    """단일 와이어 연산자를 짝수/홀수 부분으로 나눈다"""
    p = space.parities
    flips = p[:, None] != p[None, :]
    parts = []
    for parity, mask in ((0, ~flips), (1, flips)):
        part = np.where(mask, matrix, 0.0)
        if np.any(part):
            parts.append((parity, part))
    return parts


def embed_operator(matrix: np.ndarray, slot: int, factor: int, space: WireSpace) -> np.ndarray:
    """
    원래 와이어 연산자를 병합 와이어의 slot 번째 부분 와이어로 옮긴다

    병합 라벨 비트 slot·s + b 가 원래 사이트 X·f + slot 의 종 b 이다.
    앞쪽 부분 와이어에는 홀수 부분만큼 패리티 연산자가 붙는다.
    """
    chi = space.dim
    eye = np.eye(chi, dtype=np.complex128)
    total = np.zeros((chi ** factor,) * 2, dtype=np.complex128)
    for parity, part in _parity_parts(np.asarray(matrix, dtype=np.complex128), space):
        string = parity_operator(space) if parity else eye
        # np.kron의 첫 인자가 최상위 비트 = 가장 뒤쪽 부분 와이어
        factors = [eye if j > slot else part if j == slot else string for j in range(factor)]
        lifted = np.ones((1, 1), dtype=np.complex128)
        for f in reversed(factors):
            lifted = np.kron(lifted, f)
        total += lifted
    return total


@dataclass(frozen=True, eq=False)
class GrownTemplate:
    """인접 사이트 factor개를 한 와이어로 묶은 템플릿"""
    state: SpectralState
    factor: int
    base_space: WireSpace

    def locate(self, site: int) -> Tuple[int, int]:
        """원래 사이트 → (병합 와이어, 부분 와이어)"""
        return divmod(int(site), self.factor)

    def lift(self, matrix: np.ndarray, site: int) -> Tuple[LocalOperator, int]:
        wire, slot = self.locate(site)
        lifted = embed_operator(matrix, slot, self.factor, self.base_space)
        return LocalOperator.one_site(lifted, "lifted"), wire

    def terms(self, terms: Sequence[Term]) -> List[Term]:
        """
        원래 사이트의 항을 병합 와이어의 항으로 옮긴다

        같은 와이어에 떨어지는 2-사이트 항은 1-사이트 연산자 곱이 된다.
        """
        if self.factor == 1:
            return list(terms)
        merged: List[Term] = []
        for op, sites in terms:
            located = [self.locate(x) for x in sites]
            wires = [w for w, _ in located]
            if len(sites) == 1 or wires[0] == wires[1]:
                total = sum(coeff * _product([embed_operator(m, slot, self.factor, self.base_space)
                                              for m, (_w, slot) in zip(mats, located)])
                            for coeff, mats in op.factors)
                merged.append((LocalOperator.one_site(total, op.label), (wires[0],)))
                continue
            factors = tuple((coeff, tuple(embed_operator(m, slot, self.factor, self.base_space)
                                          for m, (_w, slot) in zip(mats, located)))
                            for coeff, mats in op.factors)
            merged.append((LocalOperator(2, factors, op.label), tuple(wires)))
        return merged


def _product(mats: Sequence[np.ndarray]) -> np.ndarray:
    result = mats[0]
    for m in mats[1:]:
        result = result @ m
    return result


def _register_matrix(actions: Sequence[Tuple[np.ndarray, Tuple[int, ...]]], wires: int, factor: int,
                     space: WireSpace) -> np.ndarray:
    """
    서로 다른 부분 와이어에 작용하는 원래 게이트들을 병합 와이어 wires개 위 행렬 하나로 합친다

    레지스터 위치 u·factor + j 가 u번째 병합 와이어의 부분 와이어 j 이며, 그 순서가 모드 순서다.
    """
    chi, modes = space.dim, wires * factor
    identity = np.eye(chi ** modes, dtype=np.complex128).reshape((chi,) * (2 * modes))
    operator = GradedTensor(identity, (space,) * (2 * modes))
    for matrix, positions in actions:
        k = len(positions)
        gate = GradedTensor(np.asarray(matrix).reshape((chi,) * (2 * k)), (space,) * (2 * k))
        operator = apply_to_legs(gate, operator, list(positions))
    # 부분 와이어 j가 병합 라벨의 하위 자리 (j·s 비트부터)
    per_wire = [u * factor + j for u in range(wires) for j in reversed(range(factor))]
    axes = per_wire + [modes + a for a in per_wire]
    size = chi ** modes
    return np.transpose(operator.data, axes).reshape(size, size)


def _merge_layer(ops: Sequence[LogicalOp], group: Sequence[int], slot: Sequence[int], factor: int,
                 space: WireSpace, merged_space: WireSpace) -> GateLayer:
    """한 층의 원래 게이트들을 병합 와이어 위 1/2-와이어 게이트로 묶는다"""
    partner: Dict[int, int] = {}
    for op in ops:
        a, b = (group[i] for i in op.ids) if op.gate.arity == 2 else (group[op.ids[0]],) * 2
        if a == b:
            continue
        for u, v in ((a, b), (b, a)):
            if partner.setdefault(u, v) != v:
                raise OptimizationError(f"layer {op.layer} couples merged wire {u} to more than one wire")
    targets: Dict[Tuple[int, ...], List[Tuple[np.ndarray, Tuple[int, ...]]]] = {}
    for op in ops:
        first = group[op.ids[0]]
        wires = tuple(sorted({first, partner.get(first, first)}))
        positions = tuple(wires.index(group[i]) * factor + slot[i] for i in op.ids)
        targets.setdefault(wires, []).append((op.gate.matrix, positions))
    placements = []
    for wires, actions in sorted(targets.items()):
        matrix = _register_matrix(actions, len(wires), factor, space)
        placements.append(GatePlacement(gate_from_matrix(matrix, merged_space, "MERGED"), wires))
    return GateLayer(tuple(placements))


def bond_grow(state: SpectralState, factor: int) -> GrownTemplate:
    """
    인접 사이트 factor개를 묶어 χ' = χ^factor 인 n/factor 와이어 템플릿을 만든다

    기존 회로의 게이트를 그대로 병합 와이어 위로 옮기므로 새 템플릿은 같은 물리 상태다.
    논리 id는 아래쪽 사이트 x를 따라 (x // factor, x % factor) 부분 와이어에 놓이고,
    층마다 같은 병합 와이어 쌍에 걸친 게이트들이 하나의 병합 게이트가 된다.
    보골리우보프 층은 먼저 회로 맨 위 층으로 옮긴다. 물리 관측량은 GrownTemplate.lift / terms 로 옮긴다.

    Raises:
        OptimizationError: factor가 n을 나누는 2의 거듭제곱이 아니거나, 2D 상태이거나,
            한 층이 병합 와이어 하나를 두 와이어와 잇는 회로일 때
    """
    n = state.num_sites
    if factor < 1 or factor & (factor - 1) or n % factor:
        raise OptimizationError(f"factor must be a power of two dividing {n}, got {factor}")
    space = state.wire_space
    if factor == 1:
        return GrownTemplate(state, 1, space)
    if len(state.circuit.shape) != 1:
        raise OptimizationError("site merging is only supported for 1D states")
    wires = n // factor
    if wires < 2:
        raise OptimizationError(f"merging {n} sites by {factor} leaves fewer than two wires")
    merged_space = WireSpace(space.num_species * factor)
    flat = flatten_bogoliubov(state)
    sites = flat.circuit.site_of_id()
    group = [int(x) // factor for x in sites]
    slot = [int(x) % factor for x in sites]

    by_layer: Dict[int, List[LogicalOp]] = {}
    for op in flat.circuit.logical_ops():
        by_layer.setdefault(op.layer, []).append(op)
    layers = tuple(_merge_layer(by_layer[index], group, slot, factor, space, merged_space)
                   for index in sorted(by_layer))
    circuit = Circuit(wires, merged_space, layers, Permutation(tuple(range(wires))), (wires,),
                      "custom", flat.circuit.momentum_offset)

    labels = [0] * wires
    for w, label in enumerate(flat.occupation.occ):
        labels[group[w]] |= label << (slot[w] * space.num_species)
    occ = MomentumOccupation(tuple(labels), merged_space)
    logger.info("bond grow: %d sites → %d wires, χ %d → %d, %d merged layers",
                n, wires, space.dim, merged_space.dim, len(layers))
    return GrownTemplate(build_state(circuit, occ), factor, space)
