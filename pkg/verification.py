"""
불변식 검증기 (Invariant Verifier)

회로·상태·엔진이 지켜야 할 성질을 작은 크기에서 정답과 맞춰 본다.
- 게이트 유니터리성 / 패리티 보존
- QFFT 단일 입자 행렬 = DFT (1D, 2D Kronecker)
- 변형 스케줄의 단일 입자 행렬 동일성
- dense 진폭 = Slater 행렬식
- 엔진 g1/g2 = 공분산 + Wick
- 계측된 기본 단계 수
- TFI ⟨Ẑ⟩: 엔진 = BdG = dense 스핀 대각화
"""

import logging
from dataclasses import dataclass
from datetime import datetime
from typing import Dict, List, Tuple

import numpy as np

from contraction_engine import ContractionEngine
from free_fermion_oracle import dense_spin_diagonalization, plane_wave_orbitals, slater_statevector
from graded_tensor import WireSpace, butterfly_gate, f2_gate, twiddle_gate, unitarity_deviation
from models import (
    ModelKind,
    ModelSpec,
    build_model,
    correlation_experiment,
    local_operators,
    oracle_correlations,
    tfi_magnetization,
    tfi_magnetization_oracle,
    tfi_state,
)
from qfft_circuit import build_qfft_1d, build_qfft_2d, dft_matrix, site_matrix, variant_layer_order
from spectral_state import MomentumOccupation, build_state, dense_amplitudes

logger = logging.getLogger(__name__)

LEVELS = ("fast", "full")


@dataclass
class VerificationResult:
    """검증 결과"""
    passed: bool
    flags: List[str]
    details: Dict
    level: str
    timestamp: str

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        failed = f" failed: {', '.join(self.flags)}" if self.flags else ""
        return f"verify[{self.level}] {status} ({len(self.details)} suites){failed}"


class InvariantVerifier:
    """
    불변식 검증기

    검사 항목:
    1. Gate Unitarity (게이트 유니터리성)
    2. DFT Equivalence (DFT 동치)
    3. Schedule Equivalence (변형 스케줄 동치)
    4. Dense / Slater Equivalence (dense 진폭)
    5. Engine / Oracle Equivalence (상관 함수)
    6. Cost Counters (기본 단계 수)
    7. TFI Cross-Oracle (자화)
    """

    def __init__(self,
                 level: str = "fast",
                 circuit_tolerance: float = 1e-12,
                 state_tolerance: float = 1e-10,
                 tfi_tolerance: float = 1e-8,
                 seed: int = 0):
        """
        Parameters:
            level: 'fast' 또는 'full' (full은 n=12 dense 검사와 더 큰 격자 포함)
            circuit_tolerance: 게이트·DFT 허용 오차
            state_tolerance: 상태·상관 함수 허용 오차
            tfi_tolerance: TFI ⟨Ẑ⟩ 허용 오차
            seed: 무작위 점유 시드
        """
        if level not in LEVELS:
            raise ValueError(f"unknown verification level {level!r}; expected one of {LEVELS}")
        self.level = level
        self.circuit_tolerance = circuit_tolerance
        self.state_tolerance = state_tolerance
        self.tfi_tolerance = tfi_tolerance
        self.seed = seed

    @property
    def full(self) -> bool:
        return self.level == "full"

    def verify(self) -> VerificationResult:
        """모든 검사 실행"""
        flags = []
        details = {}
        checks = [
            ("gate_unitarity", self._check_gate_unitarity),
            ("dft_equivalence", self._check_dft),
            ("schedule_equivalence", self._check_schedules),
            ("dense_oracle", self._check_dense_oracle),
            ("engine_oracle", self._check_engine_oracle),
            ("cost_counters", self._check_cost_counters),
            ("tfi_cross_oracle", self._check_tfi),
        ]
        for name, check in checks:
            failed, info = check()
            details[name] = info
            if failed:
                flags.append(name)
                logger.warning("verification suite %s failed: %s", name, info)
            else:
                logger.info("verification suite %s passed", name)

        return VerificationResult(
            passed=not flags,
            flags=flags,
            details=details,
            level=self.level,
            timestamp=datetime.now().isoformat(),
        )

    # ==================== 개별 검사 ====================

    def _check_gate_unitarity(self) -> Tuple[bool, Dict]:
        gates = []
        for s in (1, 2) if not self.full else (1, 2, 3):
            space = WireSpace(s)
            gates += [f2_gate(space), twiddle_gate(1, 8, space), butterfly_gate(3, 16, space)]
        _, state = tfi_state(8, 0.7)
        gates += list(state.bogoliubov.gates)
        worst_unitary = max(unitarity_deviation(g.tensor) for g in gates)
        worst_parity = max(g.tensor.parity_violation() for g in gates)
        failed = max(worst_unitary, worst_parity) > self.circuit_tolerance
        return failed, {"gates": len(gates), "max_unitarity_deviation": worst_unitary,
                        "max_parity_violation": worst_parity}

    def _check_dft(self) -> Tuple[bool, Dict]:
        errors = {}
        for n in (2, 4, 8, 16, 32, 64):
            errors[f"1d_{n}"] = float(np.max(np.abs(site_matrix(build_qfft_1d(n)) - dft_matrix(n))))
        for nx, ny in ((4, 4), (8, 8)) if self.full else ((4, 4),):
            expected = np.kron(dft_matrix(nx), dft_matrix(ny))
            errors[f"2d_{nx}x{ny}"] = float(np.max(np.abs(site_matrix(build_qfft_2d(nx, ny)) - expected)))
        return max(errors.values()) > self.circuit_tolerance, {"max_abs_error": errors}

    def _check_schedules(self) -> Tuple[bool, Dict]:
        errors = {}
        for n in (4, 16, 64):
            base = build_qfft_1d(n)
            reference = site_matrix(base)
            for schedule in ("dif", "perm_top"):
                variant = site_matrix(variant_layer_order(base, schedule))
                errors[f"{schedule}_{n}"] = float(np.max(np.abs(variant - reference)))
        return max(errors.values()) > self.circuit_tolerance, {"max_abs_error": errors}

    def _check_dense_oracle(self) -> Tuple[bool, Dict]:
        """무작위 운동량 점유의 dense 진폭과 Slater 행렬식의 충실도"""
        rng = np.random.default_rng(self.seed)
        sizes = (4, 8) + ((16,) if self.full else ())
        worst = 0.0
        trials = 0
        for n in sizes:
            circuit = build_qfft_1d(n)
            for _ in range(10 if self.full else 3):
                occ = tuple(int(b) for b in rng.integers(0, 2, size=n))
                state = build_state(circuit, MomentumOccupation(occ))
                momenta = [k for k, a in enumerate(occ) if a]
                expected = slater_statevector(plane_wave_orbitals(n, momenta))
                overlap = abs(np.vdot(expected, dense_amplitudes(state)))
                worst = max(worst, 1.0 - overlap)
                trials += 1
        return worst > self.state_tolerance, {"trials": trials, "max_infidelity": worst}

    def _check_engine_oracle(self) -> Tuple[bool, Dict]:
        cases = [ModelSpec(kind=ModelKind.FREE_FERMION_1D, dims=[16], particles=5),
                 ModelSpec(kind=ModelKind.FREE_FERMION_1D, dims=[16], particles=6, offset=0.5),
                 ModelSpec(kind=ModelKind.FREE_FERMION_2D, dims=[8, 8], particles=9)]
        if self.full:
            cases.append(ModelSpec(kind=ModelKind.FREE_FERMION_1D, dims=[64], particles=13))
        errors = {}
        for spec in cases:
            _, state = build_model(spec)
            engine = ContractionEngine(state)
            g1, g2 = correlation_experiment(spec, engine=engine)
            o1, o2 = oracle_correlations(spec, state)
            key = f"{spec.kind.value}_{'x'.join(map(str, spec.dims))}_N{spec.particles}"
            errors[key] = float(max(np.max(np.abs(g1.values - o1.values)),
                                    np.max(np.abs(g2.values - o2.values))))
        return max(errors.values()) > self.state_tolerance, {"max_abs_error": errors}

    def _check_cost_counters(self) -> Tuple[bool, Dict]:
        info = {}
        failed = False
        for n in (8, 32) + ((128,) if self.full else ()):
            _, state = build_model(ModelSpec(kind=ModelKind.FREE_FERMION_1D, dims=[n], particles=n // 4 + 1))
            number = local_operators(state.wire_space)["n"]
            engine = ContractionEngine(state)
            engine.expect_one_site(number, n // 3)
            one = engine.last_stats.steps
            engine = ContractionEngine(state)
            engine.expect_all_one_site(number)
            every = engine.last_stats.steps
            bound = 2 * n * int(np.log2(n))
            info[f"n={n}"] = {"one_site": one, "all_sites": every, "bound": bound}
            failed |= one != n - 1 or every > bound
        return failed, info

    def _check_tfi(self) -> Tuple[bool, Dict]:
        """엔진(2의 거듭제곱 n) vs dense, BdG(n ≤ 12) vs dense"""
        fields = (0.5, 1.0, 1.5)
        engine_sizes = (4, 8)
        oracle_sizes = (6, 8) + ((10, 12) if self.full else ())
        worst_engine = worst_oracle = 0.0
        for h in fields:
            for n in engine_sizes:
                dense = dense_spin_diagonalization(n, h, "even")
                values = [tfi_magnetization(n, h, site=x, average=False) for x in range(n)]
                worst_engine = max(worst_engine, float(np.max(np.abs(np.array(values) - dense.z))))
            for n in oracle_sizes:
                dense = dense_spin_diagonalization(n, h, "even")
                worst_oracle = max(worst_oracle, abs(tfi_magnetization_oracle(n, h) - float(np.mean(dense.z))))
        failed = max(worst_engine, worst_oracle) > self.tfi_tolerance
        return failed, {"engine_vs_dense": worst_engine, "bdg_vs_dense": worst_oracle,
                        "fields": list(fields)}


def run_verification(level: str = "fast", seed: int = 0) -> VerificationResult:
    return InvariantVerifier(level=level, seed=seed).verify()
