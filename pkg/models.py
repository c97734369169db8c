"""
모델과 실험 (Models)

자유 페르미온 1D/2D 호핑, XX 사슬, 횡자기장 이징(TFI) 사슬의 해밀토니안과 바닥 스펙트럴 상태,
그리고 상관 함수 / 자화율 실험.

규약:
- 호핑 모델: Ĥ = −Σ⟨ij⟩ ĉ†ᵢĉⱼ + h.c. (주기 경계, 오프셋 1/2 이면 반주기)
- TFI: Ĥ = Σ X̂ᵢX̂ᵢ₊₁ + hẐᵢ. 짝수 패리티 섹터 → 반주기 페르미온 (오프셋 1/2)
- XX: Ĥ = −½Σ(X̂X̂ + ŶŶ). 입자 수 N이 짝수면 반주기, 홀수면 주기
"""

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import sparse

from contraction_engine import ContractionEngine, EngineStats, LocalOperator, Term
from free_fermion_oracle import (
    CorrelationSeries,
    QuadraticHamiltonian,
    bdg_solution,
    covariance_row,
    wick_from_row,
)
from graded_tensor import WireSpace, annihilation, creation, number
from qfft_circuit import Circuit, apply_momentum_offset, build_qfft_1d, build_qfft_2d, variant_layer_order
from settings import SETTINGS
from spectral_state import (
    SpectralState,
    bogoliubov_from_hamiltonian,
    build_state,
    ground_state_occupation,
)

logger = logging.getLogger(__name__)


class ModelError(ValueError):
    """모델 정의 오류"""


class ModelKind(str, Enum):
    FREE_FERMION_1D = "FreeFermion1D"
    FREE_FERMION_2D = "FreeFermion2D"
    XX_CHAIN = "XXChain"
    TFI = "TFI"


def _is_power_of_two(value: int) -> bool:
    return value >= 1 and value & (value - 1) == 0


class ModelSpec(BaseModel):
    """모델 사양"""
    model_config = ConfigDict(extra="forbid")

    kind: ModelKind = Field(..., description="모델 종류")
    dims: List[int] = Field(..., description="격자 크기 [n] 또는 [nx, ny] (2의 거듭제곱)")
    particles: Optional[int] = Field(None, description="입자 수 N (자유 페르미온, XX 사슬)")
    h: Optional[float] = Field(None, description="횡자기장 세기 (TFI)")
    offset: float = Field(0.0, description="운동량 오프셋 0 또는 0.5 (1D 자유 페르미온)")
    species: int = Field(1, ge=1, le=3, description="와이어당 페르미온 종 수")
    schedule: str = Field("dit", description="회로 일정 dit | dif | perm_top")

    @field_validator("dims")
    @classmethod
    def _check_dims(cls, dims: List[int]) -> List[int]:
        if not dims or len(dims) > 2:
            raise ValueError(f"dims must have one or two entries, got {dims}")
        bad = [d for d in dims if not _is_power_of_two(d) or d < 2]
        if bad:
            raise ValueError(f"lattice sizes must be powers of two >= 2, got {bad}")
        return dims

    @field_validator("schedule")
    @classmethod
    def _check_schedule(cls, schedule: str) -> str:
        if schedule not in ("dit", "dif", "perm_top"):
            raise ValueError(f"unknown schedule {schedule!r}")
        return schedule

    @model_validator(mode="after")
    def _check_kind(self) -> "ModelSpec":
        two_d = self.kind == ModelKind.FREE_FERMION_2D
        if two_d != (len(self.dims) == 2):
            raise ValueError(f"{self.kind.value} needs {'two' if two_d else 'one'} lattice dims")
        if self.offset not in (0.0, 0.5):
            raise ValueError(f"momentum offset must be 0 or 0.5, got {self.offset}")
        if self.kind == ModelKind.TFI:
            if self.h is None:
                raise ValueError("TFI needs the field h")
        elif self.particles is None:
            raise ValueError(f"{self.kind.value} needs a particle count")
        elif not 0 <= self.particles <= self.num_sites * self.species:
            raise ValueError(f"particles {self.particles} out of range [0, {self.num_sites * self.species}]")
        if self.kind in (ModelKind.XX_CHAIN, ModelKind.TFI) and self.species != 1:
            raise ValueError(f"{self.kind.value} is a single-species chain")
        return self

    @property
    def num_sites(self) -> int:
        return int(np.prod(self.dims))


# ==================== 연산자 ====================

def local_operators(space: WireSpace = WireSpace(1), species: int = 0) -> Dict[str, LocalOperator]:
    """n̂, ĉ, ĉ†, Ẑ = 1 − 2n̂, ĉ† ± ĉ"""
    c = annihilation(space, species)
    cd = creation(space, species)
    n = number(space, species)
    eye = np.eye(space.dim)
    return {
        "n": LocalOperator.one_site(n, "n"),
        "c": LocalOperator.one_site(c, "c"),
        "cdag": LocalOperator.one_site(cd, "cdag"),
        "z": LocalOperator.one_site(eye - 2 * n, "z"),
        "majorana_plus": LocalOperator.one_site(cd + c, "cdag+c"),
        "majorana_minus": LocalOperator.one_site(cd - c, "cdag-c"),
    }


def hamiltonian_terms(h: QuadraticHamiltonian, space: WireSpace = WireSpace(1)) -> List[Term]:
    """
    2차 해밀토니안을 1-/2-사이트 국소 항으로 분해 (단일 종)

    i < j 쌍마다:
        A_ij ĉ†ᵢĉⱼ − A_ji ĉᵢĉ†ⱼ + B_ij ĉ†ᵢĉ†ⱼ − conj(B_ij) ĉᵢĉⱼ
    상수는 사이트 0의 항등 항으로 넣는다.
    """
    if space.num_species != 1:
        raise ModelError("hamiltonian_terms expects single-species wires")
    ops = local_operators(space)
    c, cd, n = ops["c"].factors[0][1][0], ops["cdag"].factors[0][1][0], ops["n"].factors[0][1][0]
    A = sparse.coo_matrix(h.hopping)
    B = sparse.coo_matrix(h.pairing)
    onsite: Dict[int, complex] = {}
    bonds: Dict[Tuple[int, int], List] = {}
    for i, j, value in zip(A.row, A.col, A.data):
        if i == j:
            onsite[i] = onsite.get(i, 0.0) + value
        elif i < j:
            bonds.setdefault((i, j), []).append((value, (cd, c)))
        else:
            bonds.setdefault((j, i), []).append((-value, (c, cd)))
    for i, j, value in zip(B.row, B.col, B.data):
        if i < j:
            bonds.setdefault((i, j), []).append((value, (cd, cd)))
            bonds.setdefault((i, j), []).append((-np.conj(value), (c, c)))

    terms: List[Term] = []
    if h.constant:
        terms.append((LocalOperator.one_site(h.constant * np.eye(space.dim), "const"), (0,)))
    for i in sorted(onsite):
        terms.append((LocalOperator.one_site(onsite[i] * n, "n"), (int(i),)))
    for (i, j) in sorted(bonds):
        terms.append((LocalOperator(2, tuple(bonds[(i, j)]), f"bond{i}-{j}"), (int(i), int(j))))
    return terms


# ==================== 해밀토니안 ====================

def _ring(n: int, boundary: float = 1.0) -> sparse.csr_matrix:
    """−Σ (ĉ†ᵢĉᵢ₊₁ + h.c.), 경계 결합에 boundary 부호"""
    rows, cols, vals = [], [], []
    for i in range(n):
        j = (i + 1) % n
        sign = boundary if j == 0 else 1.0
        rows += [i, j]
        cols += [j, i]
        vals += [-sign, -sign]
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n), dtype=np.complex128)


def hopping_chain(n: int, offset: float = 0.0, species: int = 1) -> QuadraticHamiltonian:
    """1D 최근접 호핑. offset 1/2 는 반주기 경계"""
    A = _ring(n, -1.0 if offset else 1.0).toarray()
    if species > 1:
        A = np.kron(A, np.eye(species))
    return QuadraticHamiltonian(A, shape=(n,) if species == 1 else ())


def hopping_lattice_2d(nx: int, ny: int) -> QuadraticHamiltonian:
    """2D 정사각 격자 호핑 (희소, 사이트 x·ny + y)"""
    A = sparse.kron(_ring(nx), sparse.identity(ny)) + sparse.kron(sparse.identity(nx), _ring(ny))
    return QuadraticHamiltonian(sparse.csr_matrix(A), shape=(nx, ny))


def dispersion_2d(nx: int, ny: int) -> np.ndarray:
    """ε(kx, ky) = −2cos(2πkx/nx) − 2cos(2πky/ny), 와이어 kx·ny + ky"""
    ex = -2 * np.cos(2 * np.pi * np.arange(nx) / nx)
    ey = -2 * np.cos(2 * np.pi * np.arange(ny) / ny)
    return (ex[:, None] + ey[None, :]).reshape(-1)


def xx_hamiltonian(n: int, particles: int) -> Tuple[QuadraticHamiltonian, float]:
    """XX 사슬의 N-입자 섹터 → (호핑 해밀토니안, 오프셋)"""
    offset = 0.0 if particles % 2 else 0.5
    return hopping_chain(n, offset), offset


def tfi_hamiltonian(n: int, h: float) -> QuadraticHamiltonian:
    """
    짝수 섹터 TFI: A_ii = −2h, 결합 (i, i+1)에 A = 1, B_{i,i+1} = 1, 경계 결합 부호 −1, 상수 h·n
    """
    if n < 2:
        raise ModelError(f"TFI chain needs at least 2 sites, got {n}")
    A = np.zeros((n, n), dtype=np.complex128)
    B = np.zeros((n, n), dtype=np.complex128)
    np.fill_diagonal(A, -2.0 * h)
    for i in range(n):
        j = (i + 1) % n
        sign = -1.0 if j == 0 else 1.0
        A[i, j] += sign
        A[j, i] += sign
        B[i, j] += sign
        B[j, i] -= sign
    return QuadraticHamiltonian(A, B, h * n)


# ==================== 모델 → 상태 ====================

def _circuit(spec: ModelSpec, offset: float) -> Circuit:
    if len(spec.dims) == 2:
        return build_qfft_2d(spec.dims[0], spec.dims[1], spec.species)
    circuit = build_qfft_1d(spec.dims[0], spec.species)
    if spec.schedule != "dit":
        circuit = variant_layer_order(circuit, spec.schedule)
    return apply_momentum_offset(circuit, offset) if offset else circuit


def tfi_state(n: int, h: float, circuit: Optional[Circuit] = None) -> Tuple[QuadraticHamiltonian, SpectralState]:
    """TFI 바닥 상태 (회로는 h와 무관하므로 재사용 가능)"""
    ham = tfi_hamiltonian(n, h)
    layer, occ = bogoliubov_from_hamiltonian(ham, 0.5)
    if circuit is None:
        circuit = apply_momentum_offset(build_qfft_1d(n), 0.5)
    return ham, build_state(circuit, occ, layer)


def build_model(spec: ModelSpec) -> Tuple[QuadraticHamiltonian, SpectralState]:
    """
    모델 사양 → (해밀토니안, 바닥 스펙트럴 상태)

    Raises:
        ModelError: 잘못된 크기나 매개변수
    """
    kind = spec.kind
    if kind == ModelKind.TFI:
        return tfi_state(spec.dims[0], float(spec.h), _circuit(spec, 0.5))
    if kind == ModelKind.FREE_FERMION_2D:
        nx, ny = spec.dims
        if spec.species != 1:
            raise ModelError("2D lattice supports a single species")
        ham = hopping_lattice_2d(nx, ny)
        occ = ground_state_occupation(ham, spec.particles, energies=dispersion_2d(nx, ny))
        return ham, build_state(_circuit(spec, 0.0), occ)
    if kind == ModelKind.XX_CHAIN:
        ham, offset = xx_hamiltonian(spec.dims[0], spec.particles)
    else:
        ham, offset = hopping_chain(spec.dims[0], spec.offset, spec.species), spec.offset
    occ = ground_state_occupation(ham, spec.particles, offset, spec.species)
    logger.debug("%s n=%s N=%s offset=%s degenerate=%s", kind.value, spec.dims,
                 spec.particles, offset, occ.degenerate)
    return ham, build_state(_circuit(spec, offset), occ)


def build_model_from_dict(doc: Dict) -> Tuple[QuadraticHamiltonian, SpectralState]:
    try:
        spec = ModelSpec(**doc)
    except ValueError as e:
        raise ModelError(str(e)) from e
    return build_model(spec)


# ==================== 상관 함수 실험 ====================

def correlation_offsets(spec: ModelSpec, cut: str = "axis") -> List:
    """1D: 0..n−1. 2D: 'axis' 는 (Δ, 0), 'diagonal' 은 (Δ, Δ)"""
    if len(spec.dims) == 1:
        return list(range(spec.dims[0]))
    nx, ny = spec.dims
    if cut == "axis":
        return [(d, 0) for d in range(nx)]
    if cut == "diagonal":
        return [(d, d) for d in range(min(nx, ny))]
    raise ModelError(f"unknown 2D cut {cut!r}; expected 'axis' or 'diagonal'")


def mean_spacing(spec: ModelSpec) -> float:
    """평균 입자 간격 (사이트 수 / N)^{1/d}"""
    if not spec.particles:
        return float("inf")
    return float((spec.num_sites / spec.particles) ** (1.0 / len(spec.dims)))


def _target(spec: ModelSpec, site0: int, offset) -> int:
    if len(spec.dims) == 1:
        return (site0 + offset) % spec.dims[0]
    nx, ny = spec.dims
    x0, y0 = divmod(site0, ny)
    return ((x0 + offset[0]) % nx) * ny + (y0 + offset[1]) % ny


def correlation_experiment(spec: ModelSpec, cut: str = "axis", site0: int = 0,
                           threads: Optional[int] = None,
                           engine: Optional[ContractionEngine] = None) -> Tuple[CorrelationSeries, CorrelationSeries]:
    """
    엔진으로 계산한 g1(Δ) = ⟨ĉ†₀ĉ_Δ⟩/ν, g2(Δ) = ⟨n̂₀n̂_Δ⟩/ν²

    Raises:
        ModelError: 자유 페르미온 모델이 아니거나 ν = 0
    """
    if spec.kind not in (ModelKind.FREE_FERMION_1D, ModelKind.FREE_FERMION_2D, ModelKind.XX_CHAIN):
        raise ModelError(f"correlations are defined for free-fermion models, got {spec.kind.value}")
    if spec.species != 1:
        raise ModelError("correlation experiment uses single-species wires")
    if engine is None:
        _, state = build_model(spec)
        engine = ContractionEngine(state, threads)
    ops = local_operators(engine.state.wire_space)
    nu = float(np.real(engine.expect_one_site(ops["n"], site0)))
    if abs(nu) < 1e-14:
        raise ModelError("density is zero; correlations are undefined")
    offsets = correlation_offsets(spec, cut)
    g1 = engine.expect_all_two_site(ops["cdag"], ops["c"], site0, offsets, "g1")
    nn = engine.expect_all_two_site(ops["n"], ops["n"], site0, offsets, "g2")
    norm = {"density": nu, "site0": site0, "mean_spacing": mean_spacing(spec), "cut": cut}
    return (CorrelationSeries(offsets, g1.values / nu, dict(norm), "g1"),
            CorrelationSeries(offsets, np.real(nn.values) / nu ** 2, dict(norm), "g2"))


def oracle_correlations(spec: ModelSpec, state: SpectralState, cut: str = "axis",
                        site0: int = 0) -> Tuple[CorrelationSeries, CorrelationSeries]:
    """같은 점유의 평면파 공분산 행 + Wick 으로 만든 정답 g1, g2"""
    shape = tuple(spec.dims)
    offsets = correlation_offsets(spec, cut)
    row = covariance_row(shape, state.occupation, site0, state.momentum_offset)
    targets = [_target(spec, site0, o) for o in offsets]
    nu = float(np.real(row[site0]))
    g1, g2 = wick_from_row(row[targets], [t == site0 for t in targets], nu, offsets, site0)
    for series in (g1, g2):
        series.normalization["mean_spacing"] = mean_spacing(spec)
        series.normalization["cut"] = cut
    return g1, g2


def zz_correlation(state: SpectralState, site0: int = 0, threads: Optional[int] = None) -> CorrelationSeries:
    """⟨ẐᵢẐⱼ⟩ (XX 사슬과 밀도 상관의 Jordan-Wigner 대응 검증용)"""
    engine = ContractionEngine(state, threads)
    z = local_operators(state.wire_space)["z"]
    return engine.expect_all_two_site(z, z, site0, None, "zz")


# ==================== TFI 자화율 ====================

def tfi_magnetization_oracle(n: int, h: float) -> float:
    """BdG 정답 ⟨Ẑ⟩ = 1 − 2ν"""
    solution = bdg_solution(tfi_hamiltonian(n, h), 0.5)
    return float(1.0 - 2.0 * np.mean(solution.density))


def tfi_magnetization(n: int, h: float, circuit: Optional[Circuit] = None, site: int = 0,
                      average: bool = True, stats: Optional[EngineStats] = None) -> float:
    """
    엔진으로 계산한 ⟨Ẑ⟩ (average=True 면 사이트 평균)

    stats를 주면 이 계산의 엔진 계측을 더한다.
    """
    _, state = tfi_state(n, h, circuit)
    engine = ContractionEngine(state, threads=1)
    z = local_operators(state.wire_space)["z"]
    if average:
        value = float(np.mean(np.real(engine.expect_all_one_site(z))))
    else:
        value = float(np.real(engine.expect_one_site(z, site)))
    if stats is not None:
        stats.merge(engine.stats)
    return value


def susceptibility_sweep(n: int, h_grid: Sequence[float], dh: float = 1e-2,
                         richardson: bool = False, average: bool = True,
                         threads: Optional[int] = None) -> pd.DataFrame:
    """
    χ_m(h) = −d⟨Ẑ⟩/dh 중앙 차분 (richardson=True 면 (4D(δ/2) − D(δ))/3)

    Returns:
        DataFrame(h, z, chi). attrs에 dh, richardson, 격자 크기와 누적 엔진 계측(engine_stats)을 기록한다.

    Raises:
        ModelError: 빈 h 격자 또는 δh ≤ 0
    """
    grid = [float(h) for h in h_grid]
    if not grid:
        raise ModelError("h grid is empty")
    if dh <= 0:
        raise ModelError(f"dh must be positive, got {dh}")
    circuit = apply_momentum_offset(build_qfft_1d(n), 0.5)
    totals = EngineStats()
    lock = threading.Lock()

    def magnetization(h: float) -> float:
        local = EngineStats()
        value = tfi_magnetization(n, h, circuit, average=average, stats=local)
        with lock:
            totals.merge(local)
        return value

    def derivative(h: float, step: float) -> float:
        up = magnetization(h + step)
        down = magnetization(h - step)
        return -(up - down) / (2 * step)

    def point(h: float) -> Tuple[float, float, float]:
        z = magnetization(h)
        chi = derivative(h, dh)
        if richardson:
            chi = (4 * derivative(h, dh / 2) - chi) / 3
        logger.debug("h=%.6f ⟨Z⟩=%.12f χ=%.12f", h, z, chi)
        return h, z, chi

    workers = threads if threads is not None else SETTINGS.threads
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(point, grid))
    else:
        rows = [point(h) for h in grid]
    frame = pd.DataFrame(rows, columns=["h", "z", "chi"])
    frame.attrs.update({"n": n, "dh": dh, "richardson": richardson, "average": average,
                        "engine_stats": totals.as_dict()})
    return frame


def susceptibility_peak(frame: pd.DataFrame) -> float:
    """χ_m 최대인 h"""
    return float(frame["h"].iloc[int(np.argmax(frame["chi"].to_numpy()))])
