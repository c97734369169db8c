"""
자유 페르미온 오라클 (Free Fermion Oracle)
엔진과 독립적인 정답 계산: 공분산 행렬, Wick 축약, Slater 행렬식, BdG, 스핀 사슬 완전 대각화

규약:
- Ĥ = Σ A_ij ĉ†ᵢĉⱼ + ½ Σ (B_ij ĉ†ᵢĉ†ⱼ + h.c.) + const
- 운동량 모드 c̃†_k = Σₓ Φ[x,k] ĉ†ₓ,  Φ[x,k] = e^{2πi(k+o)x/n}/√n
- Jordan-Wigner: ĉᵢ = ½(X̂ᵢ + iŶᵢ)∏ⱼ<ᵢẐⱼ, 스핀 |1⟩ = 점유, Ẑ = 1 − 2n̂
"""

import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg, sparse
from scipy.sparse import linalg as sparse_linalg

from settings import SETTINGS

logger = logging.getLogger(__name__)


class OracleError(ValueError):
    """오라클 입력 오류"""


@dataclass(frozen=True, eq=False)
class QuadraticHamiltonian:
    """
    2차 페르미온 해밀토니안 (hopping A, pairing B, 상수)

    shape: 격자 모양 (n,) 또는 (nx, ny). 2D 사이트 번호는 x·ny + y.
    """
    hopping: np.ndarray
    pairing: Optional[np.ndarray] = None
    constant: float = 0.0
    shape: Tuple[int, ...] = ()

    def __post_init__(self):
        if sparse.issparse(self.hopping):
            # 큰 2D 격자: 희소 행렬 그대로 보관
            A = sparse.csr_matrix(self.hopping, dtype=np.complex128)
            B = (sparse.csr_matrix(A.shape, dtype=np.complex128) if self.pairing is None
                 else sparse.csr_matrix(self.pairing, dtype=np.complex128))
        else:
            A = np.array(self.hopping, dtype=np.complex128)
            B = np.zeros_like(A) if self.pairing is None else np.array(self.pairing, dtype=np.complex128)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise OracleError(f"hopping must be square, got shape {A.shape}")
        if B.shape != A.shape:
            raise OracleError(f"pairing shape {B.shape} != hopping shape {A.shape}")
        if max_abs(A - A.conj().T) > 1e-12:
            raise OracleError("hopping matrix is not Hermitian")
        if max_abs(B + B.T) > 1e-12:
            raise OracleError("pairing matrix is not antisymmetric")
        if not sparse.issparse(A):
            A.setflags(write=False)
            B.setflags(write=False)
        object.__setattr__(self, "hopping", A)
        object.__setattr__(self, "pairing", B)
        object.__setattr__(self, "constant", float(self.constant))
        shape = tuple(int(d) for d in self.shape) or (A.shape[0],)
        if int(np.prod(shape)) != A.shape[0]:
            raise OracleError(f"lattice shape {shape} does not hold {A.shape[0]} modes")
        object.__setattr__(self, "shape", shape)

    @property
    def num_modes(self) -> int:
        return self.hopping.shape[0]

    @property
    def has_pairing(self) -> bool:
        return max_abs(self.pairing) > 1e-14

    def dense(self) -> Tuple[np.ndarray, np.ndarray]:
        """dense (A, B). 희소 입력은 모드 수 4096 이하에서만"""
        if not sparse.issparse(self.hopping):
            return self.hopping, self.pairing
        if self.num_modes > 4096:
            raise OracleError(f"refusing to densify a {self.num_modes}-mode Hamiltonian")
        return self.hopping.toarray(), self.pairing.toarray()


def max_abs(matrix) -> float:
    """dense/희소 공통 최대 절댓값"""
    if sparse.issparse(matrix):
        return float(abs(matrix).max()) if matrix.nnz else 0.0
    return float(np.max(np.abs(matrix), initial=0.0))


@dataclass
class CorrelationSeries:
    """거리 Δ별 상관 함수 값"""
    offsets: List
    values: np.ndarray
    normalization: Dict = field(default_factory=dict)
    name: str = "g"

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if len(self.offsets) != len(self.values):
            raise OracleError(f"{len(self.offsets)} offsets but {len(self.values)} values")

    def to_frame(self) -> pd.DataFrame:
        """CSV용 표 (Δ 성분, 평균 입자 간격으로 나눈 거리, 실수/허수부)"""
        spacing = self.normalization.get("mean_spacing", 1.0)
        offsets = [o if isinstance(o, tuple) else (o,) for o in self.offsets]
        frame = pd.DataFrame({f"d{axis}": [o[axis] for o in offsets]
                              for axis in range(len(offsets[0]))} if offsets else {})
        distance = np.array([np.sqrt(sum(c * c for c in o)) for o in offsets])
        frame["distance"] = distance / spacing
        frame[f"{self.name}_re"] = self.values.real
        frame[f"{self.name}_im"] = self.values.imag
        return frame


# ==================== 운동량 공간 ====================

def momentum_basis(n: int, offset: float = 0.0) -> np.ndarray:
    """Φ[x, k] = e^{2πi(k+offset)x/n}/√n"""
    x = np.arange(n)[:, None]
    k = np.arange(n)[None, :] + offset
    return np.exp(2j * np.pi * k * x / n) / np.sqrt(n)


def lattice_basis(shape: Sequence[int], offset: float = 0.0) -> np.ndarray:
    """1D는 Φ, 2D는 Φx ⊗ Φy (운동량 와이어 kx·ny + ky). 오프셋은 1D 전용"""
    shape = tuple(shape)
    if len(shape) == 1:
        return momentum_basis(shape[0], offset)
    if offset:
        raise OracleError("momentum offset is only defined for 1D lattices")
    nx, ny = shape
    return np.kron(momentum_basis(nx), momentum_basis(ny))


def partner(k: int, n: int, offset: float = 0.0) -> int:
    """운동량 −(k+o) − o 에 해당하는 와이어"""
    return int(round(-k - 2 * offset)) % n


def lattice_partner(k: int, shape: Sequence[int], offset: float = 0.0) -> int:
    if len(shape) == 1:
        return partner(k, shape[0], offset)
    nx, ny = shape
    kx, ky = divmod(k, ny)
    return partner(kx, nx) * ny + partner(ky, ny)


def momentum_blocks(h: QuadraticHamiltonian, offset: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """(Φ†AΦ, Φ†BΦ*) : 운동량 기저의 hopping, pairing 블록"""
    phi = lattice_basis(h.shape, offset)
    A, B = h.dense()
    return phi.conj().T @ A @ phi, phi.conj().T @ B @ phi.conj()


def translation_residual(h: QuadraticHamiltonian, offset: float = 0.0) -> float:
    """운동량 기저에서 허용되지 않는 성분의 최대 크기 (병진 불변이면 ~0)"""
    A_mom, B_mom = momentum_blocks(h, offset)
    n = h.num_modes
    off_diagonal = A_mom - np.diag(np.diag(A_mom))
    allowed = np.zeros((n, n), dtype=bool)
    for k in range(n):
        allowed[k, lattice_partner(k, h.shape, offset)] = True
    residual = max(np.max(np.abs(off_diagonal), initial=0.0),
                   np.max(np.abs(B_mom[~allowed]), initial=0.0))
    return float(residual)


def dispersion(h: QuadraticHamiltonian, offset: float = 0.0) -> np.ndarray:
    """ε_k (실수). 병진 불변이 아니면 OracleError"""
    residual = translation_residual(h, offset)
    if residual > SETTINGS.tolerance:
        raise OracleError(f"Hamiltonian is not diagonal in momentum space (residual {residual:.3e})")
    return np.real(np.diag(momentum_blocks(h, offset)[0]))


def plane_wave_orbitals(n: int, momenta: Sequence[int], offset: float = 0.0,
                        shape: Optional[Sequence[int]] = None) -> np.ndarray:
    return lattice_basis(shape or (n,), offset)[:, list(momenta)]


# ==================== 공분산 / Wick ====================

def covariance_matrix(h: QuadraticHamiltonian, occ, offset: float = 0.0) -> np.ndarray:
    """
    G_ij = ⟨ĉ†ᵢĉⱼ⟩ (pairing 없는 상태)

    Args:
        h: 2차 해밀토니안 (B = 0)
        occ: 운동량 와이어별 점유 (MomentumOccupation 또는 0/1 배열)

    병진 불변이 아니면 A의 고유 오비탈로 같은 입자 수를 채운다.
    """
    if h.has_pairing:
        raise OracleError("covariance_matrix requires zero pairing; use bdg_solution")
    labels = np.asarray(getattr(occ, "occ", occ))
    if labels.shape != (h.num_modes,):
        raise OracleError(f"occupation length {labels.shape} != {h.num_modes} modes")
    occupied = np.flatnonzero(labels)
    if translation_residual(h, offset) <= SETTINGS.tolerance:
        orbitals = plane_wave_orbitals(h.num_modes, occupied, offset, h.shape)
    else:
        logger.warning("hopping is not translation invariant; using eigen-orbitals of A")
        _, vectors = linalg.eigh(h.dense()[0])
        orbitals = vectors[:, :len(occupied)]
    return orbitals.conj() @ orbitals.T


def wick_g1_g2(G: np.ndarray, nu: Optional[float] = None, site0: int = 0,
               offsets: Optional[Sequence[int]] = None) -> Tuple[CorrelationSeries, CorrelationSeries]:
    """
    g1(Δ) = G₀Δ/ν,  g2(Δ) = 1 − |G₀Δ|²/ν² (Δ ≠ 0),  g2(0) = 1/ν

    Raises:
        OracleError: ν = 0
    """
    n = G.shape[0]
    nu = float(np.real(G[site0, site0])) if nu is None else float(nu)
    offsets = list(range(n)) if offsets is None else list(offsets)
    targets = [(site0 + d) % n for d in offsets]
    return wick_from_row(G[site0, targets], [t == site0 for t in targets], nu, offsets, site0)


def wick_from_row(row: np.ndarray, at_origin: Sequence[bool], nu: float, offsets: Sequence,
                  site0: int = 0) -> Tuple[CorrelationSeries, CorrelationSeries]:
    """공분산 한 행 G[x0, x0+Δ] 에서 g1, g2 (2D 절단에도 사용)"""
    if abs(nu) < 1e-14:
        raise OracleError("density is zero; correlations are undefined")
    row = np.asarray(row, dtype=np.complex128)
    g1 = row / nu
    g2 = np.where(np.asarray(at_origin), 1.0 / nu, 1.0 - np.abs(row) ** 2 / nu ** 2)
    norm = {"density": nu, "site0": site0}
    offsets = list(offsets)
    return CorrelationSeries(offsets, g1, dict(norm), "g1"), CorrelationSeries(offsets, g2, dict(norm), "g2")


def covariance_row(shape: Sequence[int], occ, site0: int = 0, offset: float = 0.0) -> np.ndarray:
    """
    G[x0, :] 만 평면파로 계산 (큰 2D 격자용)

    G[x0, j] = Σ_k conj(φ_k(x0)) φ_k(j)
    """
    shape = tuple(shape)
    labels = np.asarray(getattr(occ, "occ", occ))
    occupied = np.flatnonzero(labels)
    if len(shape) == 1:
        n = shape[0]
        k = occupied + offset
        x = np.arange(n)
        amp0 = np.exp(2j * np.pi * k * site0 / n) / np.sqrt(n)
        waves = np.exp(2j * np.pi * np.outer(x, k) / n) / np.sqrt(n)
        return waves @ amp0.conj()
    if offset:
        raise OracleError("momentum offset is only defined for 1D lattices")
    nx, ny = shape
    kx, ky = np.divmod(occupied, ny)
    x0, y0 = divmod(site0, ny)
    amp0 = np.exp(2j * np.pi * (kx * x0 / nx + ky * y0 / ny)) / np.sqrt(nx * ny)
    xs, ys = np.divmod(np.arange(nx * ny), ny)
    phase = np.outer(xs, kx) / nx + np.outer(ys, ky) / ny
    waves = np.exp(2j * np.pi * phase) / np.sqrt(nx * ny)
    return waves @ amp0.conj()


def slater_amplitude(orbitals: np.ndarray, positions: Sequence[int]) -> complex:
    """det[orbitals[positions, :]] (중복 위치면 0)"""
    positions = list(positions)
    if len(positions) != orbitals.shape[1]:
        raise OracleError(f"{len(positions)} positions for {orbitals.shape[1]} orbitals")
    if len(set(positions)) != len(positions):
        return 0j
    if not positions:
        return 1.0 + 0j
    return complex(np.linalg.det(orbitals[positions, :]))


def slater_statevector(orbitals: np.ndarray) -> np.ndarray:
    """모든 점유 배치에 대한 Slater 진폭 (사이트 0이 최상위 비트)"""
    n, count = orbitals.shape
    vector = np.zeros(2 ** n, dtype=np.complex128)
    for positions in combinations(range(n), count):
        index = sum(1 << (n - 1 - x) for x in positions)
        vector[index] = slater_amplitude(orbitals, positions)
    return vector


# ==================== BdG ====================

@dataclass
class BdgSolution:
    """운동량 쌍별 2×2 BdG 대각화 결과"""
    offset: float
    dispersion: np.ndarray
    pairs: List[Tuple[int, int]]
    unpaired: List[int]
    gaps: Dict[Tuple[int, int], complex]
    even_vectors: Dict[Tuple[int, int], np.ndarray]
    quasiparticle_energies: np.ndarray
    ground_energy: float
    ground_labels: np.ndarray
    density: np.ndarray
    G: np.ndarray
    F: np.ndarray


def pair_block(eps_k: float, eps_q: float, gap: complex) -> np.ndarray:
    """기저 {|00⟩, |11⟩}의 짝수 블록"""
    return np.array([[0.0, np.conj(gap)], [gap, eps_k + eps_q]], dtype=np.complex128)


def bdg_solution(h: QuadraticHamiltonian, offset: float = 0.0) -> BdgSolution:
    """
    (k, −k) 쌍마다 2×2 짝수 블록을 수치 대각화

    바닥 상태는 쌍마다 네 Fock 상태 중 에너지 최소 상태(동률이면 작은 라벨).
    """
    if len(h.shape) != 1:
        raise OracleError(f"BdG pairing is implemented for 1D chains, got shape {h.shape}")
    n = h.num_modes
    residual = translation_residual(h, offset)
    if residual > SETTINGS.tolerance:
        raise OracleError(f"Hamiltonian is not translation invariant at offset {offset} "
                          f"(residual {residual:.3e})")
    A_mom, B_mom = momentum_blocks(h, offset)
    eps = np.real(np.diag(A_mom))
    pairs, unpaired = [], []
    for k in range(n):
        q = partner(k, n, offset)
        if q == k:
            unpaired.append(k)
        elif k < q:
            pairs.append((k, q))

    labels = np.zeros(n, dtype=np.int64)
    quasi = np.zeros(n)
    occupation = np.zeros(n)
    K = np.zeros((n, n), dtype=np.complex128)
    energy = h.constant
    gaps, vectors = {}, {}
    for k in unpaired:
        labels[k] = 1 if eps[k] < 0 else 0
        occupation[k] = labels[k]
        quasi[k] = abs(eps[k])
        energy += min(eps[k], 0.0)
    for k, q in pairs:
        gap = complex(B_mom[k, q])
        values, vecs = linalg.eigh(pair_block(eps[k], eps[q], gap))
        gaps[(k, q)], vectors[(k, q)] = gap, vecs
        # 라벨 순서: |00⟩, |01⟩(q 점유), |10⟩(k 점유), |11⟩
        fock_energies = [values[0], eps[q], eps[k], values[1]]
        choice = int(np.argmin(fock_energies))
        energy += fock_energies[choice]
        quasi[k] = eps[k] - values[0]
        quasi[q] = eps[q] - values[0]
        if choice == 0:
            u, v = vecs[0, 0], vecs[1, 0]
            occupation[k] = occupation[q] = abs(v) ** 2
            K[q, k] = np.conj(u) * v
            K[k, q] = -K[q, k]
        elif choice == 3:
            u, v = vecs[0, 1], vecs[1, 1]
            occupation[k] = occupation[q] = abs(v) ** 2
            K[q, k] = np.conj(u) * v
            K[k, q] = -K[q, k]
        else:
            occupation[k] = 1.0 if choice == 2 else 0.0
            occupation[q] = 1.0 if choice == 1 else 0.0
        labels[k], labels[q] = choice >> 1, choice & 1

    phi = momentum_basis(n, offset)
    G = phi.conj() @ np.diag(occupation) @ phi.T
    F = phi @ K @ phi.T
    return BdgSolution(offset, eps, pairs, unpaired, gaps, vectors, quasi, float(energy),
                       labels, np.real(np.diag(G)), G, F)


def fock_energy(h: QuadraticHamiltonian, labels: Sequence[int], offset: float = 0.0) -> float:
    """
    준입자 Fock 라벨의 에너지

    쌍 (k, q)의 라벨 |00⟩, |11⟩ 은 짝수 블록의 낮은/높은 고유상태, |01⟩, |10⟩ 은
    q 또는 k 하나만 점유한 상태다. 짝 없는 와이어는 점유하면 ε(k).

    Raises:
        OracleError: 라벨 수가 모드 수와 다르거나 0/1이 아닐 때
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (h.num_modes,) or np.any((labels != 0) & (labels != 1)):
        raise OracleError(f"need {h.num_modes} labels in {{0, 1}}, got {labels.tolist()}")
    solution = bdg_solution(h, offset)
    eps = solution.dispersion
    energy = h.constant + sum(eps[k] * labels[k] for k in solution.unpaired)
    for k, q in solution.pairs:
        low, high = linalg.eigvalsh(pair_block(eps[k], eps[q], solution.gaps[(k, q)]))
        energy += (low, eps[q], eps[k], high)[2 * labels[k] + labels[q]]
    return float(energy)


def quadratic_energy(h: QuadraticHamiltonian, G: np.ndarray, F: np.ndarray) -> float:
    """const + Σ A_ij G_ij + Re Σ B_ij conj(F_ji)"""
    A, B = h.dense()
    return float(h.constant + np.real(np.sum(A * G)) + np.real(np.sum(B * np.conj(F.T))))


# ==================== 스핀 사슬 ====================

def _pauli(n: int, site: int, op: np.ndarray) -> sparse.csr_matrix:
    """사이트 0이 최상위 비트인 n-스핀 공간의 단일 사이트 연산자"""
    left = sparse.identity(2 ** site, format="csr")
    right = sparse.identity(2 ** (n - 1 - site), format="csr")
    return sparse.kron(sparse.kron(left, sparse.csr_matrix(op)), right, format="csr")


_X = np.array([[0, 1], [1, 0]], dtype=np.complex128)
_Y = np.array([[0, -1j], [1j, 0]], dtype=np.complex128)
_Z = np.array([[1, 0], [0, -1]], dtype=np.complex128)


def tfi_spin_hamiltonian(n: int, h: float) -> sparse.csr_matrix:
    """Ĥ = Σᵢ X̂ᵢX̂ᵢ₊₁ + hẐᵢ (주기 경계)"""
    if n < 2:
        raise OracleError(f"TFI chain needs at least 2 sites, got {n}")
    H = sparse.csr_matrix((2 ** n, 2 ** n), dtype=np.complex128)
    for i in range(n):
        H = H + _pauli(n, i, _X) @ _pauli(n, (i + 1) % n, _X) + h * _pauli(n, i, _Z)
    return H


def xx_spin_hamiltonian(n: int) -> sparse.csr_matrix:
    """Ĥ = −½ Σᵢ (X̂ᵢX̂ᵢ₊₁ + ŶᵢŶᵢ₊₁) (주기 경계)"""
    if n < 2:
        raise OracleError(f"XX chain needs at least 2 sites, got {n}")
    H = sparse.csr_matrix((2 ** n, 2 ** n), dtype=np.complex128)
    for i in range(n):
        j = (i + 1) % n
        H = H - 0.5 * (_pauli(n, i, _X) @ _pauli(n, j, _X) + _pauli(n, i, _Y) @ _pauli(n, j, _Y))
    return H


def _basis_popcount(n: int) -> np.ndarray:
    states = np.arange(2 ** n)
    return np.array([bin(s).count("1") for s in states])


def _lowest(H_sector) -> Tuple[float, np.ndarray]:
    dim = H_sector.shape[0]
    if dim <= 64:
        values, vectors = linalg.eigh(H_sector.toarray())
        return float(values[0]), vectors[:, 0]
    values, vectors = sparse_linalg.eigsh(H_sector, k=1, which="SA", tol=1e-14)
    return float(values[0]), vectors[:, 0]


@dataclass
class SpinGroundState:
    energy: float
    vector: np.ndarray
    z: np.ndarray
    sector: str


def _sector_ground(H: sparse.csr_matrix, keep: np.ndarray, n: int, sector: str) -> SpinGroundState:
    index = np.flatnonzero(keep)
    energy, sub = _lowest(H[index][:, index])
    vector = np.zeros(2 ** n, dtype=np.complex128)
    vector[index] = sub
    probs = np.abs(vector) ** 2
    states = np.arange(2 ** n)
    z = np.array([np.sum(probs * (1 - 2 * ((states >> (n - 1 - i)) & 1))) for i in range(n)])
    return SpinGroundState(energy, vector, z, sector)


def dense_spin_diagonalization(n: int, h: float, sector: str = "even") -> SpinGroundState:
    """
    TFI 사슬 완전 대각화 (n ≤ 14)

    Args:
        sector: 'even' (∏Ẑ = +1), 'odd', 'all'
    """
    if n > 14:
        raise OracleError(f"dense diagonalization limited to n <= 14, got {n}")
    if sector not in ("even", "odd", "all"):
        raise OracleError(f"unknown parity sector {sector!r}")
    H = tfi_spin_hamiltonian(n, h)
    parity = _basis_popcount(n) % 2
    keep = np.ones(2 ** n, dtype=bool) if sector == "all" else parity == (0 if sector == "even" else 1)
    return _sector_ground(H, keep, n, sector)


def xx_chain_diagonalization(n: int, particles: int) -> SpinGroundState:
    """XX 사슬의 고정 자화(점유 스핀 수 = particles) 섹터 바닥 상태"""
    if n > 14:
        raise OracleError(f"dense diagonalization limited to n <= 14, got {n}")
    if not 0 <= particles <= n:
        raise OracleError(f"particle number {particles} out of range [0, {n}]")
    H = xx_spin_hamiltonian(n)
    return _sector_ground(H, _basis_popcount(n) == particles, n, f"N={particles}")


# ==================== 페르미온 Fock 공간 ====================

def fock_annihilation(n: int, site: int) -> sparse.csr_matrix:
    """JW 문자열을 포함한 ĉ_site (사이트 0이 최상위 비트)"""
    lowering = np.array([[0, 1], [0, 0]], dtype=np.complex128)
    op = sparse.identity(1, format="csr", dtype=np.complex128)
    for j in range(n):
        local = _Z if j < site else (lowering if j == site else np.eye(2))
        op = sparse.kron(op, sparse.csr_matrix(local), format="csr")
    return op


def dense_quadratic_hamiltonian(h: QuadraticHamiltonian) -> sparse.csr_matrix:
    """2ⁿ 차원 Fock 공간 행렬 (n ≤ 14)"""
    n = h.num_modes
    if n > 14:
        raise OracleError(f"dense Fock matrix limited to n <= 14, got {n}")
    A, B = h.dense()
    c = [fock_annihilation(n, i) for i in range(n)]
    H = h.constant * sparse.identity(2 ** n, format="csr", dtype=np.complex128)
    for i in range(n):
        for j in range(n):
            if A[i, j] != 0:
                H = H + A[i, j] * (c[i].conj().T @ c[j])
            if B[i, j] != 0:
                term = B[i, j] * (c[i].conj().T @ c[j].conj().T)
                H = H + 0.5 * (term + term.conj().T)
    return H


def density_density(vector: np.ndarray, i: int, j: int) -> complex:
    """⟨n̂ᵢn̂ⱼ⟩ 직접 계산 (Wick 교차 검증용)"""
    n = int(np.log2(len(vector)))
    ci, cj = fock_annihilation(n, i), fock_annihilation(n, j)
    op = (ci.conj().T @ ci) @ (cj.conj().T @ cj)
    return complex(np.vdot(vector, op @ vector))
