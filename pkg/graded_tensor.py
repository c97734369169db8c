"""
그레이디드 텐서 (Graded Tensor)
페르미온 패리티 구조를 가진 dense 텐서, 기본 게이트, 교차 부호 규칙

기본 규칙:
- 와이어 하나는 s개 페르미온 종(species)을 담고 차원 χ = 2^s
- 기저 라벨 a의 비트 b = 종 b의 점유수, 패리티 = popcount(a) mod 2
- 두 다리(leg)의 순서를 바꾸면 두 다리가 모두 홀수 패리티일 때 -1
"""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Hashable, List, Sequence, Tuple

import numpy as np

from settings import SETTINGS


class GradedTensorError(ValueError):
    """텐서/게이트 구성 오류"""


@dataclass(frozen=True)
class WireSpace:
    """와이어 하나의 Fock 공간 (s개 종, 차원 2^s)"""
    num_species: int = 1

    def __post_init__(self):
        if self.num_species < 1:
            raise GradedTensorError(f"num_species must be >= 1, got {self.num_species}")

    @property
    def dim(self) -> int:
        return 2 ** self.num_species

    @cached_property
    def parities(self) -> np.ndarray:
        """기저 라벨별 패리티 (0/1)"""
        labels = np.arange(self.dim)
        counts = np.zeros(self.dim, dtype=np.int64)
        for b in range(self.num_species):
            counts += (labels >> b) & 1
        return counts % 2

    @cached_property
    def occupations(self) -> np.ndarray:
        """기저 라벨별 총 입자 수"""
        labels = np.arange(self.dim)
        return sum(((labels >> b) & 1) for b in range(self.num_species))

    def parity(self, a: int) -> int:
        return int(bin(a).count("1") % 2)


def crossing_sign(parities: Sequence[np.ndarray], perm: Sequence[int]) -> np.ndarray:
    """
    다리 재배열에 따른 부호 텐서

    Args:
        parities: 다리별 기저 패리티 배열
        perm: 새 다리 m = 기존 다리 perm[m]

    Returns:
        기존 다리 순서 기준 shape의 ±1 배열
    """
    rank = len(parities)
    new_position = np.empty(rank, dtype=np.int64)
    new_position[list(perm)] = np.arange(rank)
    dims = tuple(len(p) for p in parities)
    exponent = np.zeros(dims, dtype=np.int64)
    for a in range(rank):
        for b in range(a + 1, rank):
            if new_position[a] > new_position[b]:
                shape_a = [1] * rank
                shape_a[a] = dims[a]
                shape_b = [1] * rank
                shape_b[b] = dims[b]
                exponent = exponent + parities[a].reshape(shape_a) * parities[b].reshape(shape_b)
    return np.where(exponent % 2 == 1, -1.0, 1.0)


@dataclass(frozen=True, eq=False)
class GradedTensor:
    """
    패리티 등급 dense 텐서

    mode_order는 다리 라벨의 좌→우 순서이며 그 순서가 곧 페르미온 모드 순서다.
    """
    data: np.ndarray
    spaces: Tuple[WireSpace, ...]
    mode_order: Tuple[Hashable, ...] = field(default=())

    def __post_init__(self):
        data = np.array(self.data, dtype=np.complex128)
        spaces = tuple(self.spaces)
        if data.ndim != len(spaces):
            raise GradedTensorError(
                f"data rank {data.ndim} does not match {len(spaces)} index spaces")
        expected = tuple(s.dim for s in spaces)
        if data.shape != expected:
            raise GradedTensorError(f"data shape {data.shape} != index dims {expected}")
        order = tuple(self.mode_order) if self.mode_order else tuple(range(len(spaces)))
        if len(order) != len(spaces) or len(set(order)) != len(order):
            raise GradedTensorError(f"mode_order {order} must label every index once")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spaces", spaces)
        object.__setattr__(self, "mode_order", order)

    @property
    def rank(self) -> int:
        return len(self.spaces)

    def index_of(self, label: Hashable) -> int:
        try:
            return self.mode_order.index(label)
        except ValueError:
            raise GradedTensorError(f"unknown index label {label!r}") from None

    def reorder(self, perm: Sequence[int]) -> "GradedTensor":
        """다리 재배열 (교차 부호 포함). 새 다리 m = 기존 다리 perm[m]"""
        perm = list(perm)
        if sorted(perm) != list(range(self.rank)):
            raise GradedTensorError(f"{perm} is not a permutation of {self.rank} indices")
        sign = crossing_sign([s.parities for s in self.spaces], perm)
        data = np.transpose(self.data * sign, perm)
        return GradedTensor(
            data,
            tuple(self.spaces[p] for p in perm),
            tuple(self.mode_order[p] for p in perm),
        )

    def relabel(self, labels: Sequence[Hashable]) -> "GradedTensor":
        return GradedTensor(self.data, self.spaces, tuple(labels))

    def conj(self) -> "GradedTensor":
        return GradedTensor(np.conj(self.data), self.spaces, self.mode_order)

    def parity_violation(self) -> float:
        """총 패리티가 홀수인 성분의 최대 절댓값 (짝수 텐서면 0)"""
        total = np.zeros(self.data.shape, dtype=np.int64)
        for axis, space in enumerate(self.spaces):
            shape = [1] * self.rank
            shape[axis] = space.dim
            total = total + space.parities.reshape(shape)
        odd = (total % 2) == 1
        return float(np.max(np.abs(self.data[odd]), initial=0.0))


def contract(a: GradedTensor, b: GradedTensor,
             pairs: Sequence[Tuple[int, int]]) -> GradedTensor:
    """
    두 그레이디드 텐서의 축약

    a의 축약 다리를 (pairs 순서대로) 맨 뒤로, b의 축약 다리를 맨 앞으로
    옮긴 뒤(교차 부호 적용) 일반 tensordot을 수행한다.
    결과 mode_order = a의 남은 다리 + b의 남은 다리.

    Args:
        pairs: (a 다리 위치, b 다리 위치) 목록

    Raises:
        GradedTensorError: 차원 불일치, 중복 다리
    """
    a_legs = [p[0] for p in pairs]
    b_legs = [p[1] for p in pairs]
    if len(set(a_legs)) != len(a_legs) or len(set(b_legs)) != len(b_legs):
        raise GradedTensorError(f"duplicate index in pairs {list(pairs)}")
    for ia, jb in pairs:
        if not (0 <= ia < a.rank and 0 <= jb < b.rank):
            raise GradedTensorError(f"pair ({ia}, {jb}) out of range")
        if a.spaces[ia] != b.spaces[jb]:
            raise GradedTensorError(
                f"dimension mismatch: {a.spaces[ia]} vs {b.spaces[jb]} in pair ({ia}, {jb})")

    a_free = [i for i in range(a.rank) if i not in a_legs]
    b_free = [j for j in range(b.rank) if j not in b_legs]
    a_sorted = a.reorder(a_free + a_legs)
    b_sorted = b.reorder(b_legs + b_free)
    m = len(pairs)
    data = np.tensordot(a_sorted.data, b_sorted.data,
                        axes=(list(range(len(a_free), a.rank)), list(range(m))))
    spaces = a_sorted.spaces[:len(a_free)] + b_sorted.spaces[m:]
    labels = a_sorted.mode_order[:len(a_free)] + b_sorted.mode_order[m:]
    if len(set(labels)) != len(labels):
        labels = tuple(range(len(labels)))
    return GradedTensor(data, spaces, labels)


def apply_to_legs(op: GradedTensor, target: GradedTensor, legs: Sequence[int]) -> GradedTensor:
    """
    연산자(출력 다리 k개 + 입력 다리 k개)를 target의 지정 다리에 작용

    결과 다리는 원래 위치로 되돌린다 (라벨 유지).
    """
    k = len(legs)
    if op.rank != 2 * k:
        raise GradedTensorError(f"operator rank {op.rank} cannot act on {k} legs")
    result = contract(op, target, [(k + j, leg) for j, leg in enumerate(legs)])
    rest = iter(range(k, result.rank))
    final = []
    out_slot = {leg: j for j, leg in enumerate(legs)}
    for position in range(target.rank):
        final.append(out_slot[position] if position in out_slot else next(rest))
    return result.reorder(final).relabel(target.mode_order)


@dataclass(frozen=True, eq=False)
class Gate:
    """
    유니터리 게이트 (1 또는 2 와이어)

    tensor 다리 순서: 출력 다리들, 입력 다리들. 두 와이어 게이트의 첫 슬롯은
    배치된 와이어 쌍의 첫 번째 와이어에 대응한다.
    """
    tensor: GradedTensor
    label: str = "custom"
    params: Tuple = ()

    def __post_init__(self):
        if self.tensor.rank not in (2, 4):
            raise GradedTensorError(f"gate tensor rank must be 2 or 4, got {self.tensor.rank}")
        arity = self.tensor.rank // 2
        outputs, inputs = self.tensor.spaces[:arity], self.tensor.spaces[arity:]
        if sorted(s.num_species for s in outputs) != sorted(s.num_species for s in inputs):
            raise GradedTensorError("gate input and output index lists differ")
        deviation = unitarity_deviation(self.tensor)
        if deviation > SETTINGS.unitary_tolerance:
            raise GradedTensorError(f"gate {self.label} is not unitary (deviation {deviation:.3e})")
        if self.tensor.parity_violation() > SETTINGS.unitary_tolerance:
            raise GradedTensorError(f"gate {self.label} does not conserve fermion parity")

    @property
    def arity(self) -> int:
        return self.tensor.rank // 2

    @property
    def space(self) -> WireSpace:
        return self.tensor.spaces[0]

    @cached_property
    def matrix(self) -> np.ndarray:
        size = int(np.prod([s.dim for s in self.tensor.spaces[:self.arity]]))
        return self.tensor.data.reshape(size, size)

    def reversed(self) -> "Gate":
        """와이어 쌍 순서를 뒤집은 같은 연산 (SWAP · G · SWAP)"""
        if self.arity != 2:
            return self
        swap = swap_gate(self.space, self.space).tensor
        left = contract(swap, self.tensor, [(2, 0), (3, 1)])
        both = contract(left, swap, [(2, 0), (3, 1)])
        return Gate(both, f"{self.label}~", self.params)


def unitarity_deviation(tensor: GradedTensor) -> float:
    """‖G†G − 1‖_max (축약으로 계산)"""
    arity = tensor.rank // 2
    dagger = dagger_tensor(tensor)
    product = contract(dagger, tensor, [(arity + j, j) for j in range(arity)])
    size = int(np.prod([s.dim for s in tensor.spaces[:arity]]))
    return float(np.max(np.abs(product.data.reshape(size, size) - np.eye(size))))


def dagger_tensor(tensor: GradedTensor) -> GradedTensor:
    arity = tensor.rank // 2
    size_out = int(np.prod([s.dim for s in tensor.spaces[:arity]]))
    size_in = int(np.prod([s.dim for s in tensor.spaces[arity:]]))
    matrix = tensor.data.reshape(size_out, size_in).conj().T
    spaces = tensor.spaces[arity:] + tensor.spaces[:arity]
    return GradedTensor(matrix.reshape([s.dim for s in spaces]), spaces)


def gate_from_matrix(matrix: np.ndarray, space: WireSpace, label: str = "custom",
                     params: Tuple = ()) -> Gate:
    matrix = np.asarray(matrix, dtype=np.complex128)
    arity = 1 if matrix.shape[0] == space.dim else 2
    spaces = (space,) * (2 * arity)
    return Gate(GradedTensor(matrix.reshape([space.dim] * (2 * arity)), spaces), label, params)


# ==================== 기본 게이트 ====================

_F2_SINGLE = np.array([
    [1, 0, 0, 0],
    [0, 2 ** -0.5, 2 ** -0.5, 0],
    [0, 2 ** -0.5, -(2 ** -0.5), 0],
    [0, 0, 0, -1],
], dtype=np.complex128)


def f2_gate(space: WireSpace = WireSpace(1)) -> Gate:
    """두 사이트 푸리에 변환 F₂ (기저 |00⟩,|01⟩,|10⟩,|11⟩)"""
    matrix = _F2_SINGLE if space.num_species == 1 else lift_species(_F2_SINGLE, space.num_species)
    return gate_from_matrix(matrix, space, "F2")


def twiddle_gate(k: int, n: int, space: WireSpace = WireSpace(1)) -> Gate:
    """
    회전 인자 게이트 ω̂ⁿᵏ = Ẑ^{2k/n}

    m개 페르미온이 있는 기저 상태에 위상 e^{2πik·m/n}.
    """
    if n <= 0:
        raise GradedTensorError(f"twiddle denominator must be positive, got {n}")
    phases = np.exp(2j * np.pi * k * space.occupations / n)
    return gate_from_matrix(np.diag(phases), space, "TWIDDLE", (int(k), int(n)))


def phase_gate(theta: float, space: WireSpace = WireSpace(1)) -> Gate:
    """m개 페르미온 상태에 e^{iθm} (운동량 오프셋 층에 사용)"""
    phases = np.exp(1j * theta * space.occupations)
    return gate_from_matrix(np.diag(phases), space, "PHASE", (float(theta),))


def butterfly_gate(k: int, m: int, space: WireSpace = WireSpace(1)) -> Gate:
    """F₂ 뒤에 첫 슬롯 와이어로 회전 인자 ω̂ᵐᵏ를 흡수한 2-와이어 게이트"""
    f2 = f2_gate(space).matrix
    twiddle = np.diag(np.exp(2j * np.pi * k * space.occupations / m))
    fused = np.kron(twiddle, np.eye(space.dim)) @ f2
    return gate_from_matrix(fused, space, "F2W", (int(k), int(m)))


def swap_gate(a: WireSpace, b: WireSpace) -> Gate:
    """|x⟩|y⟩ → (−1)^{p(x)p(y)} |y⟩|x⟩"""
    data = np.zeros((b.dim, a.dim, a.dim, b.dim), dtype=np.complex128)
    for x in range(a.dim):
        for y in range(b.dim):
            data[y, x, x, y] = -1.0 if (a.parities[x] and b.parities[y]) else 1.0
    return Gate(GradedTensor(data, (b, a, a, b)), "SWAP")


def bogoliubov_gate(matrix: np.ndarray, space: WireSpace = WireSpace(1), angle: float = None) -> Gate:
    params = () if angle is None else (float(angle),)
    return gate_from_matrix(matrix, space, "BOG", params)


def lift_species(single: np.ndarray, num_species: int) -> np.ndarray:
    """
    단일 종 2-와이어 게이트를 s개 종에 각각 적용한 χ²×χ² 행렬

    모드 순서: 와이어1의 종 0..s-1, 와이어2의 종 0..s-1.
    """
    s = num_species
    mode = WireSpace(1)
    identity = np.eye(2 ** (2 * s), dtype=np.complex128).reshape([2] * (4 * s))
    operator = GradedTensor(identity, (mode,) * (4 * s))
    single_tensor = GradedTensor(np.asarray(single).reshape(2, 2, 2, 2), (mode,) * 4)
    for b in range(s):
        operator = apply_to_legs(single_tensor, operator, [b, s + b])
    # 모드 비트 → 와이어 라벨 (라벨 비트 b = 종 b)
    per_wire = list(range(s - 1, -1, -1))
    axes = (per_wire + [s + p for p in per_wire]
            + [2 * s + p for p in per_wire] + [3 * s + p for p in per_wire])
    chi = 2 ** s
    return np.transpose(operator.data, axes).reshape(chi * chi, chi * chi)


# ==================== 국소 연산자 ====================

def annihilation(space: WireSpace, species: int = 0) -> np.ndarray:
    """와이어 위 종 b의 소멸 연산자 (와이어 내부 모드 순서 부호 포함)"""
    op = np.zeros((space.dim, space.dim), dtype=np.complex128)
    for a in range(space.dim):
        if (a >> species) & 1:
            below = bin(a & ((1 << species) - 1)).count("1")
            op[a ^ (1 << species), a] = -1.0 if below % 2 else 1.0
    return op


def creation(space: WireSpace, species: int = 0) -> np.ndarray:
    return annihilation(space, species).conj().T


def number(space: WireSpace, species: int = None) -> np.ndarray:
    """점유수 연산자 (species=None이면 와이어 총 입자 수)"""
    labels = np.arange(space.dim)
    if species is None:
        return np.diag(space.occupations.astype(np.complex128))
    return np.diag(((labels >> species) & 1).astype(np.complex128))


def parity_operator(space: WireSpace) -> np.ndarray:
    return np.diag(np.where(space.parities == 1, -1.0, 1.0).astype(np.complex128))


def operator_parity(op: np.ndarray, space: WireSpace) -> int:
    """단일 와이어 연산자의 확정 패리티 (0 짝수, 1 홀수)"""
    p = space.parities
    flips = p[:, None] != p[None, :]
    odd_weight = np.max(np.abs(op[flips]), initial=0.0)
    even_weight = np.max(np.abs(op[~flips]), initial=0.0)
    if odd_weight > 0 and even_weight > 0:
        raise GradedTensorError("operator has no definite parity")
    return 1 if odd_weight > 0 else 0


def graded_kron(a: np.ndarray, b: np.ndarray, space: WireSpace, parity_b: int) -> np.ndarray:
    """
    A_i B_j 의 2-모드 행렬 (모드 순서 i, j)

    B가 홀수면 A 뒤에 패리티 연산자가 붙는다 (문자열 연산자 불필요).
    """
    left = a @ parity_operator(space) if parity_b else a
    return np.kron(left, b)


def block_mask(space: WireSpace, arity: int = 2) -> np.ndarray:
    """패리티 보존 게이트의 허용 성분 마스크"""
    p = space.parities
    total = p if arity == 1 else (p[:, None] + p[None, :]).reshape(-1) % 2
    return total[:, None] == total[None, :]


def parity_blocks(space: WireSpace, arity: int = 2) -> List[np.ndarray]:
    p = space.parities
    total = p if arity == 1 else (p[:, None] + p[None, :]).reshape(-1) % 2
    return [np.flatnonzero(total == q) for q in (0, 1)]
