"""
축약 엔진 (Contraction Engine)

스펙트럴 상태의 국소 기댓값을 위쪽(운동량) 경계에서 아래쪽(실공간)으로 내려가며 계산한다.

핵심 아이디어:
- U U† 상쇄로 관측 사이트의 인과 원뿔(causal cone)에 든 게이트만 남는다
- 각 층에서 상태는 클러스터(함께 얽힌 와이어 묶음)들의 곱 상태다
- 유효 밀도 행렬을 (층, 와이어 집합)으로 메모이즈해 모든 사이트 계산을 재활용한다

기본 단계 (비용):
(a) 단일 + 단일 → 단일      O(χ⁵)
(b) 단일 + 단일 → 쌍(융합)  O(χ⁶)
(c) 쌍 + 쌍 → 쌍            O(χ⁸)
보골리우보프 층이 있으면 클러스터마다 쌍 두 개(와이어 ≤ 4)를 들고 내려가는 단계가 더해진다.
그 밖의 모양(같은 클러스터 안의 블록 등)은 6 와이어 이하의 일반 그레이디드 경로로 처리한다.

밀도는 다리 형태(ket 다리 r개 + bra 다리 r개) 텐서로 들고 다니며, 모든 단계는
contraction_tape의 두 피연산자 einsum 고정 나열이다. 곱셈-덧셈 수는 그 einsum 모양에서 센다.
"""

import logging
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import contraction_tape as tape
from contraction_tape import Node
from free_fermion_oracle import CorrelationSeries
from graded_tensor import (
    GradedTensor,
    GradedTensorError,
    WireSpace,
    crossing_sign,
    graded_kron,
    operator_parity,
    swap_gate,
)
from settings import SETTINGS
from spectral_state import SpectralState

logger = logging.getLogger(__name__)

_LETTERS = string.ascii_letters
GENERIC_MAX_WIRES = 6
PAIRED_MAX_WIRES = 4


class ContractionError(ValueError):
    """축약 엔진 오류"""


# ==================== 국소 연산자 ====================

@dataclass(frozen=True, eq=False)
class LocalOperator:
    """
    1- 또는 2-사이트 연산자: Σ coeff · (A ⊗ B)

    각 인자는 확정 패리티를 가진 단일 와이어 행렬이다. 2-사이트 항 A_i B_j 는
    모드 순서 (i, j)에서 graded_kron(A, B) 로 표현된다.
    """
    support: int
    factors: Tuple[Tuple[complex, Tuple[np.ndarray, ...]], ...]
    label: str = "op"
    parities: Tuple[Tuple[int, ...], ...] = field(default=(), init=False)

    def __post_init__(self):
        if self.support not in (1, 2):
            raise ContractionError(f"operator support must be 1 or 2 sites, got {self.support}")
        if not self.factors:
            raise ContractionError("operator needs at least one term")
        factors, parities = [], []
        for coeff, mats in self.factors:
            mats = tuple(np.asarray(m, dtype=np.complex128) for m in mats)
            if len(mats) != self.support:
                raise ContractionError(f"term has {len(mats)} factors for support {self.support}")
            dim = mats[0].shape[0]
            if any(m.shape != (dim, dim) for m in mats) or dim & (dim - 1):
                raise ContractionError("operator factors must be square with power-of-two dimension")
            space = WireSpace(dim.bit_length() - 1)
            try:
                parities.append(tuple(operator_parity(m, space) for m in mats))
            except GradedTensorError as e:
                raise ContractionError(f"{self.label}: {e}") from e
            factors.append((complex(coeff), mats))
        object.__setattr__(self, "factors", tuple(factors))
        object.__setattr__(self, "parities", tuple(parities))

    @classmethod
    def one_site(cls, matrix: np.ndarray, label: str = "op") -> "LocalOperator":
        return cls(1, ((1.0, (matrix,)),), label)

    @classmethod
    def two_site(cls, a: np.ndarray, b: np.ndarray, label: str = "op") -> "LocalOperator":
        return cls(2, ((1.0, (a, b)),), label)

    @property
    def dim(self) -> int:
        return self.factors[0][1][0].shape[0]

    def __add__(self, other: "LocalOperator") -> "LocalOperator":
        if other.support != self.support:
            raise ContractionError("cannot add operators with different support")
        return LocalOperator(self.support, self.factors + other.factors, f"{self.label}+{other.label}")

    def scaled(self, c: complex) -> "LocalOperator":
        return LocalOperator(self.support, tuple((c * k, m) for k, m in self.factors), self.label)

    def dagger(self) -> "LocalOperator":
        """(A_i B_j)† = (−1)^{|A||B|} A†_i B†_j (사이트 순서 유지)"""
        terms = []
        for (coeff, mats), par in zip(self.factors, self.parities):
            sign = -1.0 if (len(par) == 2 and par[0] and par[1]) else 1.0
            terms.append((sign * np.conj(coeff), tuple(m.conj().T for m in mats)))
        return LocalOperator(self.support, tuple(terms), f"{self.label}†")

    def matrix(self) -> np.ndarray:
        """짝수 총 패리티 항만 모은 행렬 (홀수 항은 고정 패리티 상태에서 0)"""
        space = WireSpace(self.dim.bit_length() - 1)
        total = np.zeros((self.dim ** self.support,) * 2, dtype=np.complex128)
        for (coeff, mats), par in zip(self.factors, self.parities):
            if sum(par) % 2:
                continue
            total += coeff * (mats[0] if self.support == 1 else graded_kron(mats[0], mats[1], space, par[1]))
        return total

    def has_odd_terms(self) -> bool:
        return any(sum(par) % 2 for par in self.parities)


OperatorLike = Union[LocalOperator, np.ndarray]


def _as_local(op: OperatorLike) -> LocalOperator:
    if isinstance(op, LocalOperator):
        if op.support != 1:
            raise ContractionError("expected a one-site operator")
        return op
    return LocalOperator.one_site(op)


def product_operator(a: OperatorLike, b: OperatorLike) -> LocalOperator:
    """두 1-사이트 연산자의 2-사이트 곱 A_i B_j"""
    a, b = _as_local(a), _as_local(b)
    terms = tuple((ca * cb, (ma[0], mb[0])) for ca, ma in a.factors for cb, mb in b.factors)
    return LocalOperator(2, terms, f"{a.label}*{b.label}")


def same_site_product(a: OperatorLike, b: OperatorLike) -> LocalOperator:
    """같은 사이트에서 A·B"""
    a, b = _as_local(a), _as_local(b)
    terms = tuple((ca * cb, (ma[0] @ mb[0],)) for ca, ma in a.factors for cb, mb in b.factors)
    return LocalOperator(1, terms, f"{a.label}{b.label}")


# ==================== 통계 ====================

STEP_KINDS = ("single", "fusion", "pair", "bogoliubov", "generic")


@dataclass
class EngineStats:
    """
    기본 단계 수와 곱셈-덧셈 수 계측

    steps는 기본 단계만 센다. product/boundary/expect/adjoint 는 madds에만 더해진다.
    """
    steps: int = 0
    madds: int = 0
    cache_hits: int = 0
    odd_operator_queries: int = 0
    kinds: Dict[str, int] = field(default_factory=dict)
    kind_madds: Dict[str, int] = field(default_factory=dict)

    def record(self, kind: str, madds: int, step: bool = True) -> None:
        if step:
            self.steps += 1
            self.kinds[kind] = self.kinds.get(kind, 0) + 1
        self.madds += madds
        self.kind_madds[kind] = self.kind_madds.get(kind, 0) + madds

    def merge(self, other: "EngineStats") -> None:
        self.steps += other.steps
        self.madds += other.madds
        self.cache_hits += other.cache_hits
        self.odd_operator_queries += other.odd_operator_queries
        for kind, count in other.kinds.items():
            self.kinds[kind] = self.kinds.get(kind, 0) + count
        for kind, count in other.kind_madds.items():
            self.kind_madds[kind] = self.kind_madds.get(kind, 0) + count

    def madds_per_step(self, kind: str) -> float:
        count = self.kinds.get(kind, 0)
        return self.kind_madds.get(kind, 0) / count if count else 0.0

    def as_dict(self) -> Dict:
        return {
            "steps": self.steps,
            "madds": self.madds,
            "cache_hits": self.cache_hits,
            "odd_operator_queries": self.odd_operator_queries,
            "kinds": dict(self.kinds),
            "kind_madds": dict(self.kind_madds),
        }


# ==================== 융합 네트워크 ====================

@dataclass
class Block:
    """한 층의 2-와이어 게이트 (뒤따르는 1-body 게이트를 post로 흡수)"""
    index: int
    level: int
    ids: Tuple[int, int]
    core: np.ndarray
    post: np.ndarray
    op_index: int
    label: str
    folded: List[int] = field(default_factory=list)

    @property
    def matrix(self) -> np.ndarray:
        return self.post @ self.core


@dataclass(frozen=True)
class ConeGate:
    """인과 원뿔에 남는 게이트"""
    level: int
    ids: Tuple[int, int]
    label: str
    op_index: int


@dataclass(frozen=True)
class EffectiveDensity:
    """(층, 와이어 집합)의 유효 밀도 (논리 id 오름차순 모드 순서, 다리 형태 노드)"""
    level: int
    ids: Tuple[int, ...]
    node: Node

    @property
    def matrix(self) -> np.ndarray:
        dim = int(round(np.sqrt(self.node.value.size)))
        return self.node.value.reshape(dim, dim)

    @property
    def depends_on_variable(self) -> bool:
        return self.node.requires_grad


def _embed(gate: np.ndarray, slot: int, chi: int) -> np.ndarray:
    eye = np.eye(chi, dtype=np.complex128)
    return np.kron(gate, eye) if slot == 0 else np.kron(eye, gate)


class FusedNetwork:
    """
    논리 id 위의 층별 2-와이어 블록 네트워크

    1-body 게이트는 같은 와이어의 직전 블록에, 직전 블록이 없으면 맨 위 상태에 흡수한다.
    층마다 클러스터 id를 해시-consing으로 매긴다: 블록 (p, q)는 두 클러스터를 합친다.
    """

    def __init__(self, state: SpectralState):
        self.state = state
        self.space = state.wire_space
        self.chi = self.space.dim
        self.n = state.num_sites
        chi, n = self.chi, self.n
        ops = state.circuit.logical_ops()
        self.ops = ops

        pre = [np.eye(chi, dtype=np.complex128) for _ in range(n)]
        last: List[Optional[Tuple[Block, int]]] = [None] * n
        depth = [0] * n
        self.levels: List[List[Block]] = [[]]
        self.blocks: List[Block] = []
        for index, op in enumerate(ops):
            if op.gate.arity == 1:
                w = op.ids[0]
                if last[w] is None:
                    pre[w] = op.gate.matrix @ pre[w]
                else:
                    blk, slot = last[w]
                    blk.post = _embed(op.gate.matrix, slot, chi) @ blk.post
                    blk.folded.append(index)
                continue
            p, q = op.ids
            level = max(depth[p], depth[q]) + 1
            while len(self.levels) <= level:
                self.levels.append([])
            blk = Block(len(self.blocks), level, (p, q), op.gate.matrix,
                        np.eye(chi * chi, dtype=np.complex128), index, op.gate.label)
            self.levels[level].append(blk)
            self.blocks.append(blk)
            depth[p] = depth[q] = level
            last[p], last[q] = (blk, 0), (blk, 1)
        self.depth = len(self.levels) - 1
        self.block_at: List[Dict[int, Block]] = [
            {w: blk for blk in blocks for w in blk.ids} for blocks in self.levels]

        swap = swap_gate(self.space, self.space).matrix
        self.swap = swap
        self.swap4 = swap.reshape((chi,) * 4)
        p = self.space.parities
        self.odd_odd = np.where(np.outer(p, p) % 2 == 1, -1.0, 1.0)
        self.odd_mask = ((p[:, None] + p[None, :]) % 2).astype(np.float64)
        self._signs: Dict[Tuple[int, ...], np.ndarray] = {}

        self._build_top(pre)
        self._build_cones()
        self.id_of_site = state.circuit.id_of_site()
        logger.debug("fused network: n=%d χ=%d depth=%d blocks=%d",
                     n, chi, self.depth, len(self.blocks))

    def _build_top(self, pre: List[np.ndarray]) -> None:
        """맨 위 클러스터(단일 와이어 또는 보골리우보프 쌍)의 순수 상태 밀도"""
        chi = self.chi
        occ = self.state.occupation.occ
        bog = self.state.bogoliubov
        self.top: Dict[Tuple[int, ...], np.ndarray] = {}

        def basis(label: int, dim: int) -> np.ndarray:
            vec = np.zeros(dim, dtype=np.complex128)
            vec[label] = 1.0
            return vec

        if bog is None:
            singles = [(k, np.eye(chi)) for k in range(self.n)]
            pairs = []
        else:
            singles = list(zip(bog.unpaired, (g.matrix for g in bog.unpaired_gates)))
            pairs = list(zip(bog.pairs, (g.matrix for g in bog.gates)))
        for k, gate in singles:
            psi = pre[k] @ gate @ basis(occ[k], chi)
            self.top[(k,)] = np.outer(psi, psi.conj())
        for (k, q), gate in pairs:
            psi = np.kron(pre[k], pre[q]) @ gate @ basis(occ[k] * chi + occ[q], chi * chi)
            rho = np.outer(psi, psi.conj())
            if k > q:
                rho = self.swap @ rho @ self.swap
            self.top[tuple(sorted((k, q)))] = rho
        self.top_nodes = {cluster: tape.constant(rho.reshape((chi,) * (2 * len(cluster))))
                          for cluster, rho in self.top.items()}

    def _build_cones(self) -> None:
        cone = np.empty(self.n, dtype=np.int64)
        for cid, cluster in enumerate(sorted(self.top)):
            cone[list(cluster)] = cid
        self.top_cluster_of = {w: cluster for cluster in self.top for w in cluster}
        merged: Dict[Tuple[int, int], int] = {}
        next_id = len(self.top)
        self.cones = [cone]
        for level in range(1, self.depth + 1):
            new = cone.copy()
            for blk in self.levels[level]:
                a, b = cone[blk.ids[0]], cone[blk.ids[1]]
                if a == b:
                    new[list(blk.ids)] = a
                    continue
                key = (min(a, b), max(a, b))
                if key not in merged:
                    merged[key] = next_id
                    next_id += 1
                new[list(blk.ids)] = merged[key]
            # 층 전후 클러스터가 통째로 합쳐져야 곱 상태 구조가 유지된다
            for old in np.unique(cone):
                if len(np.unique(new[cone == old])) != 1:
                    raise ContractionError(
                        f"clusters at level {level} do not merge as wholes; "
                        "this circuit is outside the supported network family")
            cone = new
            self.cones.append(cone)

    def reorder_sign(self, perm: Tuple[int, ...]) -> np.ndarray:
        """r-모드 밀도의 ket/bra 다리를 같은 순열로 옮길 때의 부호 (기존 다리 순서)"""
        sign = self._signs.get(perm)
        if sign is None:
            r = len(perm)
            full = list(perm) + [r + p for p in perm]
            sign = crossing_sign([self.space.parities] * (2 * r), full)
            self._signs[perm] = sign
        return sign

    def causal_cone(self, ids: Sequence[int]) -> List[ConeGate]:
        """관측 id 집합에서 위로 거슬러 올라가며 살아남는 블록"""
        current = set(int(i) for i in ids)
        survivors = []
        for level in range(self.depth, 0, -1):
            touched = {blk.index: blk for w in current
                       for blk in [self.block_at[level].get(w)] if blk is not None}
            for blk in sorted(touched.values(), key=lambda b: b.index):
                survivors.append(ConeGate(level, blk.ids, blk.label, blk.op_index))
                current.update(blk.ids)
        return survivors


# ==================== 평가 세션 ====================

Operand = Union[Node, np.ndarray]


class EvaluationSession:
    """
    한 질의 묶음 동안의 메모이즈 캐시와 계측

    overrides: 블록 index → (ket 쪽 core 행렬, bra 쪽 core 행렬). 시험 에너지에 쓴다.
    grad_block: 이 블록의 ket 쪽 core를 미분 잎(leaf)으로 둔다.
    base: 같은 블록을 위해 만든 이전 세션. 그 블록에 의존하지 않는 밀도를 빌려 쓴다.
    """

    def __init__(self, network: FusedNetwork,
                 overrides: Optional[Dict[int, Tuple[np.ndarray, np.ndarray]]] = None,
                 grad_block: Optional[int] = None,
                 base: Optional["EvaluationSession"] = None):
        self.net = network
        self.overrides = overrides or {}
        self.grad_block = grad_block
        self.base = base
        self.memo: Dict[Tuple[int, Tuple[int, ...]], EffectiveDensity] = {}
        self.stats = EngineStats()
        self.leaf: Optional[Node] = None
        self._gates: Dict[Tuple[int, bool, bool], Tuple[Operand, np.ndarray]] = {}
        self._madds = 0

    # ---- 기록 ----
    def _op(self, spec: str, *operands: Operand) -> Node:
        node, madds = tape.contract(spec, *operands)
        self._madds += madds
        return node

    def _charge(self, kind: str, start: int, step: bool = True) -> None:
        self.stats.record(kind, self._madds - start, step)

    # ---- 게이트 ----
    def _gate(self, blk: Block, out_swap: bool = False, in_swap: bool = False) -> Tuple[Operand, np.ndarray]:
        """
        (ket 게이트, 켤레 bra 게이트) 다리 형태 [출력 2, 입력 2]

        out_swap / in_swap 은 출력 / 입력 슬롯을 그레이디드 교환한 변형이다.
        """
        key = (blk.index, out_swap, in_swap)
        cached = self._gates.get(key)
        if cached is not None:
            return cached
        shape = (self.net.chi,) * 4
        post = blk.post.reshape(shape)
        if blk.index in self.overrides:
            ket_core, bra_core = self.overrides[blk.index]
            core: Operand = np.asarray(ket_core, dtype=np.complex128).reshape(shape)
        elif blk.index == self.grad_block:
            if self.leaf is None:
                self.leaf = tape.variable(blk.core.reshape(shape))
            core, bra_core = self.leaf, blk.core
        else:
            core, bra_core = blk.core.reshape(shape), blk.core
        ket, _ = tape.contract("uvxy,xyab->uvab", post, core)
        bra = np.einsum("uvxy,xyab->uvab", post, np.asarray(bra_core).reshape(shape))
        S = self.net.swap4
        if out_swap:
            ket, _ = tape.contract("uvxy,xyab->uvab", S, ket)
            bra = np.einsum("uvxy,xyab->uvab", S, bra)
        if in_swap:
            ket, _ = tape.contract("uvxy,xyab->uvab", ket, S)
            bra = np.einsum("uvxy,xyab->uvab", bra, S)
        self._gates[key] = (ket, bra.conj())
        return self._gates[key]

    # ---- 그레이디드 보조 (다리 형태) ----
    def _reorder(self, node: Node, perm: Sequence[int]) -> Node:
        """ket/bra 모드를 같은 순열로 재배열 (교차 부호 포함). 새 모드 m = 기존 모드 perm[m]"""
        perm = tuple(int(p) for p in perm)
        r = len(perm)
        if perm == tuple(range(r)):
            return node
        legs = _LETTERS[:2 * r]
        out = "".join(legs[p] for p in perm) + "".join(legs[r + p] for p in perm)
        return self._op(f"{legs},{legs}->{out}", node, self.net.reorder_sign(perm))

    def _trace(self, node: Node, r: int, t: int) -> Node:
        """마지막 t개 모드의 대각합"""
        if t == 0:
            return node
        chi, k = self.net.chi, r - t
        legs = _LETTERS[:2 * r]
        delta = np.eye(chi ** t).reshape((chi,) * (2 * t))
        return self._op(f"{legs},{legs[k:r]}{legs[r + k:]}->{legs[:k]}{legs[r:r + k]}", node, delta)

    def _trace_to(self, node: Node, order: Sequence[int], keep: Sequence[int]) -> Node:
        """keep 이외의 모드를 뒤로 옮긴 뒤 부분 대각합 (결과 모드 순서 = keep)"""
        order, keep = list(order), list(keep)
        if keep == order:
            return node
        traced = [w for w in order if w not in keep]
        moved = self._reorder(node, [order.index(w) for w in keep + traced])
        return self._trace(moved, len(order), len(traced))

    def _kron(self, a: Node, ra: int, b: Node, rb: int) -> Node:
        la, lb = _LETTERS[:2 * ra], _LETTERS[2 * ra:2 * (ra + rb)]
        return self._op(f"{la},{lb}->{la[:ra]}{lb[:rb]}{la[ra:]}{lb[rb:]}", a, b)

    def _apply(self, node: Node, r: int, i: int, ket: Operand, bra: np.ndarray) -> Node:
        """인접 모드 (i, i+1)에 블록을 ket 쪽, 켤레 bra 쪽 순서로 작용"""
        legs = _LETTERS[:2 * r]
        u, v = _LETTERS[2 * r], _LETTERS[2 * r + 1]
        for offset, gate in ((0, ket), (r, bra)):
            x, y = legs[offset + i], legs[offset + i + 1]
            out = legs.replace(x, u).replace(y, v)
            node = self._op(f"{legs},{u}{v}{x}{y}->{out}", node, gate)
        return node

    # ---- 밀도 재귀 ----
    def density(self, level: int, ids: Tuple[int, ...]) -> np.ndarray:
        return self.effective_density(level, ids).matrix

    def node(self, level: int, ids: Tuple[int, ...]) -> Node:
        return self.effective_density(level, ids).node

    def effective_density(self, level: int, ids: Tuple[int, ...]) -> EffectiveDensity:
        ids = tuple(sorted(int(i) for i in ids))
        key = (level, ids)
        cached = self.memo.get(key)
        if cached is None and self.base is not None:
            shared = self.base.memo.get(key)
            if shared is not None and not shared.depends_on_variable:
                cached = self.memo[key] = shared
        if cached is not None:
            self.stats.cache_hits += 1
            return cached
        cone = self.net.cones[level]
        groups: Dict[int, List[int]] = {}
        for w in ids:
            groups.setdefault(int(cone[w]), []).append(w)
        if len(groups) > 1:
            node = self._product(level, list(groups.values()), ids)
        elif level == 0:
            cluster = self.net.top_cluster_of[ids[0]]
            start = self._madds
            node = self._trace_to(self.net.top_nodes[cluster], cluster, ids)
            self._charge("boundary", start, step=False)
        else:
            blocks = sorted({self.net.block_at[level][w].index: self.net.block_at[level][w]
                             for w in ids if w in self.net.block_at[level]}.values(),
                            key=lambda b: b.index)
            if not blocks:
                node = self.node(level - 1, ids)
            else:
                node = self._step(level, ids, blocks)
        result = EffectiveDensity(level, ids, node)
        self.memo[key] = result
        return result

    def _product(self, level: int, groups: List[List[int]], ids: Tuple[int, ...]) -> Node:
        """서로 다른 클러스터의 짝수 밀도들의 곱"""
        groups = sorted(groups, key=lambda g: g[0])
        parts = [self.node(level, tuple(g)) for g in groups]
        start = self._madds
        node, order = parts[0], list(groups[0])
        for g, part in zip(groups[1:], parts[1:]):
            node = self._kron(node, len(order), part, len(g))
            order.extend(g)
        node = self._reorder(node, [order.index(w) for w in ids])
        self._charge("product", start, step=False)
        return node

    def _step(self, level: int, ids: Tuple[int, ...], blocks: List[Block]) -> Node:
        cone = self.net.cones[level - 1]
        straddle = all(cone[b.ids[0]] != cone[b.ids[1]] for b in blocks)
        if len(ids) == 1 and len(blocks) == 1 and straddle:
            return self._single_step(level, ids[0], blocks[0])
        if len(ids) == 2 and len(blocks) == 1 and set(blocks[0].ids) == set(ids) and straddle:
            return self._fusion_step(level, blocks[0])
        if len(ids) == 2 and len(blocks) == 2:
            result = self._pair_step(level, ids, blocks)
            if result is not None:
                return result
        sides = self._paired_sides(level, ids, blocks) if straddle else None
        if sides is not None:
            return self._bogoliubov_step(level, ids, blocks, sides)
        return self._generic_step(level, ids, blocks)

    # (a) 단일 + 단일 → 단일, O(χ⁵)
    def _single_step(self, level: int, w: int, blk: Block) -> Node:
        p, q = blk.ids
        rho_p = self.node(level - 1, (p,))
        rho_q = self.node(level - 1, (q,))
        K, Kb = self._gate(blk, out_swap=(w == q))
        start = self._madds
        T1 = self._op("utab,ac->utbc", K, rho_p)
        T2 = self._op("utbc,bd->utcd", T1, rho_q)
        out = self._op("utcd,wtcd->uw", T2, Kb)
        self._charge("single", start)
        return out

    # (b) 두 가지의 융합: 단일 + 단일 → 쌍, O(χ⁶)
    def _fusion_step(self, level: int, blk: Block) -> Node:
        p, q = blk.ids
        rho_p = self.node(level - 1, (p,))
        rho_q = self.node(level - 1, (q,))
        K, Kb = self._gate(blk, out_swap=p > q)
        start = self._madds
        T1 = self._op("uvab,ac->uvbc", K, rho_p)
        T2 = self._op("uvbc,bd->uvcd", T1, rho_q)
        out = self._op("uvcd,wxcd->uvwx", T2, Kb)
        self._charge("fusion", start)
        return out

    # (c) 쌍 + 쌍 → 쌍, O(χ⁸)
    def _pair_step(self, level: int, ids: Tuple[int, ...], blocks: List[Block]) -> Optional[Node]:
        """
        블록 1은 ids[0], 블록 2는 ids[1]을 출력한다. 입력은 두 클러스터 C1, C2에
        하나씩 걸쳐야 한다 (아니면 None → 다른 경로).

        모드 순서 (α1, α2, β1, β2) 에서
        1) α2 ↔ β1 교차 부호 s(e,b)·s(f,d)
        2) U1 on (α1, β1), U2 on (α2, β2)
        3) 버리는 출력 t1 ↔ 남는 출력 v 교차 부호 (−1)^{p(t)(p(v)+p(v'))}
        """
        net = self.net
        cone = net.cones[level - 1]
        w1, w2 = ids
        b1, b2 = net.block_at[level][w1], net.block_at[level][w2]
        alpha1, beta1 = b1.ids
        c1, c2 = cone[alpha1], cone[beta1]
        if c1 == c2:
            return None
        if cone[b2.ids[0]] == c1 and cone[b2.ids[1]] == c2:
            alpha2, beta2 = b2.ids
            reverse2 = False
        elif cone[b2.ids[1]] == c1 and cone[b2.ids[0]] == c2:
            beta2, alpha2 = b2.ids
            reverse2 = True
        else:
            return None

        A = self.node(level - 1, tuple(sorted((alpha1, alpha2))))
        B = self.node(level - 1, tuple(sorted((beta1, beta2))))
        U1, U1b = self._gate(b1, out_swap=(w1 == beta1))
        U2, U2b = self._gate(b2, out_swap=reverse2 != (w2 == beta2), in_swap=reverse2)

        start = self._madds
        if alpha1 > alpha2:
            A = self._reorder(A, (1, 0))
        if beta1 > beta2:
            B = self._reorder(B, (1, 0))
        p = net.space.parities
        cross = np.einsum("be,df->bdef", net.odd_odd, net.odd_odd)
        E2 = self._op("vrij,xrkl->vxijkl", U2, U2b)
        results = []
        for q in (0, 1):
            t_sign = np.where(p * q % 2 == 1, -1.0, 1.0)
            bra = self._op("wtcd,t->wtcd", U1b, t_sign)
            E1 = self._op("utab,wtcd->uwabcd", U1, bra)
            X = self._op("uwabcd,aecf->uwbdef", E1, A)
            X = self._op("uwbdef,bdef->uwbdef", X, cross)
            Y = self._op("uwbdef,bgdh->uwefgh", X, B)
            R = self._op("uwefgh,vxegfh->uvwx", Y, E2)
            mask = net.odd_mask if q else 1.0 - net.odd_mask
            results.append(self._op("uvwx,vx->uvwx", R, mask))
        out = tape.add(*results)
        self._madds += out.value.size
        self._charge("pair", start)
        return out

    def _paired_sides(self, level: int, ids: Tuple[int, ...],
                      blocks: List[Block]) -> Optional[Tuple[List[int], List[int]]]:
        """입력이 두 클러스터에 ≤ 4 와이어씩 나뉘면 (A, B) 와이어 목록"""
        cone = self.net.cones[level - 1]
        inputs = sorted({w for blk in blocks for w in blk.ids} | set(ids))
        clusters = sorted({int(cone[w]) for w in inputs},
                          key=lambda c: min(w for w in inputs if cone[w] == c))
        if len(clusters) != 2:
            return None
        a = [w for w in inputs if cone[w] == clusters[0]]
        b = [w for w in inputs if cone[w] == clusters[1]]
        if len(a) > PAIRED_MAX_WIRES or len(b) > PAIRED_MAX_WIRES:
            return None
        return a, b

    def _bogoliubov_step(self, level: int, ids: Tuple[int, ...], blocks: List[Block],
                         sides: Tuple[List[int], List[int]]) -> Node:
        """
        쌍 클러스터 단계: 클러스터마다 ≤ 4 와이어(보골리우보프 쌍 두 개)의 밀도를 곱해
        블록을 하나씩 작용시키고, 그 블록의 버리는 출력을 바로 대각합한다.
        """
        a, b = sides
        rho_a = self.node(level - 1, tuple(a))
        rho_b = self.node(level - 1, tuple(b))
        gates = [self._gate(blk) for blk in blocks]
        start = self._madds
        joint = self._kron(rho_a, len(a), rho_b, len(b))
        out = self._apply_blocks(joint, a + b, blocks, gates, ids)
        self._charge("bogoliubov", start)
        return out

    def _generic_step(self, level: int, ids: Tuple[int, ...], blocks: List[Block]) -> Node:
        """일반 경로: 입력 밀도에 블록들을 그레이디드 작용시키고 나머지 모드를 대각합"""
        inputs = sorted({w for blk in blocks for w in blk.ids} | set(ids))
        if len(inputs) > GENERIC_MAX_WIRES:
            raise ContractionError(f"generic step on {len(inputs)} wires is too large")
        rho = self.node(level - 1, tuple(inputs))
        gates = [self._gate(blk) for blk in blocks]
        start = self._madds
        out = self._apply_blocks(rho, inputs, blocks, gates, ids)
        self._charge("generic", start)
        return out

    def _apply_blocks(self, node: Node, order: List[int], blocks: List[Block],
                      gates: List[Tuple[Operand, np.ndarray]], keep: Sequence[int]) -> Node:
        """블록 슬롯 순서로 모드를 모은 뒤 블록마다 작용 → 버리는 출력 대각합"""
        wired = [w for blk in blocks for w in blk.ids]
        target = wired + [w for w in order if w not in wired]
        node = self._reorder(node, [order.index(w) for w in target])
        order = target
        for blk, (ket, bra) in zip(blocks, gates):
            node = self._apply(node, len(order), order.index(blk.ids[0]), ket, bra)
            for w in blk.ids:
                if w not in keep:
                    rest = [x for x in order if x != w]
                    node = self._trace_to(node, order, rest)
                    order = rest
        return self._trace_to(node, order, sorted(keep))

    # ---- 사이트 질의 ----
    def site_node(self, ids: Sequence[int]) -> Node:
        """주어진 id 순서를 모드 순서로 하는 맨 아래 밀도"""
        order = sorted(int(i) for i in ids)
        node = self.node(self.net.depth, tuple(order))
        start = self._madds
        node = self._reorder(node, [order.index(int(i)) for i in ids])
        self._charge("boundary", start, step=False)
        return node

    def expectation(self, ids: Sequence[int], matrix: np.ndarray) -> Node:
        """Tr(ρ M) 노드"""
        rho = self.site_node(ids)
        r = len(ids)
        legs = _LETTERS[:2 * r]
        start = self._madds
        value = self._op(f"{legs},{legs[r:]}{legs[:r]}->", rho,
                         np.asarray(matrix).reshape((self.net.chi,) * (2 * r)))
        self._charge("expect", start, step=False)
        return value


# ==================== 엔진 ====================

Term = Tuple[LocalOperator, Tuple[int, ...]]


class ContractionEngine:
    """
    스펙트럴 상태 하나에 대한 기댓값 질의

    stats는 누적 계측, last_stats는 마지막 질의의 계측이다.

    Example:
        >>> engine = ContractionEngine(state)
        >>> engine.expect_one_site(number(WireSpace(1)), site=3)
    """

    def __init__(self, state: SpectralState, threads: Optional[int] = None):
        self.state = state
        self.network = FusedNetwork(state)
        self.threads = threads if threads is not None else SETTINGS.threads
        self.stats = EngineStats()
        self.last_stats = EngineStats()
        self._shared: Optional[Tuple[int, EvaluationSession]] = None

    @property
    def num_sites(self) -> int:
        return self.network.n

    def session(self, overrides: Optional[Dict[int, Tuple[np.ndarray, np.ndarray]]] = None,
                grad_block: Optional[int] = None,
                base: Optional[EvaluationSession] = None) -> EvaluationSession:
        return EvaluationSession(self.network, overrides, grad_block, base)

    def _finish(self, *sessions: EvaluationSession) -> None:
        last = EngineStats()
        for s in sessions:
            last.merge(s.stats)
        self.last_stats = last
        self.stats.merge(last)

    def _check_site(self, site: int) -> int:
        if not 0 <= int(site) < self.num_sites:
            raise ContractionError(f"site {site} out of range [0, {self.num_sites})")
        return int(site)

    def _check_dim(self, op: LocalOperator) -> None:
        if op.dim != self.network.chi:
            raise ContractionError(f"operator dimension {op.dim} != wire dimension {self.network.chi}")

    def _ids(self, sites: Sequence[int]) -> List[int]:
        sites = [self._check_site(x) for x in sites]
        if len(set(sites)) != len(sites):
            raise ContractionError(f"coincident sites {sites}")
        return [int(self.network.id_of_site[x]) for x in sites]

    # ---- 원뿔과 밀도 ----
    def causal_cone(self, sites: Sequence[int]) -> List[ConeGate]:
        ids = [int(self.network.id_of_site[self._check_site(x)]) for x in sites]
        return self.network.causal_cone(ids)

    def reduced_density(self, sites: Sequence[int]) -> np.ndarray:
        """1 또는 2 사이트의 축약 밀도 행렬 (에르미트, 양의 준정부호, 대각합 1)"""
        if len(sites) not in (1, 2):
            raise ContractionError("reduced_density supports one or two sites")
        session = self.session()
        rho = session.site_node(self._ids(sites)).value
        self._finish(session)
        dim = self.network.chi ** len(sites)
        return rho.reshape(dim, dim)

    # ---- 항 평가 ----
    def _term_node(self, session: EvaluationSession, op: LocalOperator, sites: Sequence[int]) -> Node:
        self._check_dim(op)
        if op.has_odd_terms():
            session.stats.odd_operator_queries += 1
            logger.info("odd terms of %s at sites %s have zero expectation", op.label, list(sites))
        return session.expectation(self._ids(sites), op.matrix())

    def _one_site(self, session: EvaluationSession, op: LocalOperator, site: int) -> complex:
        return complex(self._term_node(session, op, [site]).value)

    def _two_site(self, session: EvaluationSession, op: LocalOperator, sites: Tuple[int, int]) -> complex:
        if op.support != 2:
            raise ContractionError("expected a two-site operator")
        return complex(self._term_node(session, op, sites).value)

    # ---- 1-사이트 ----
    def expect_one_site(self, op: OperatorLike, site: int) -> complex:
        """⟨O_x⟩. 홀수 연산자는 정확히 0 (stats.odd_operator_queries 로 표시)"""
        session = self.session()
        value = self._one_site(session, _as_local(op), site)
        self._finish(session)
        return value

    def expect_one_site_bogoliubov(self, op: OperatorLike, site: int) -> complex:
        """보골리우보프 층이 있는 상태의 ⟨O_x⟩ (맨 위 클러스터가 (k, −k) 쌍)"""
        if self.state.bogoliubov is None:
            raise ContractionError("state has no Bogoliubov layer")
        return self.expect_one_site(op, site)

    def expect_all_one_site(self, op: OperatorLike) -> np.ndarray:
        """모든 사이트의 ⟨O_x⟩ (공유 캐시, 스레드마다 분할 캐시)"""
        op = _as_local(op)
        chunks = _chunks(list(range(self.num_sites)), self.threads)

        def run(sites):
            session = self.session()
            return session, [self._one_site(session, op, x) for x in sites]

        outputs = self._map(run, chunks)
        self._finish(*(s for s, _ in outputs))
        return np.array([v for _, values in outputs for v in values])

    # ---- 2-사이트 ----
    def expect_two_site(self, op_a: OperatorLike, site_a: int, op_b: OperatorLike, site_b: int) -> complex:
        """
        ⟨A_i B_j⟩ (i ≠ j). 홀수⊗홀수는 모드 순서 (i, j)의 패리티 꼬임으로 처리한다.

        Raises:
            ContractionError: i == j
        """
        session = self.session()
        value = self._two_site(session, product_operator(op_a, op_b), (site_a, site_b))
        self._finish(session)
        return value

    def _target_site(self, site0: int, offset) -> int:
        shape = self.state.circuit.shape
        if len(shape) == 1:
            return (site0 + int(offset)) % shape[0]
        nx, ny = shape
        x0, y0 = divmod(site0, ny)
        dx, dy = offset
        return ((x0 + dx) % nx) * ny + (y0 + dy) % ny

    def expect_all_two_site(self, op_a: OperatorLike, op_b: OperatorLike, site0: int = 0,
                            offsets: Optional[Sequence] = None, name: str = "g") -> CorrelationSeries:
        """
        Δ별 ⟨A_{x0} B_{x0+Δ}⟩. Δ = 0 은 같은 사이트 곱 A·B 로 계산한다.

        offsets 기본값: 1D는 0..n−1, 2D는 x축 절단 (Δ, 0).
        """
        shape = self.state.circuit.shape
        if offsets is None:
            offsets = list(range(shape[0])) if len(shape) == 1 else [(d, 0) for d in range(shape[0])]
        offsets = list(offsets)
        pair = product_operator(op_a, op_b)
        same = same_site_product(op_a, op_b)
        site0 = self._check_site(site0)

        def run(chunk):
            session = self.session()
            values = []
            for offset in chunk:
                target = self._target_site(site0, offset)
                if target == site0:
                    values.append(self._one_site(session, same, site0))
                else:
                    values.append(self._two_site(session, pair, (site0, target)))
            return session, values

        outputs = self._map(run, _chunks(offsets, self.threads))
        self._finish(*(s for s, _ in outputs))
        values = np.array([v for _, vals in outputs for v in vals])
        return CorrelationSeries(offsets, values, {"site0": site0}, name)

    # ---- 에너지와 환경 ----
    def energy(self, terms: Sequence[Term]) -> float:
        """Σ ⟨h_t⟩ (한 세션에서 캐시 공유)"""
        session = self.session()
        total = self._energy(session, terms)
        self._finish(session)
        return total

    def _energy(self, session: EvaluationSession, terms: Sequence[Term]) -> float:
        total = sum(complex(self._term_node(session, op, sites).value) for op, sites in terms)
        if abs(np.imag(total)) > 1e-8 * max(1.0, abs(total)):
            logger.warning("energy has imaginary part %.3e", np.imag(total))
        return float(np.real(total))

    def _block_for(self, gate_id: int) -> Block:
        for blk in self.network.blocks:
            if blk.op_index == gate_id:
                return blk
        raise ContractionError(f"gate {gate_id} is not a two-wire gate of this circuit")

    def routed_terms(self, terms: Sequence[Term], gate_id: int) -> List[Term]:
        """인과 원뿔이 게이트를 지나는 항"""
        blk = self._block_for(gate_id)
        return [(op, sites) for op, sites in terms
                if any(g.op_index == blk.op_index for g in self.causal_cone(sites))]

    def environment(self, terms: Sequence[Term], gate_id: int) -> GradedTensor:
        """
        게이트 core 성분에 대한 Σ⟨h_t⟩의 미분 (bra 쪽 고정)

        ket 쪽 core를 미분 잎으로 둔 세션에서 에너지를 한 번 계산하고 기록을 거꾸로 따라간다.
        에너지는 ket core에 선형이므로 ⟨env, G⟩ 는 원뿔이 게이트를 지나는 항들의 에너지와 같다.
        세션은 남겨 두어 같은 게이트의 trial_energy가 게이트와 무관한 밀도를 다시 쓴다.
        """
        blk = self._block_for(gate_id)
        chi, space = self.network.chi, self.network.space
        session = self.session(grad_block=blk.index)
        nodes = [self._term_node(session, op, sites) for op, sites in terms]
        grad = np.zeros((chi,) * 4, dtype=np.complex128)
        if nodes and session.leaf is not None:
            (grad,), madds = tape.gradient(tape.add(*nodes), [session.leaf])
            session.stats.record("adjoint", madds, step=False)
        self._shared = (blk.index, session)
        self._finish(session)
        return GradedTensor(grad, (space,) * 4)

    def two_body_gate_ids(self) -> List[int]:
        return [blk.op_index for blk in self.network.blocks]

    def gate_level(self, gate_id: int) -> int:
        return self._block_for(gate_id).level

    def gate_matrix(self, gate_id: int) -> np.ndarray:
        """현재 블록 core 행렬 (흡수된 1-body 게이트 제외)"""
        return self._block_for(gate_id).core

    def trial_energy(self, terms: Sequence[Term], gate_id: int, matrix: np.ndarray) -> float:
        """게이트 하나를 ket/bra 모두 matrix로 바꾼 에너지 (네트워크는 그대로)"""
        blk = self._block_for(gate_id)
        base = self._shared[1] if self._shared and self._shared[0] == blk.index else None
        session = self.session({blk.index: (matrix, matrix)}, base=base)
        total = self._energy(session, terms)
        self._finish(session)
        return total

    def replace_gate(self, gate_id: int, matrix: np.ndarray) -> None:
        """블록 core를 교체한다. 원뿔과 맨 위 상태는 게이트 값에 의존하지 않는다."""
        blk = self._block_for(gate_id)
        if matrix.shape != blk.core.shape:
            raise ContractionError(f"gate {gate_id} expects shape {blk.core.shape}, got {matrix.shape}")
        blk.core = np.asarray(matrix, dtype=np.complex128)
        self._shared = None

    # ---- 병렬 ----
    def _map(self, fn, chunks):
        if self.threads <= 1 or len(chunks) <= 1:
            return [fn(chunk) for chunk in chunks]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, chunks))


def _chunks(items: List, parts: int) -> List[List]:
    """순서를 보존하는 연속 분할"""
    parts = max(1, min(int(parts or 1), len(items)))
    if parts == 1:
        return [items]
    size = -(-len(items) // parts)
    return [items[i:i + size] for i in range(0, len(items), size)]


# ==================== 함수형 진입점 ====================

def causal_cone(state: SpectralState, sites: Sequence[int]) -> List[ConeGate]:
    return ContractionEngine(state).causal_cone(sites)


def expect_one_site(state: SpectralState, op: OperatorLike, site: int) -> complex:
    return ContractionEngine(state).expect_one_site(op, site)


def expect_all_one_site(state: SpectralState, op: OperatorLike, threads: Optional[int] = None) -> np.ndarray:
    return ContractionEngine(state, threads).expect_all_one_site(op)


def expect_two_site(state: SpectralState, op_a: OperatorLike, site_a: int,
                    op_b: OperatorLike, site_b: int) -> complex:
    return ContractionEngine(state).expect_two_site(op_a, site_a, op_b, site_b)


def expect_all_two_site(state: SpectralState, op_a: OperatorLike, op_b: OperatorLike,
                        site0: int = 0, offsets: Optional[Sequence] = None,
                        threads: Optional[int] = None) -> CorrelationSeries:
    return ContractionEngine(state, threads).expect_all_two_site(op_a, op_b, site0, offsets)


def reduced_density(state: SpectralState, sites: Sequence[int]) -> np.ndarray:
    return ContractionEngine(state).reduced_density(sites)


def energy(state: SpectralState, terms: Sequence[Term]) -> float:
    return ContractionEngine(state).energy(terms)


def environment(state: SpectralState, terms: Sequence[Term], gate_id: int) -> GradedTensor:
    return ContractionEngine(state).environment(terms, gate_id)


def expect_one_site_bogoliubov(state: SpectralState, op: OperatorLike, site: int) -> complex:
    return ContractionEngine(state).expect_one_site_bogoliubov(op, site)
