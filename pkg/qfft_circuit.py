"""
페르미온 고속 푸리에 변환 회로 (Fermionic QFFT Circuit)

운동량 모드(위쪽 와이어) → 실공간 사이트(아래쪽 와이어)로 가는 log-depth 회로.
- 1D: 단계마다 F₂ 층 + 회전 인자 층, 아래쪽 경계에서 비트 반전
- 2D: x, y 축 단계를 번갈아 배치하고 회전 인자는 2-body 게이트에 흡수
- 변형 스케줄: 'dit'(기본), 'dif'(전치 회로), 'perm_top'(순열을 위쪽으로)
"""

import json
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from graded_tensor import (
    Gate,
    GradedTensorError,
    WireSpace,
    butterfly_gate,
    bogoliubov_gate,
    f2_gate,
    gate_from_matrix,
    phase_gate,
    swap_gate,
    twiddle_gate,
)

logger = logging.getLogger(__name__)

CIRCUIT_FORMAT = "stn-circuit/1"
SCHEDULES = ("dit", "dif", "perm_top")


class CircuitError(ValueError):
    """회로 구성/변환 오류"""


def _log2(n: int) -> int:
    if n < 1 or n & (n - 1):
        raise CircuitError(f"size must be a power of two, got {n}")
    return n.bit_length() - 1


@dataclass(frozen=True)
class Permutation:
    """와이어 w의 모드를 image[w] 와이어로 옮기는 전단사"""
    image: Tuple[int, ...]

    def __post_init__(self):
        image = tuple(int(x) for x in self.image)
        if sorted(image) != list(range(len(image))):
            raise CircuitError(f"not a bijection on [0, {len(image)}): {list(image)[:16]}")
        object.__setattr__(self, "image", image)

    def __len__(self) -> int:
        return len(self.image)

    def inverse(self) -> "Permutation":
        inv = [0] * len(self.image)
        for w, target in enumerate(self.image):
            inv[target] = w
        return Permutation(tuple(inv))

    def matrix(self) -> np.ndarray:
        n = len(self.image)
        mat = np.zeros((n, n))
        mat[list(self.image), list(range(n))] = 1.0
        return mat

    def is_involution(self) -> bool:
        return all(self.image[t] == w for w, t in enumerate(self.image))


@dataclass(frozen=True)
class GatePlacement:
    gate: Gate
    wires: Tuple[int, ...]

    def __post_init__(self):
        wires = tuple(int(w) for w in self.wires)
        if len(wires) != self.gate.arity:
            raise CircuitError(f"{self.gate.label} needs {self.gate.arity} wires, got {wires}")
        if len(set(wires)) != len(wires):
            raise CircuitError(f"gate {self.gate.label} placed on repeated wire {wires}")
        object.__setattr__(self, "wires", wires)


@dataclass(frozen=True)
class GateLayer:
    """서로 겹치지 않는 와이어 위 게이트 배치들"""
    placements: Tuple[GatePlacement, ...]

    def __post_init__(self):
        placements = tuple(self.placements)
        used = [w for p in placements for w in p.wires]
        if len(set(used)) != len(used):
            raise CircuitError("gates within a layer must touch disjoint wires")
        object.__setattr__(self, "placements", placements)

    @property
    def max_arity(self) -> int:
        return max((p.gate.arity for p in self.placements), default=0)


Layer = Union[GateLayer, Permutation]


@dataclass(frozen=True)
class LogicalOp:
    """논리 모드 id(위쪽 와이어 번호) 기준으로 표현한 게이트 작용"""
    gate: Gate
    ids: Tuple[int, ...]
    layer: int


@dataclass(frozen=True, eq=False)
class Circuit:
    """
    층 단위 회로

    Attributes:
        num_wires: 와이어 수 n
        wire_space: 와이어 공간 (χ = 2^s)
        layers: 위→아래 적용 순서의 GateLayer / Permutation
        site_permutation: 아래쪽 와이어 w가 담는 실공간 사이트 = image[w]
        shape: (n,) 또는 (nx, ny)
        schedule: 'dit' | 'dif' | 'perm_top' | 'custom'
        momentum_offset: 0 또는 1/2
    """
    num_wires: int
    wire_space: WireSpace
    layers: Tuple[Layer, ...]
    site_permutation: Permutation
    shape: Tuple[int, ...] = ()
    schedule: str = "custom"
    momentum_offset: float = 0.0

    def __post_init__(self):
        layers = tuple(self.layers)
        for layer in layers:
            if isinstance(layer, Permutation):
                if len(layer) != self.num_wires:
                    raise CircuitError("permutation layer size differs from num_wires")
                continue
            for placement in layer.placements:
                if any(w < 0 or w >= self.num_wires for w in placement.wires):
                    raise CircuitError(f"wire out of range in {placement.wires}")
                if placement.gate.space != self.wire_space:
                    raise CircuitError("gate wire space differs from circuit wire space")
        if len(self.site_permutation) != self.num_wires:
            raise CircuitError("site_permutation size differs from num_wires")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "shape", tuple(self.shape) or (self.num_wires,))

    # ---- 통계 ----
    def gate_count(self, arity: Optional[int] = None) -> int:
        return sum(1 for layer in self.gate_layers() for p in layer.placements
                   if arity is None or p.gate.arity == arity)

    def gate_layers(self) -> List[GateLayer]:
        return [layer for layer in self.layers if isinstance(layer, GateLayer)]

    def two_body_depth(self) -> int:
        return sum(1 for layer in self.gate_layers() if layer.max_arity == 2)

    def logical_ops(self) -> List[LogicalOp]:
        """순열 층을 재라벨링으로 흡수하고 게이트를 논리 id 위 작용으로 변환"""
        wire_to_id = list(range(self.num_wires))
        ops = []
        for index, layer in enumerate(self.layers):
            if isinstance(layer, Permutation):
                moved = [0] * self.num_wires
                for w, target in enumerate(layer.image):
                    moved[target] = wire_to_id[w]
                wire_to_id = moved
                continue
            for placement in layer.placements:
                ops.append(LogicalOp(placement.gate,
                                     tuple(wire_to_id[w] for w in placement.wires), index))
        return ops

    def bottom_ids(self) -> np.ndarray:
        """아래쪽 와이어 w에 도달한 논리 id"""
        wire_to_id = np.arange(self.num_wires)
        for layer in self.layers:
            if isinstance(layer, Permutation):
                moved = np.empty_like(wire_to_id)
                moved[list(layer.image)] = wire_to_id
                wire_to_id = moved
        return wire_to_id

    def site_of_id(self) -> np.ndarray:
        """논리 id → 실공간 사이트"""
        sites = np.empty(self.num_wires, dtype=np.int64)
        sites[self.bottom_ids()] = np.asarray(self.site_permutation.image)
        return sites

    def id_of_site(self) -> np.ndarray:
        ids = np.empty(self.num_wires, dtype=np.int64)
        ids[self.site_of_id()] = np.arange(self.num_wires)
        return ids


def bit_reversal(n: int) -> Permutation:
    """x → x의 log₂n 비트 반전"""
    bits = _log2(n)
    image = [int(format(x, f"0{bits}b")[::-1], 2) if bits else 0 for x in range(n)]
    return Permutation(tuple(image))


def _stage_pairs(n: int, m: int) -> List[Tuple[int, int, int]]:
    """블록 크기 m 단계의 (hi, lo, k') 목록"""
    half = m // 2
    return [(offset + k + half, offset + k, k)
            for offset in range(0, n, m) for k in range(half)]


def build_qfft_1d(n: int, species: int = 1) -> Circuit:
    """
    1D 페르미온 QFFT 회로

    단계 m = n, n/2, ..., 2 마다:
    1) 블록 내 (hi=o+k'+m/2, lo=o+k') 쌍에 F₂
    2) k' > 0이면 hi 와이어에 TWIDDLE(k', m)
    아래쪽 와이어 w는 사이트 bitrev(w)를 담는다.
    """
    stages = _log2(n)
    space = WireSpace(species)
    f2 = f2_gate(space)
    layers: List[Layer] = []
    m = n
    for _ in range(stages):
        pairs = _stage_pairs(n, m)
        layers.append(GateLayer(tuple(GatePlacement(f2, (hi, lo)) for hi, lo, _k in pairs)))
        twiddles = tuple(GatePlacement(twiddle_gate(k, m, space), (hi,))
                         for hi, _lo, k in pairs if k > 0)
        if twiddles:
            layers.append(GateLayer(twiddles))
        m //= 2
    circuit = Circuit(n, space, tuple(layers), bit_reversal(n), (n,), "dit")
    logger.debug("QFFT 1D n=%d s=%d: %d two-body gates", n, species, circuit.gate_count(2))
    return circuit


def build_qfft_2d(nx: int, ny: int, species: int = 1, first_axis: str = "x") -> Circuit:
    """
    2D QFFT 회로 (와이어 w = wx·ny + wy)

    축별 단계를 x, y, x, y, ... 순서로 번갈아 두고 회전 인자는 F2W 게이트에 흡수한다.
    """
    if first_axis not in ("x", "y"):
        raise CircuitError(f"first_axis must be 'x' or 'y', got {first_axis!r}")
    space = WireSpace(species)

    def axis_layers(size: int, place) -> List[GateLayer]:
        result = []
        m = size
        for _ in range(_log2(size)):
            placements = []
            for hi, lo, k in _stage_pairs(size, m):
                gate = f2_gate(space) if k == 0 else butterfly_gate(k, m, space)
                placements.extend(place(hi, lo, gate))
            result.append(placements)
            m //= 2
        return result

    x_stages = axis_layers(nx, lambda hi, lo, g: [GatePlacement(g, (hi * ny + wy, lo * ny + wy))
                                                  for wy in range(ny)])
    y_stages = axis_layers(ny, lambda hi, lo, g: [GatePlacement(g, (wx * ny + hi, wx * ny + lo))
                                                  for wx in range(nx)])
    first, second = (x_stages, y_stages) if first_axis == "x" else (y_stages, x_stages)
    layers = []
    for index in range(max(len(first), len(second))):
        for stages in (first, second):
            if index < len(stages):
                layers.append(GateLayer(tuple(stages[index])))

    px, py = bit_reversal(nx), bit_reversal(ny)
    site = tuple(px.image[w // ny] * ny + py.image[w % ny] for w in range(nx * ny))
    return Circuit(nx * ny, space, tuple(layers), Permutation(site), (nx, ny), "dit")


def _single_particle_block(gate: Gate) -> np.ndarray:
    """게이트의 종 0 단일 입자 블록 (첫 슬롯, 둘째 슬롯 순)"""
    chi = gate.space.dim
    if gate.arity == 1:
        return gate.matrix[1:2, 1:2]
    index = [chi, 1]
    return gate.matrix[np.ix_(index, index)]


def single_particle_matrix(c: Circuit) -> np.ndarray:
    """M[y, x] = 위쪽 와이어 x의 페르미온 하나가 아래쪽 와이어 y로 가는 진폭"""
    n = c.num_wires
    total = np.eye(n, dtype=np.complex128)
    for layer in c.layers:
        if isinstance(layer, Permutation):
            total = layer.matrix() @ total
            continue
        step = np.eye(n, dtype=np.complex128)
        for placement in layer.placements:
            wires = list(placement.wires)
            step[np.ix_(wires, wires)] = _single_particle_block(placement.gate)
        total = step @ total
    return total


def site_matrix(c: Circuit) -> np.ndarray:
    """site_permutation을 풀어 쓴 단일 입자 행렬 S[x, k]"""
    M = single_particle_matrix(c)
    S = np.empty_like(M)
    S[list(c.site_permutation.image), :] = M
    return S


def dft_matrix(n: int, offset: float = 0.0) -> np.ndarray:
    """Φ[x, k] = e^{2πi(k+offset)x/n} / √n"""
    x = np.arange(n)[:, None]
    k = np.arange(n)[None, :] + offset
    return np.exp(2j * np.pi * k * x / n) / np.sqrt(n)


def variant_layer_order(c: Circuit, schedule: str) -> Circuit:
    """
    단일 입자 행렬이 같은 변형 스케줄

    - 'dit': 그대로
    - 'dif': [P, 역순·전치된 게이트 층(회전 인자가 F₂ 앞), P]
    - 'perm_top': [P, 와이어를 P로 재라벨링한 게이트 층(위쪽이 최근접), P]
    """
    if schedule not in SCHEDULES:
        raise CircuitError(f"unknown schedule {schedule!r}; expected one of {SCHEDULES}")
    if schedule == c.schedule:
        return c
    if c.schedule != "dit":
        raise CircuitError(f"variants are derived from the 'dit' schedule, got {c.schedule!r}")
    if c.momentum_offset:
        raise CircuitError("derive the variant before applying a momentum offset")
    perm = c.site_permutation
    if not perm.is_involution():
        raise CircuitError("site permutation must be an involution to move it to the top")
    body = [layer for layer in c.layers if isinstance(layer, GateLayer)]
    if schedule == "dif":
        body = [GateLayer(tuple(GatePlacement(_transpose(p.gate), p.wires)
                                for p in layer.placements))
                for layer in reversed(body)]
    else:
        body = [GateLayer(tuple(GatePlacement(p.gate, tuple(perm.image[w] for w in p.wires))
                                for p in layer.placements))
                for layer in body]
    layers = (perm, *body, perm)
    return Circuit(c.num_wires, c.wire_space, layers, perm, c.shape, schedule)


def replace_gates(c: Circuit, gates: Dict[int, Gate]) -> Circuit:
    """
    logical_ops() 순번 기준으로 게이트를 바꾼 새 회로

    배치 와이어와 순열 층은 그대로 두므로 논리 id 위 작용도 그대로다.
    """
    counter = 0
    layers: List[Layer] = []
    for layer in c.layers:
        if isinstance(layer, Permutation):
            layers.append(layer)
            continue
        placements = []
        for placement in layer.placements:
            gate = gates.get(counter, placement.gate)
            if gate.arity != placement.gate.arity:
                raise CircuitError(f"replacement for gate {counter} has arity {gate.arity}, "
                                   f"expected {placement.gate.arity}")
            placements.append(GatePlacement(gate, placement.wires))
            counter += 1
        layers.append(GateLayer(tuple(placements)))
    unknown = [i for i in gates if not 0 <= i < counter]
    if unknown:
        raise CircuitError(f"no gates with indices {unknown} (circuit has {counter})")
    return Circuit(c.num_wires, c.wire_space, tuple(layers), c.site_permutation,
                   c.shape, c.schedule, c.momentum_offset)


def prepend_layer(c: Circuit, layer: GateLayer) -> Circuit:
    """운동량 쪽(맨 위)에 게이트 층 하나를 붙인다"""
    return Circuit(c.num_wires, c.wire_space, (layer,) + c.layers, c.site_permutation,
                   c.shape, c.schedule, c.momentum_offset)


def _transpose(gate: Gate) -> Gate:
    if np.array_equal(gate.matrix, gate.matrix.T):
        return gate
    return gate_from_matrix(gate.matrix.T, gate.space, f"{gate.label}^T", gate.params)


def apply_momentum_offset(c: Circuit, offset: float) -> Circuit:
    """
    실공간 쪽 끝에 e^{iπx·n̂/n} 위상 층을 붙여 반정수 운동량 회로를 만든다

    연산자 곱 기준으로 가장 왼쪽(마지막 적용)에 놓이므로
    c̃†_{k+1/2} = n^{-1/2} Σₓ e^{2πi(k+1/2)x/n} ĉ†ₓ 가 된다.
    """
    if offset not in (0, 0.5):
        raise CircuitError(f"momentum offset must be 0 or 1/2, got {offset}")
    if offset == 0:
        return c
    if len(c.shape) != 1:
        raise CircuitError("momentum offset is only supported for 1D circuits")
    if c.momentum_offset:
        raise CircuitError("circuit already carries a momentum offset")
    n = c.num_wires
    placements = tuple(GatePlacement(phase_gate(np.pi * x / n, c.wire_space), (w,))
                       for w, x in enumerate(c.site_permutation.image) if x != 0)
    layers = c.layers + ((GateLayer(placements),) if placements else ())
    return Circuit(n, c.wire_space, layers, c.site_permutation, c.shape, c.schedule, 0.5)


# ==================== 직렬화 ====================

def gate_to_dict(gate: Gate) -> Dict:
    entry = {"label": gate.label, "params": list(gate.params)}
    if gate.label not in ("F2", "TWIDDLE", "PHASE", "F2W", "SWAP"):
        entry["matrix"] = [[[z.real, z.imag] for z in row] for row in gate.matrix.tolist()]
    return entry


def gate_from_dict(entry: Dict, space: WireSpace) -> Gate:
    label, params = entry["label"], entry.get("params", [])
    try:
        if label == "F2":
            return f2_gate(space)
        if label == "TWIDDLE":
            return twiddle_gate(int(params[0]), int(params[1]), space)
        if label == "PHASE":
            return phase_gate(float(params[0]), space)
        if label == "F2W":
            return butterfly_gate(int(params[0]), int(params[1]), space)
        if label == "SWAP":
            return swap_gate(space, space)
        matrix = np.array([[complex(re, im) for re, im in row] for row in entry["matrix"]])
        if label == "BOG":
            return bogoliubov_gate(matrix, space, params[0] if params else None)
        return gate_from_matrix(matrix, space, label, tuple(params))
    except (KeyError, IndexError, TypeError, GradedTensorError) as e:
        raise CircuitError(f"invalid gate entry {label!r}: {e}") from e


def circuit_to_dict(c: Circuit) -> Dict:
    layers = []
    for layer in c.layers:
        if isinstance(layer, Permutation):
            layers.append({"type": "permutation", "image": list(layer.image)})
        else:
            layers.append({"type": "gates", "gates": [
                dict(gate_to_dict(p.gate), wires=list(p.wires)) for p in layer.placements]})
    return {
        "format": CIRCUIT_FORMAT,
        "num_wires": c.num_wires,
        "num_species": c.wire_space.num_species,
        "shape": list(c.shape),
        "schedule": c.schedule,
        "momentum_offset": c.momentum_offset,
        "site_permutation": list(c.site_permutation.image),
        "two_body_gates": c.gate_count(2),
        "layers": layers,
    }


def circuit_from_dict(doc: Dict) -> Circuit:
    if doc.get("format") != CIRCUIT_FORMAT:
        raise CircuitError(f"unsupported circuit format {doc.get('format')!r}")
    space = WireSpace(int(doc["num_species"]))
    layers: List[Layer] = []
    for entry in doc["layers"]:
        if entry["type"] == "permutation":
            layers.append(Permutation(tuple(entry["image"])))
        elif entry["type"] == "gates":
            layers.append(GateLayer(tuple(
                GatePlacement(gate_from_dict(g, space), tuple(g["wires"])) for g in entry["gates"])))
        else:
            raise CircuitError(f"unknown layer type {entry['type']!r}")
    return Circuit(int(doc["num_wires"]), space, tuple(layers),
                   Permutation(tuple(doc["site_permutation"])), tuple(doc["shape"]),
                   doc.get("schedule", "custom"), float(doc.get("momentum_offset", 0.0)))


def circuit_to_json(c: Circuit, indent: Optional[int] = 1) -> str:
    return json.dumps(circuit_to_dict(c), indent=indent)


def circuit_from_json(text: str) -> Circuit:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise CircuitError(f"circuit document is not valid JSON: {e}") from e
    return circuit_from_dict(doc)
