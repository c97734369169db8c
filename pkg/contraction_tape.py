"""
축약 기록 (contraction tape)

엔진의 모든 기본 단계는 두 피연산자 einsum의 고정된 나열이다. 여기서는 그 einsum을
노드로 기록하고, 곱셈-덧셈 수를 피연산자 모양에서 직접 센다.

미분이 필요한 잎(variable)에서 출발한 노드만 입력을 기억한다. 역방향 전파는
einsum의 출력 첨자와 피연산자 첨자를 맞바꾼 einsum으로 수행한다 (복소 선형, 켤레 없음).
"""

import itertools
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

_serial = itertools.count()

Operand = Union["Node", np.ndarray]


class TapeError(ValueError):
    """기록 오류"""


class Node:
    """기록된 텐서 값. requires_grad인 노드만 입력과 첨자식을 보관한다."""

    __slots__ = ("value", "requires_grad", "inputs", "spec", "serial")

    def __init__(self, value: np.ndarray, requires_grad: bool = False,
                 inputs: Tuple[Operand, ...] = (), spec: Optional[str] = None):
        self.value = value
        self.requires_grad = requires_grad
        self.inputs = inputs
        self.spec = spec
        self.serial = next(_serial)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(value) -> Node:
    return Node(np.asarray(value, dtype=np.complex128))


def variable(value) -> Node:
    return Node(np.array(value, dtype=np.complex128), requires_grad=True)


def _value(op: Operand) -> np.ndarray:
    return op.value if isinstance(op, Node) else op


def _parse(spec: str) -> Tuple[List[str], str]:
    if "->" not in spec:
        raise TapeError(f"einsum spec {spec!r} needs an explicit output")
    lhs, out = spec.split("->")
    terms = lhs.split(",")
    for term in terms:
        if len(set(term)) != len(term):
            raise TapeError(f"repeated index inside operand {term!r} of {spec!r}")
    return terms, out


def einsum_madds(spec: str, values: Sequence[np.ndarray]) -> int:
    """첨자 공간 전체의 크기 = 피연산자 모양에서 센 곱셈-덧셈 수"""
    terms, _ = _parse(spec)
    dims: Dict[str, int] = {}
    for term, value in zip(terms, values):
        for letter, size in zip(term, value.shape):
            dims[letter] = size
    return int(np.prod(list(dims.values()), dtype=np.int64)) if dims else 1


def contract(spec: str, *operands: Operand) -> Tuple[Node, int]:
    """
    einsum 한 번을 기록한다.

    Returns:
        (결과 노드, 곱셈-덧셈 수)
    """
    if not 1 <= len(operands) <= 2:
        raise TapeError("contractions are recorded one or two operands at a time")
    values = [_value(op) for op in operands]
    madds = einsum_madds(spec, values)
    out = np.einsum(spec, *values)
    needs = any(isinstance(op, Node) and op.requires_grad for op in operands)
    if needs:
        return Node(out, True, tuple(operands), spec), madds
    return Node(out), madds


def add(*operands: Node) -> Node:
    """같은 모양 노드들의 합"""
    if not operands:
        raise TapeError("add needs at least one operand")
    total = sum(op.value for op in operands)
    needs = any(op.requires_grad for op in operands)
    return Node(np.asarray(total), needs, tuple(operands) if needs else (), "+" if needs else None)


def _vjp(spec: str, inputs: Tuple[Operand, ...], position: int, cotangent: np.ndarray) -> Tuple[np.ndarray, int]:
    """피연산자 position에 대한 역방향 einsum"""
    terms, out = _parse(spec)
    target = terms[position]
    others = [(t, _value(op)) for i, (t, op) in enumerate(zip(terms, inputs)) if i != position]
    present = set(out).union(*(set(t) for t, _ in others))
    kept = "".join(c for c in target if c in present)
    subscripts = ",".join([out] + [t for t, _ in others]) + "->" + kept
    values = [cotangent] + [v for _, v in others]
    grad = np.einsum(subscripts, *values)
    madds = einsum_madds(subscripts, values)
    if kept != target:
        # 대상에만 있는 첨자는 합으로 사라졌으므로 그 방향으로 그대로 퍼뜨린다
        shape = [1] * len(target)
        for axis, letter in enumerate(target):
            if letter in kept:
                shape[axis] = grad.shape[kept.index(letter)]
        grad = np.broadcast_to(grad.reshape(shape), _value(inputs[position]).shape)
    return grad, madds


def gradient(root: Node, leaves: Sequence[Node]) -> Tuple[List[np.ndarray], int]:
    """
    스칼라 root의 잎별 복소 선형 미분 ∂root/∂leaf

    Returns:
        (잎 순서대로의 미분 배열, 역방향 곱셈-덧셈 수)
    """
    if root.value.size != 1:
        raise TapeError(f"gradient needs a scalar root, got shape {root.shape}")
    reachable: Dict[int, Node] = {}
    stack = [root] if root.requires_grad else []
    while stack:
        node = stack.pop()
        if node.serial in reachable:
            continue
        reachable[node.serial] = node
        stack.extend(op for op in node.inputs if isinstance(op, Node) and op.requires_grad)

    cotangents: Dict[int, np.ndarray] = {root.serial: np.ones_like(root.value)}
    madds = 0
    for serial in sorted(reachable, reverse=True):
        node = reachable[serial]
        bar = cotangents.pop(serial, None) if node.inputs else cotangents.get(serial)
        if bar is None or not node.inputs:
            continue
        for position, op in enumerate(node.inputs):
            if not (isinstance(op, Node) and op.requires_grad):
                continue
            if node.spec == "+":
                part = bar
            else:
                part, cost = _vjp(node.spec, node.inputs, position, bar)
                madds += cost
            previous = cotangents.get(op.serial)
            cotangents[op.serial] = part if previous is None else previous + part
    grads = [np.array(cotangents.get(leaf.serial, np.zeros_like(leaf.value)), dtype=np.complex128)
             for leaf in leaves]
    return grads, madds
