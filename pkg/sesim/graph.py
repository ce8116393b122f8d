"""
异构图数据模型与元路径组合

- HetGraph: 多类型节点 + 稀疏布尔双邻接矩阵表示的多类型边
- compose_metapath: 沿元路径做布尔矩阵乘积，得到目标类型上的折叠邻接
- khop_reach / normalize_adj / union_adjacency: 邻接矩阵上的基本运算

所有函数都是输入不可变的纯函数，可在多线程中并发调用。
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ArgumentError, CompositionError, GraphFormatError

_LOG = logging.getLogger(__name__)


def as_bool_csr(matrix: sp.spmatrix | np.ndarray) -> sp.csr_matrix:
    """转换为 CSR 布尔矩阵，去除显式零。"""
    m = sp.csr_matrix(matrix, dtype=bool)
    m.eliminate_zeros()
    m.sort_indices()
    return m


def bool_product(a: sp.spmatrix, b: sp.spmatrix) -> sp.csr_matrix:
    """布尔半环乘积：先在整数上相乘再阈值化到 {0,1}。"""
    prod = sp.csr_matrix(a, dtype=np.int64) @ sp.csr_matrix(b, dtype=np.int64)
    return as_bool_csr(prod > 0)


@dataclass(frozen=True, eq=False)
class Relation:
    edge_type: int
    src_type: int
    dst_type: int
    matrix: sp.csr_matrix
    directed: bool = False


@dataclass(frozen=True)
class Hop:
    edge_type: int
    reverse: bool = False


@dataclass(frozen=True)
class MetapathSpec:
    id: int
    hops: tuple[Hop, ...]
    name: str = ""

    @property
    def is_palindromic(self) -> bool:
        n = len(self.hops)
        return all(
            self.hops[k].edge_type == self.hops[n - 1 - k].edge_type
            and self.hops[k].reverse != self.hops[n - 1 - k].reverse
            for k in range(n)
        )


@dataclass(frozen=True, eq=False)
class CollapsedAdj:
    metapath_id: int
    matrix: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True, eq=False)
class HetGraph:
    node_counts: dict[int, int]
    relations: tuple[Relation, ...]
    target_type: int
    features: np.ndarray
    labels: np.ndarray | None = None
    node_names: dict[int, str] = field(default_factory=dict)
    num_classes: int = 0

    @property
    def n(self) -> int:
        return self.node_counts[self.target_type]

    def relation(self, edge_type: int) -> Relation:
        for rel in self.relations:
            if rel.edge_type == edge_type:
                return rel
        raise CompositionError(f"unknown edge type {edge_type}", hop=-1)

    def validate(self) -> HetGraph:
        """校验全部不变量，失败时抛出 GraphFormatError。"""
        edge_types = {rel.edge_type for rel in self.relations}
        if len(edge_types) != len(self.relations):
            raise GraphFormatError("duplicate edge type ids")
        if len(self.node_counts) + len(edge_types) <= 2:
            raise GraphFormatError("graph is not heterogeneous: |node types| + |edge types| must exceed 2")
        if self.target_type not in self.node_counts:
            raise GraphFormatError(f"target type {self.target_type} is not a declared node type")
        for rel in self.relations:
            for t in (rel.src_type, rel.dst_type):
                if t not in self.node_counts:
                    raise GraphFormatError(f"edge type {rel.edge_type} references unknown node type {t}")
            expected = (self.node_counts[rel.src_type], self.node_counts[rel.dst_type])
            if rel.matrix.shape != expected:
                raise GraphFormatError(
                    f"edge type {rel.edge_type}: biadjacency shape {rel.matrix.shape} != {expected}"
                )
        if self.features.ndim != 2 or self.features.shape[0] != self.n:
            raise GraphFormatError(
                f"features must have one row per target node ({self.n}), got shape {self.features.shape}"
            )
        if not np.all(np.isfinite(self.features)):
            raise GraphFormatError("features contain non-finite values")
        if self.labels is not None:
            if self.labels.shape != (self.n,):
                raise GraphFormatError(f"labels must have length {self.n}")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise GraphFormatError(f"label index outside [0, {self.num_classes})")
        return self


def _hop_matrix(g: HetGraph, hop: Hop, index: int) -> tuple[sp.csr_matrix, int, int]:
    try:
        rel = g.relation(hop.edge_type)
    except CompositionError:
        raise CompositionError(f"unknown edge type {hop.edge_type}", hop=index) from None
    matrix = rel.matrix
    if not rel.directed and rel.src_type == rel.dst_type:
        matrix = as_bool_csr(matrix + matrix.T)
    if hop.reverse:
        return as_bool_csr(matrix.T), rel.dst_type, rel.src_type
    return matrix, rel.src_type, rel.dst_type


def check_metapath(g: HetGraph, spec: MetapathSpec) -> None:
    """校验跳转序列能够首尾衔接并起止于目标类型。"""
    if not spec.hops:
        raise CompositionError("metapath has no hops", hop=0)
    current = g.target_type
    for index, hop in enumerate(spec.hops):
        _, src, dst = _hop_matrix(g, hop, index)
        if src != current:
            raise CompositionError(
                f"edge type {hop.edge_type} starts at node type {src}, expected {current}", hop=index
            )
        current = dst
    if current != g.target_type:
        raise CompositionError(
            f"metapath ends at node type {current}, expected target type {g.target_type}",
            hop=len(spec.hops) - 1,
        )


def compose_metapath(g: HetGraph, spec: MetapathSpec) -> CollapsedAdj:
    """沿元路径组合双邻接矩阵，得到对角线清零的折叠邻接矩阵。"""
    check_metapath(g, spec)
    result: sp.csr_matrix | None = None
    for index, hop in enumerate(spec.hops):
        matrix, _, _ = _hop_matrix(g, hop, index)
        result = matrix if result is None else bool_product(result, matrix)
    assert result is not None
    result = result.tolil()
    result.setdiag(False)
    return CollapsedAdj(metapath_id=spec.id, matrix=as_bool_csr(result))


def collapse_all(g: HetGraph, specs: Sequence[MetapathSpec]) -> list[CollapsedAdj]:
    return [compose_metapath(g, spec) for spec in specs]


def khop_reach(a: CollapsedAdj, k: int) -> sp.csr_matrix:
    """折叠邻接的 k 次布尔幂：第 i 行即 k 阶邻居集合 v_i^{N_k}（允许闭合游走）。"""
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    result = a.matrix
    for _ in range(k - 1):
        result = bool_product(result, a.matrix)
    return as_bool_csr(result)


def reach_powers(a: CollapsedAdj, k_max: int) -> list[sp.csr_matrix]:
    """返回 [A^1, ..., A^k_max]，逐次累乘避免重复计算。"""
    if k_max < 1:
        raise ArgumentError(f"k must be >= 1, got {k_max}")
    powers = [as_bool_csr(a.matrix)]
    for _ in range(k_max - 1):
        powers.append(bool_product(powers[-1], a.matrix))
    return powers


def normalize_adj(a: sp.spmatrix | np.ndarray) -> np.ndarray:
    """D̂^{-1/2}(A+I)D̂^{-1/2}，返回稠密 float64 矩阵。"""
    if a.shape[0] != a.shape[1]:
        raise ArgumentError(f"adjacency must be square, got {a.shape}")
    a_hat = sp.csr_matrix(a, dtype=np.float64).toarray()
    a_hat = (a_hat != 0).astype(np.float64)
    np.fill_diagonal(a_hat, 1.0)
    degree = a_hat.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(degree)
    return a_hat * inv_sqrt[:, None] * inv_sqrt[None, :]


def union_adjacency(adjs: Sequence[CollapsedAdj]) -> sp.csr_matrix:
    """逐元素布尔或，作为编码器的聚合图。"""
    if not adjs:
        raise ArgumentError("union_adjacency needs at least one adjacency")
    shape = adjs[0].matrix.shape
    result = sp.csr_matrix(shape, dtype=bool)
    for adj in adjs:
        if adj.matrix.shape != shape:
            raise ArgumentError(f"shape mismatch: {adj.matrix.shape} vs {shape}")
        result = result + adj.matrix
    return as_bool_csr(result)


def upper_pairs(matrix: sp.spmatrix) -> np.ndarray:
    """无向边列表 (i<j)，按 (i, j) 排序，形状 (m, 2)。"""
    sym = as_bool_csr(matrix + matrix.T)
    upper = sp.triu(sym, k=1).tocoo()
    pairs = np.stack([upper.row, upper.col], axis=1).astype(np.int64)
    if pairs.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return pairs[order]


def remove_pairs(a: CollapsedAdj, pairs: Iterable[tuple[int, int]] | np.ndarray) -> CollapsedAdj:
    """删除给定的无向节点对（两个方向都删除）。"""
    pairs = np.asarray(list(pairs) if not isinstance(pairs, np.ndarray) else pairs, dtype=np.int64)
    if pairs.size == 0:
        return a
    lil = a.matrix.tolil()
    for i, j in pairs.reshape(-1, 2):
        lil[i, j] = False
        lil[j, i] = False
    return CollapsedAdj(metapath_id=a.metapath_id, matrix=as_bool_csr(lil))
