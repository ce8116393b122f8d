"""
跳数伪标签构造

在每条元路径的折叠邻接上按优先级依次检查规则 ŷ=1,2,3,4,...，
第一个成立的规则即为节点对的跳数伪标签：

    ŷ=1: N1(i) ∩ N1(j) ≠ ∅
    ŷ=2: N2(i) ∩ N1(j) ≠ ∅ 或 N2(j) ∩ N1(i) ≠ ∅
    ŷ=3: N2(i) ∩ N2(j) ≠ ∅
    ŷ=4: N4(i) ∩ N1(j) ≠ ∅ 或 N4(j) ∩ N1(i) ≠ ∅

更大的 ŷ=k 使用 (p, q) = (⌈(k+1)/2⌉, ⌊(k+1)/2⌋) 的对称拆分。
直接相连（折叠图距离为 1）的节点对不打标签。
"""

from __future__ import annotations

import logging
from collections import deque
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .config_manager import PairSamplerConfig
from .errors import ArgumentError, GraphFormatError
from .graph import CollapsedAdj, reach_powers
from .utils import ensure_parent_dir

_LOG = logging.getLogger(__name__)

J_MAX_DEFAULT = 4
J_MAX_LIMIT = 8
LABEL_TSV_HEADER = "i\tj\tmetapath\ty"

# k <= 4 的邻居阶数固定；k 更大时按 (ceil((k+1)/2), ceil(k/2)) 推广
_FIXED_ORDERS: dict[int, tuple[int, int]] = {1: (1, 1), 2: (2, 1), 3: (2, 2), 4: (4, 1)}


def rule_orders(k: int) -> tuple[int, int]:
    """规则 ŷ=k 比较的邻居阶数 (p, q)。"""
    if k in _FIXED_ORDERS:
        return _FIXED_ORDERS[k]
    return (k + 2) // 2, (k + 1) // 2


def max_order(j_max: int) -> int:
    return max(max(rule_orders(k)) for k in range(1, j_max + 1))


def _check_j_max(j_max: int) -> None:
    if not 1 <= j_max <= J_MAX_LIMIT:
        raise ArgumentError(f"j_max must be in 1..={J_MAX_LIMIT}, got {j_max}")


@dataclass(frozen=True, eq=False)
class JumpLabelSet:
    """伪标签集合，entries 每行为 (i, j, metapath, y)，按 (metapath, i, j) 排序。"""

    entries: np.ndarray
    j_max: int = J_MAX_DEFAULT
    metapath_ids: tuple[int, ...] = ()
    empty_metapaths: tuple[int, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return int(self.entries.shape[0])

    def counts(self) -> dict[int, int]:
        counts = {mid: 0 for mid in self.metapath_ids}
        if len(self):
            ids, freq = np.unique(self.entries[:, 2], return_counts=True)
            counts.update({int(m): int(c) for m, c in zip(ids, freq)})
        return counts

    def for_metapath(self, metapath_id: int) -> tuple[np.ndarray, np.ndarray]:
        """该元路径下的 (pairs[k,2], y[k])。"""
        rows = self.entries[self.entries[:, 2] == metapath_id]
        return rows[:, :2].copy(), rows[:, 3].copy()

    def restrict(self, keep: np.ndarray) -> JumpLabelSet:
        kept = self.entries[np.asarray(keep, dtype=bool)]
        return JumpLabelSet(
            entries=kept,
            j_max=self.j_max,
            metapath_ids=self.metapath_ids,
            empty_metapaths=tuple(m for m in self.metapath_ids if not np.any(kept[:, 2] == m)),
        )


def _sorted_entries(rows: np.ndarray) -> np.ndarray:
    if rows.size == 0:
        return np.zeros((0, 4), dtype=np.int64)
    order = np.lexsort((rows[:, 1], rows[:, 0], rows[:, 2]))
    return rows[order]


def _is_adjacent(matrix: sp.csr_matrix, i: int, j: int) -> bool:
    return bool(matrix[i, j]) or bool(matrix[j, i])


def _row_set(matrix: sp.csr_matrix, i: int) -> set[int]:
    return set(matrix.indices[matrix.indptr[i] : matrix.indptr[i + 1]].tolist())


def jump_label(
    a: CollapsedAdj,
    i: int,
    j: int,
    j_max: int = J_MAX_DEFAULT,
    *,
    powers: Sequence[sp.csr_matrix] | None = None,
) -> int | None:
    """按优先级检查规则，返回第一个成立的 ŷ；无规则成立或直接相连时返回 None。"""
    if i == j:
        raise ArgumentError(f"jump_label needs two distinct nodes, got i=j={i}")
    _check_j_max(j_max)
    if _is_adjacent(a.matrix, i, j):
        return None
    if powers is None:
        powers = reach_powers(a, max_order(j_max))

    for k in range(1, j_max + 1):
        p, q = rule_orders(k)
        if _row_set(powers[p - 1], i) & _row_set(powers[q - 1], j):
            return k
        if _row_set(powers[p - 1], j) & _row_set(powers[q - 1], i):
            return k
    return None


def label_row(
    a: CollapsedAdj, powers: Sequence[sp.csr_matrix], i: int, j_max: int = J_MAX_DEFAULT
) -> np.ndarray:
    """对目标节点 i 一次性计算与所有节点的 ŷ（0 表示无标签）。"""
    n = a.n
    labels = np.zeros(n, dtype=np.int64)
    settled = np.zeros(n, dtype=bool)
    settled[i] = True
    settled[a.matrix[i].indices] = True
    settled[a.matrix[:, i].nonzero()[0]] = True

    for k in range(1, j_max + 1):
        p, q = rule_orders(k)
        r_p = sp.csr_matrix(powers[p - 1][i], dtype=np.int64)
        r_q = sp.csr_matrix(powers[q - 1][i], dtype=np.int64)
        hits = (powers[q - 1] @ r_p.T).toarray().ravel() > 0
        hits |= (powers[p - 1] @ r_q.T).toarray().ravel() > 0
        fresh = hits & ~settled
        labels[fresh] = k
        settled |= fresh
    return labels


def bfs_distance(a: CollapsedAdj, i: int, j: int) -> int | None:
    """折叠图上的无权最短路长度，不连通时返回 None。"""
    if i == j:
        return 0
    matrix = a.matrix
    seen = {i}
    queue: deque[tuple[int, int]] = deque([(i, 0)])
    while queue:
        node, dist = queue.popleft()
        for nxt in matrix.indices[matrix.indptr[node] : matrix.indptr[node + 1]]:
            nxt = int(nxt)
            if nxt == j:
                return dist + 1
            if nxt not in seen:
                seen.add(nxt)
                queue.append((nxt, dist + 1))
    return None


def per_label_quota(neighbors_per_target: int, j_max: int) -> list[int]:
    """每个 ŷ 的配额：平均分配，余数给最小的 ŷ。"""
    base, rem = divmod(neighbors_per_target, j_max)
    quotas = [base] * j_max
    quotas[0] += rem
    return quotas


def _sample_metapath(adj: CollapsedAdj, cfg: PairSamplerConfig, j_max: int) -> np.ndarray:
    n = adj.n
    if n < 2 or adj.matrix.nnz == 0:
        return np.zeros((0, 4), dtype=np.int64)

    rng = np.random.default_rng(int(cfg.seed) ^ int(adj.metapath_id))
    targets = rng.choice(n, size=min(cfg.target_nodes_per_metapath, n), replace=False)
    powers = [sp.csr_matrix(p, dtype=np.int64) for p in reach_powers(adj, max_order(j_max))]
    quotas = per_label_quota(cfg.neighbors_per_target, j_max)

    chosen: dict[tuple[int, int], int] = {}
    for target in targets:
        target = int(target)
        row = label_row(adj, powers, target, j_max)
        buckets = [np.flatnonzero(row == k) for k in range(1, j_max + 1)]
        picks: list[tuple[int, int]] = []
        leftovers: list[np.ndarray] = []
        for k, (cands, quota) in enumerate(zip(buckets, quotas), start=1):
            if len(cands) <= quota:
                taken = cands
            else:
                taken = np.sort(rng.choice(cands, size=quota, replace=False))
            picks.extend((int(c), k) for c in taken)
            leftovers.append(np.setdiff1d(cands, taken))

        room = cfg.neighbors_per_target - len(picks)
        for k, rest in enumerate(leftovers, start=1):
            if room <= 0:
                break
            if len(rest) == 0:
                continue
            extra = rest if len(rest) <= room else np.sort(rng.choice(rest, size=room, replace=False))
            picks.extend((int(c), k) for c in extra)
            room -= len(extra)

        for partner, y in picks:
            key = (min(target, partner), max(target, partner))
            chosen.setdefault(key, y)

    if not chosen:
        return np.zeros((0, 4), dtype=np.int64)
    rows = np.array(
        [(i, j, adj.metapath_id, y) for (i, j), y in chosen.items()],
        dtype=np.int64,
    )
    return _sorted_entries(rows)


def build_label_set(
    adjs: Sequence[CollapsedAdj],
    cfg: PairSamplerConfig,
    j_max: int = J_MAX_DEFAULT,
    *,
    threads: int = 1,
) -> JumpLabelSet:
    """对每条元路径采样目标节点并构造伪标签；给定种子时结果确定。"""
    if not adjs:
        raise ArgumentError("build_label_set needs at least one collapsed adjacency")
    _check_j_max(j_max)

    if threads > 1 and len(adjs) > 1:
        with ThreadPoolExecutor(max_workers=min(threads, len(adjs))) as pool:
            parts = list(pool.map(lambda adj: _sample_metapath(adj, cfg, j_max), adjs))
    else:
        parts = [_sample_metapath(adj, cfg, j_max) for adj in adjs]

    empty: list[int] = []
    for adj, part in zip(adjs, parts):
        if part.shape[0] == 0:
            empty.append(adj.metapath_id)
            _LOG.warning("元路径 %d 没有可用的伪标签节点对", adj.metapath_id)
        else:
            _LOG.info("元路径 %d: %d 个伪标签节点对", adj.metapath_id, part.shape[0])

    entries = _sorted_entries(np.concatenate(parts, axis=0)) if parts else np.zeros((0, 4), np.int64)
    return JumpLabelSet(
        entries=entries,
        j_max=j_max,
        metapath_ids=tuple(sorted(adj.metapath_id for adj in adjs)),
        empty_metapaths=tuple(sorted(empty)),
    )


def save_label_tsv(labels: JumpLabelSet, path: str | Path) -> None:
    ensure_parent_dir(path)
    lines = [LABEL_TSV_HEADER]
    lines.extend(f"{i}\t{j}\t{m}\t{y}" for i, j, m, y in _sorted_entries(labels.entries).tolist())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_label_tsv(
    path: str | Path, *, j_max: int = J_MAX_DEFAULT, metapath_ids: Sequence[int] | None = None
) -> JumpLabelSet:
    path = Path(path)
    if not path.exists():
        raise GraphFormatError("label file not found", file=str(path))
    lines = path.read_text(encoding="utf-8").split("\n")
    if not lines or lines[0].strip() != LABEL_TSV_HEADER:
        raise GraphFormatError(f"expected header {LABEL_TSV_HEADER!r}", file=path.name, line=1)

    rows: list[tuple[int, int, int, int]] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise GraphFormatError("expected 4 tab-separated fields", file=path.name, line=lineno)
        try:
            i, j, m, y = (int(p) for p in parts)
        except ValueError:
            raise GraphFormatError("non-integer field", file=path.name, line=lineno) from None
        if i == j or not 1 <= y <= j_max:
            raise GraphFormatError(f"invalid entry (i={i}, j={j}, y={y})", file=path.name, line=lineno)
        rows.append((i, j, m, y))

    entries = _sorted_entries(np.array(rows, dtype=np.int64).reshape(-1, 4))
    ids = tuple(sorted(metapath_ids)) if metapath_ids is not None else tuple(
        sorted({int(m) for m in entries[:, 2]})
    )
    return JumpLabelSet(
        entries=entries,
        j_max=j_max,
        metapath_ids=ids,
        empty_metapaths=tuple(m for m in ids if not np.any(entries[:, 2] == m)),
    )
