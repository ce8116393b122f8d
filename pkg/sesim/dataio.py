"""
图数据包读写与合成图生成

数据包目录:
    node_types.tsv   type_id  name  count              （带表头）
    edges.tsv        edge_type  src_type  dst_type  src_index  dst_index   （带表头）
    features.tsv     每个目标类型节点一行，制表符分隔的实数（无表头）
    labels.tsv       node_index  class                 （可选，带表头）
    metapaths.json   target_type / num_classes / relations / metapaths

UTF-8，`\\n` 换行，实数以 17 位有效数字输出。
"""

from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .config_manager import SynthConfig
from .errors import CompositionError, GraphFormatError
from .graph import HetGraph, Hop, MetapathSpec, Relation, as_bool_csr, check_metapath
from .utils import derive_rng, format_real

_LOG = logging.getLogger(__name__)

NODE_TYPES_FILE = "node_types.tsv"
EDGES_FILE = "edges.tsv"
FEATURES_FILE = "features.tsv"
LABELS_FILE = "labels.tsv"
METAPATHS_FILE = "metapaths.json"

NODE_TYPES_HEADER = "type_id\tname\tcount"
EDGES_HEADER = "edge_type\tsrc_type\tdst_type\tsrc_index\tdst_index"
LABELS_HEADER = "node_index\tclass"


# ============ metapaths.json 结构 ============


class _Schema(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RelationSchema(_Schema):
    edge_type: int = Field(ge=0)
    src_type: int = Field(ge=0)
    dst_type: int = Field(ge=0)
    directed: bool = False


class HopSchema(_Schema):
    edge_type: int = Field(ge=0)
    reverse: bool = False


class MetapathSchema(_Schema):
    id: int = Field(ge=0)
    name: str = ""
    hops: list[HopSchema] = Field(min_length=1)


class MetapathsFile(_Schema):
    target_type: int = Field(ge=0)
    num_classes: int = Field(default=0, ge=0)
    relations: list[RelationSchema] = Field(min_length=1)
    metapaths: list[MetapathSchema] = Field(min_length=1)


@dataclass(eq=False)
class GraphBundle:
    graph: HetGraph
    metapaths: list[MetapathSpec]
    duplicate_edges: int = 0


# ============ 读取 ============


def _read_lines(path: Path) -> list[str]:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise GraphFormatError("missing file", file=path.name) from None
    except UnicodeDecodeError as e:
        raise GraphFormatError(f"not valid UTF-8: {e}", file=path.name) from None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def _check_header(lines: list[str], header: str, name: str) -> None:
    if not lines or lines[0].rstrip("\r") != header:
        raise GraphFormatError(f"expected header {header!r}", file=name, line=1)


def _int_fields(line: str, count: int, name: str, lineno: int) -> list[int]:
    parts = line.rstrip("\r").split("\t")
    if len(parts) != count:
        raise GraphFormatError(f"expected {count} tab-separated fields, got {len(parts)}", file=name, line=lineno)
    try:
        return [int(p) for p in parts]
    except ValueError:
        raise GraphFormatError("non-integer field", file=name, line=lineno) from None


def _load_schema(root: Path) -> MetapathsFile:
    path = root / METAPATHS_FILE
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise GraphFormatError("missing file", file=METAPATHS_FILE) from None
    except json.JSONDecodeError as e:
        raise GraphFormatError(f"invalid JSON: {e.msg}", file=METAPATHS_FILE, line=e.lineno) from None
    try:
        return MetapathsFile.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        loc = ".".join(str(x) for x in first["loc"])
        raise GraphFormatError(f"{loc}: {first['msg']}", file=METAPATHS_FILE) from None


def _load_node_types(root: Path) -> tuple[dict[int, int], dict[int, str]]:
    lines = _read_lines(root / NODE_TYPES_FILE)
    _check_header(lines, NODE_TYPES_HEADER, NODE_TYPES_FILE)
    counts: dict[int, int] = {}
    names: dict[int, str] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.rstrip("\r").split("\t")
        if len(parts) != 3:
            raise GraphFormatError("expected 3 tab-separated fields", file=NODE_TYPES_FILE, line=lineno)
        try:
            type_id, count = int(parts[0]), int(parts[2])
        except ValueError:
            raise GraphFormatError("non-integer type id or count", file=NODE_TYPES_FILE, line=lineno) from None
        if type_id in counts:
            raise GraphFormatError(f"duplicate node type {type_id}", file=NODE_TYPES_FILE, line=lineno)
        if count < 1:
            raise GraphFormatError(f"node count must be positive, got {count}", file=NODE_TYPES_FILE, line=lineno)
        counts[type_id] = count
        names[type_id] = parts[1]
    return counts, names


def _load_edges(
    root: Path, counts: dict[int, int], relations: Sequence[RelationSchema]
) -> tuple[list[Relation], int]:
    lines = _read_lines(root / EDGES_FILE)
    _check_header(lines, EDGES_HEADER, EDGES_FILE)
    declared = {r.edge_type: r for r in relations}
    coords: dict[int, set[tuple[int, int]]] = {r.edge_type: set() for r in relations}
    duplicates = 0
    for lineno, line in enumerate(lines[1:], start=2):
        edge_type, src_type, dst_type, src, dst = _int_fields(line, 5, EDGES_FILE, lineno)
        rel = declared.get(edge_type)
        if rel is None:
            raise GraphFormatError(f"undeclared edge type {edge_type}", file=EDGES_FILE, line=lineno)
        if (src_type, dst_type) != (rel.src_type, rel.dst_type):
            raise GraphFormatError(
                f"edge type {edge_type} connects ({rel.src_type}, {rel.dst_type}), got ({src_type}, {dst_type})",
                file=EDGES_FILE,
                line=lineno,
            )
        for index, t in ((src, src_type), (dst, dst_type)):
            if not 0 <= index < counts[t]:
                raise GraphFormatError(
                    f"index {index} out of range for node type {t} (count {counts[t]})",
                    file=EDGES_FILE,
                    line=lineno,
                )
        key = (src, dst)
        if key in coords[edge_type]:
            duplicates += 1
        else:
            coords[edge_type].add(key)

    built = []
    for rel in sorted(relations, key=lambda r: r.edge_type):
        pairs = sorted(coords[rel.edge_type])
        shape = (counts[rel.src_type], counts[rel.dst_type])
        rows = np.array([p[0] for p in pairs], dtype=np.int64)
        cols = np.array([p[1] for p in pairs], dtype=np.int64)
        matrix = sp.csr_matrix((np.ones(len(pairs), dtype=bool), (rows, cols)), shape=shape)
        built.append(Relation(rel.edge_type, rel.src_type, rel.dst_type, as_bool_csr(matrix), rel.directed))
    return built, duplicates


def _load_features(root: Path, n: int) -> np.ndarray:
    lines = _read_lines(root / FEATURES_FILE)
    rows: list[list[float]] = []
    width: int | None = None
    for lineno, line in enumerate(lines, start=1):
        parts = line.rstrip("\r").split("\t")
        if width is None:
            width = len(parts)
        elif len(parts) != width:
            raise GraphFormatError(
                f"ragged row: {len(parts)} values, expected {width}", file=FEATURES_FILE, line=lineno
            )
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise GraphFormatError("non-numeric value", file=FEATURES_FILE, line=lineno) from None
    if len(rows) != n:
        raise GraphFormatError(f"{len(rows)} feature rows, expected {n} target nodes", file=FEATURES_FILE)
    return np.array(rows, dtype=np.float64).reshape(n, width or 0)


def _load_labels(root: Path, n: int, num_classes: int) -> np.ndarray | None:
    path = root / LABELS_FILE
    if not path.exists():
        return None
    lines = _read_lines(path)
    _check_header(lines, LABELS_HEADER, LABELS_FILE)
    labels = np.full(n, -1, dtype=np.int64)
    for lineno, line in enumerate(lines[1:], start=2):
        node, cls = _int_fields(line, 2, LABELS_FILE, lineno)
        if not 0 <= node < n:
            raise GraphFormatError(f"node index {node} out of range ({n})", file=LABELS_FILE, line=lineno)
        if not 0 <= cls < num_classes:
            raise GraphFormatError(f"class {cls} outside [0, {num_classes})", file=LABELS_FILE, line=lineno)
        if labels[node] >= 0:
            raise GraphFormatError(f"node {node} labeled twice", file=LABELS_FILE, line=lineno)
        labels[node] = cls
    missing = np.flatnonzero(labels < 0)
    if missing.size:
        raise GraphFormatError(f"{missing.size} target nodes have no label (first: {missing[0]})", file=LABELS_FILE)
    return labels


def load_bundle(path: str | Path) -> GraphBundle:
    """读取并校验数据包；错误信息带文件名与行号。"""
    root = Path(path)
    if not root.is_dir():
        raise GraphFormatError("bundle directory not found", file=str(root))

    schema = _load_schema(root)
    counts, names = _load_node_types(root)
    for rel in schema.relations:
        for t in (rel.src_type, rel.dst_type):
            if t not in counts:
                raise GraphFormatError(f"relation {rel.edge_type} references unknown node type {t}", file=METAPATHS_FILE)
    if schema.target_type not in counts:
        raise GraphFormatError(f"target type {schema.target_type} not in {NODE_TYPES_FILE}", file=METAPATHS_FILE)

    relations, duplicates = _load_edges(root, counts, schema.relations)
    n = counts[schema.target_type]
    features = _load_features(root, n)
    labels = _load_labels(root, n, schema.num_classes)

    graph = HetGraph(
        node_counts=dict(sorted(counts.items())),
        relations=tuple(relations),
        target_type=schema.target_type,
        features=features,
        labels=labels,
        node_names=dict(sorted(names.items())),
        num_classes=schema.num_classes,
    ).validate()

    metapaths = []
    for mp in schema.metapaths:
        spec = MetapathSpec(
            id=mp.id, hops=tuple(Hop(h.edge_type, h.reverse) for h in mp.hops), name=mp.name
        )
        try:
            check_metapath(graph, spec)
        except CompositionError as e:
            raise CompositionError(f"metapath {mp.id}: {e.reason}", hop=e.hop, file=METAPATHS_FILE) from None
        metapaths.append(spec)
    if len({m.id for m in metapaths}) != len(metapaths):
        raise GraphFormatError("duplicate metapath id", file=METAPATHS_FILE)

    if duplicates:
        _LOG.info("%s: 去除 %d 条重复边", root, duplicates)
    _LOG.info(
        "已加载数据包 %s: 节点类型 %s，目标类型 %d，元路径 %d 条",
        root,
        graph.node_counts,
        graph.target_type,
        len(metapaths),
    )
    return GraphBundle(graph=graph, metapaths=metapaths, duplicate_edges=duplicates)


# ============ 写出 ============


def save_bundle(graph: HetGraph, metapaths: Sequence[MetapathSpec], path: str | Path) -> None:
    """按固定顺序写出数据包，load_bundle(save_bundle(x)) 与 x 相同。"""
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        _write_bundle(graph, metapaths, root)
    except OSError as e:
        raise GraphFormatError(f"cannot write bundle: {e}", file=str(root)) from e


def _write_lines(path: Path, lines: list[str]) -> None:
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8", newline="\n")


def _write_bundle(graph: HetGraph, metapaths: Sequence[MetapathSpec], root: Path) -> None:
    _write_lines(
        root / NODE_TYPES_FILE,
        [NODE_TYPES_HEADER]
        + [
            f"{t}\t{graph.node_names.get(t, f'type{t}')}\t{count}"
            for t, count in sorted(graph.node_counts.items())
        ],
    )

    edge_lines = [EDGES_HEADER]
    for rel in sorted(graph.relations, key=lambda r: r.edge_type):
        coo = rel.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        edge_lines.extend(
            f"{rel.edge_type}\t{rel.src_type}\t{rel.dst_type}\t{r}\t{c}"
            for r, c in zip(coo.row[order].tolist(), coo.col[order].tolist())
        )
    _write_lines(root / EDGES_FILE, edge_lines)

    _write_lines(
        root / FEATURES_FILE, ["\t".join(format_real(v) for v in row) for row in graph.features.tolist()]
    )

    labels_path = root / LABELS_FILE
    if graph.labels is not None:
        _write_lines(
            labels_path,
            [LABELS_HEADER] + [f"{i}\t{c}" for i, c in enumerate(graph.labels.tolist())],
        )
    elif labels_path.exists():
        labels_path.unlink()

    schema = {
        "target_type": graph.target_type,
        "num_classes": graph.num_classes,
        "relations": [
            {
                "edge_type": rel.edge_type,
                "src_type": rel.src_type,
                "dst_type": rel.dst_type,
                "directed": rel.directed,
            }
            for rel in sorted(graph.relations, key=lambda r: r.edge_type)
        ],
        "metapaths": [
            {
                "id": mp.id,
                "name": mp.name,
                "hops": [{"edge_type": h.edge_type, "reverse": h.reverse} for h in mp.hops],
            }
            for mp in metapaths
        ],
    }
    (root / METAPATHS_FILE).write_text(json.dumps(schema, indent=2) + "\n", encoding="utf-8", newline="\n")


# ============ 合成图 ============

# 数据集形状：(节点类型名, 数量)、目标类型、关系 (src, dst)、类别数
# Last-FM / Book-Crossing 只公布了节点总数，按 用户:物品:实体 ≈ 1:2:4 拆分
DATASET_PRESETS: dict[str, dict] = {
    "lastfm": {
        "types": [("user", 2155), ("item", 4310), ("entity", 8619)],
        "target": 0,
        "relations": [(0, 1), (1, 2)],
        "classes": 3,
    },
    "book-crossing": {
        "types": [("user", 15820), ("item", 31640), ("entity", 63279)],
        "target": 0,
        "relations": [(0, 1), (1, 2)],
        "classes": 3,
    },
    "acm": {
        "types": [("subject", 56), ("author", 5835), ("paper", 3025)],
        "target": 2,
        "relations": [(2, 1), (2, 0)],
        "classes": 3,
    },
    "imdb": {
        "types": [("director", 2269), ("movie", 4780), ("actor", 5841)],
        "target": 1,
        "relations": [(1, 2), (1, 0)],
        "classes": 3,
    },
    "dblp": {
        "types": [("term", 8789), ("paper", 14328), ("conference", 20), ("author", 4057)],
        "target": 3,
        "relations": [(1, 3), (1, 2), (1, 0)],
        "classes": 4,
    },
}


@dataclass(frozen=True)
class _RelationPlan:
    src_type: int
    dst_type: int
    p_intra: float
    p_inter: float
    directed: bool = False


def _resolve_shape(cfg: SynthConfig) -> tuple[list[int], list[str], int, list[_RelationPlan], int]:
    if cfg.preset is None:
        names = [f"t{t}" for t in range(len(cfg.node_counts))]
        plans = [_RelationPlan(r.src_type, r.dst_type, r.p_intra, r.p_inter, r.directed) for r in cfg.relations]
        return list(cfg.node_counts), names, cfg.target_type, plans, cfg.communities

    preset = DATASET_PRESETS[cfg.preset]
    classes = preset["classes"]
    counts = [max(2 * classes, int(round(count * cfg.scale))) for _, count in preset["types"]]
    names = [name for name, _ in preset["types"]]
    # 预设关系统一使用第一条配置关系的概率
    base = cfg.relations[0]
    plans = [_RelationPlan(src, dst, base.p_intra, base.p_inter) for src, dst in preset["relations"]]
    return counts, names, preset["target"], plans, classes


def _balanced_communities(count: int, communities: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(count) % communities)


def _planted_block(
    src_comm: np.ndarray, dst_comm: np.ndarray, plan: _RelationPlan, communities: int, rng: np.random.Generator
) -> sp.csr_matrix:
    """社区块模型：每个 (社区a, 社区b) 块内按二项分布抽边数，再无放回选位置。"""
    rows_all: list[np.ndarray] = []
    cols_all: list[np.ndarray] = []
    for a in range(communities):
        src_nodes = np.flatnonzero(src_comm == a)
        for b in range(communities):
            dst_nodes = np.flatnonzero(dst_comm == b)
            cells = len(src_nodes) * len(dst_nodes)
            if cells == 0:
                continue
            p = plan.p_intra if a == b else plan.p_inter
            k = int(rng.binomial(cells, p))
            if k == 0:
                continue
            flat = rng.choice(cells, size=k, replace=False)
            rows_all.append(src_nodes[flat // len(dst_nodes)])
            cols_all.append(dst_nodes[flat % len(dst_nodes)])
    shape = (len(src_comm), len(dst_comm))
    if not rows_all:
        return sp.csr_matrix(shape, dtype=bool)
    rows = np.concatenate(rows_all)
    cols = np.concatenate(cols_all)
    matrix = sp.csr_matrix((np.ones(len(rows), dtype=bool), (rows, cols)), shape=shape)
    return as_bool_csr(matrix)


def auto_metapaths(
    relations: Sequence[Relation], target_type: int, names: dict[int, str] | None = None
) -> list[MetapathSpec]:
    """对称元路径：先每条与目标类型相连的关系一条 2 跳，再经中间类型间关系的 4 跳。"""
    names = names or {}

    def label(types: list[int]) -> str:
        return "-".join(names.get(t, f"t{t}") for t in types)

    outward: list[tuple[Relation, Hop, Hop, int]] = []
    for rel in sorted(relations, key=lambda r: r.edge_type):
        if rel.src_type == rel.dst_type:
            continue
        if rel.src_type == target_type:
            outward.append((rel, Hop(rel.edge_type, False), Hop(rel.edge_type, True), rel.dst_type))
        elif rel.dst_type == target_type:
            outward.append((rel, Hop(rel.edge_type, True), Hop(rel.edge_type, False), rel.src_type))

    specs: list[MetapathSpec] = []
    for _, go, back, mid in outward:
        specs.append(MetapathSpec(id=len(specs), hops=(go, back), name=label([target_type, mid, target_type])))
    for _, go, back, mid in outward:
        for rel in sorted(relations, key=lambda r: r.edge_type):
            if target_type in (rel.src_type, rel.dst_type) or rel.src_type == rel.dst_type:
                continue
            if rel.src_type == mid:
                inner, outer, far = Hop(rel.edge_type, False), Hop(rel.edge_type, True), rel.dst_type
            elif rel.dst_type == mid:
                inner, outer, far = Hop(rel.edge_type, True), Hop(rel.edge_type, False), rel.src_type
            else:
                continue
            specs.append(
                MetapathSpec(
                    id=len(specs),
                    hops=(go, inner, outer, back),
                    name=label([target_type, mid, far, mid, target_type]),
                )
            )
    return specs


def generate_synthetic(cfg: SynthConfig) -> GraphBundle:
    """社区植入的合成异构图；同一 seed 得到逐位相同的结果。"""
    counts, type_names, target, plans, communities = _resolve_shape(cfg)
    rng = derive_rng(cfg.seed, 100)
    comm = {t: _balanced_communities(c, communities, rng) for t, c in enumerate(counts)}

    relations = []
    for edge_type, plan in enumerate(plans):
        matrix = _planted_block(comm[plan.src_type], comm[plan.dst_type], plan, communities, rng)
        if plan.src_type == plan.dst_type and not plan.directed:
            matrix = as_bool_csr(sp.triu(matrix, k=1))
        relations.append(Relation(edge_type, plan.src_type, plan.dst_type, matrix, plan.directed))

    n = counts[target]
    labels = comm[target].astype(np.int64)
    features = np.zeros((n, communities + cfg.extra_feature_dims))
    features[np.arange(n), labels] = 1.0
    if cfg.noise > 0:
        features = features + cfg.noise * rng.standard_normal(features.shape)

    names = dict(enumerate(type_names))
    graph = HetGraph(
        node_counts={t: c for t, c in enumerate(counts)},
        relations=tuple(relations),
        target_type=target,
        features=features,
        labels=labels,
        node_names=names,
        num_classes=communities,
    ).validate()

    metapaths = auto_metapaths(relations, target, names)
    if not metapaths:
        raise GraphFormatError("synthetic configuration has no relation incident to the target type")
    if cfg.metapath_count is not None:
        metapaths = metapaths[: cfg.metapath_count]
    _LOG.info(
        "合成图: 节点 %s，关系 %d 条（边数 %s），元路径 %s",
        counts,
        len(relations),
        [int(r.matrix.nnz) for r in relations],
        [m.name for m in metapaths],
    )
    return GraphBundle(graph=graph, metapaths=metapaths)
