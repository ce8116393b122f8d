"""
Pytest fixtures for SESIM tests.
"""

import tempfile
from collections.abc import Generator
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp

from sesim.config_manager import TrainConfig
from sesim.graph import CollapsedAdj, HetGraph, Hop, MetapathSpec, Relation, as_bool_csr


def path_adjacency(n: int, metapath_id: int = 0) -> CollapsedAdj:
    """0-1-2-...-(n-1) 的无向路径图。"""
    rows = np.arange(n - 1)
    m = sp.coo_matrix((np.ones(n - 1, dtype=bool), (rows, rows + 1)), shape=(n, n))
    return CollapsedAdj(metapath_id=metapath_id, matrix=as_bool_csr(m + m.T))


def adjacency_from_edges(n: int, edges: list[tuple[int, int]], metapath_id: int = 0) -> CollapsedAdj:
    rows = np.array([e[0] for e in edges], dtype=np.int64)
    cols = np.array([e[1] for e in edges], dtype=np.int64)
    m = sp.coo_matrix((np.ones(len(edges), dtype=bool), (rows, cols)), shape=(n, n))
    return CollapsedAdj(metapath_id=metapath_id, matrix=as_bool_csr(m + m.T))


def small_train_config(**overrides) -> TrainConfig:
    """小维度、少轮数的训练配置，单测秒级完成。"""
    values = {
        "epochs": 2,
        "batch_size": 32,
        "val_batch_size": 32,
        "hidden_dim": 8,
        "embedding_dim": 4,
        "head_hidden": 6,
        "contribution_hidden": 10,
        "seed": 3,
    }
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture
def temp_dir() -> Generator[Path, None, None]:
    """创建临时目录。"""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def paper_author_graph() -> HetGraph:
    """论文(类型0, 4个) - 作者(类型1, 3个) 二部图，外加一种空的论文-主题关系。

    作者 0 写了论文 0、1；作者 1 写了论文 1、2；作者 2 写了论文 3。
    """
    writes = sp.csr_matrix(
        (np.ones(5, dtype=bool), ([0, 1, 1, 2, 3], [0, 0, 1, 1, 2])),
        shape=(4, 3),
    )
    subjects = sp.csr_matrix((4, 2), dtype=bool)
    features = np.arange(8, dtype=np.float64).reshape(4, 2) / 10.0
    return HetGraph(
        node_counts={0: 4, 1: 3, 2: 2},
        relations=(
            Relation(0, 0, 1, as_bool_csr(writes)),
            Relation(1, 0, 2, as_bool_csr(subjects)),
        ),
        target_type=0,
        features=features,
        labels=np.array([0, 0, 1, 1]),
        node_names={0: "paper", 1: "author", 2: "subject"},
        num_classes=2,
    ).validate()


@pytest.fixture
def pap() -> MetapathSpec:
    """论文-作者-论文。"""
    return MetapathSpec(id=0, hops=(Hop(0, False), Hop(0, True)), name="P-A-P")


@pytest.fixture
def psp() -> MetapathSpec:
    """论文-主题-论文（边为空）。"""
    return MetapathSpec(id=1, hops=(Hop(1, False), Hop(1, True)), name="P-S-P")
