"""
模型：编码器 + 主任务头 θ₁ + 每条元路径的辅助任务头 θ₂ + 贡献网络 λ

- link_score:       sigmoid(mlp(z_i ⊙ z_j))
- node_logits:      softmax(mlp(z_i))
- pretext_predict:  affine(|z_i − z_j|)，回归输出 1 维，分类变体输出 j_max 维
- contribution:     sigmoid(W2 relu(W1 φ + b1) + b2)，φ = |z_i − z_j|

检查点为单个二进制文件：magic `SESIM1`，u32 数组个数，
每个数组 u32 行数、u32 列数、小端 float64 行主序数值。
"""

from __future__ import annotations

import logging
import struct
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from . import CHECKPOINT_MAGIC
from .autodiff import (
    Module,
    Tensor,
    abs_,
    add,
    matmul,
    mul,
    parameter,
    relu,
    sigmoid,
    softmax_rows,
    sub,
)
from .encoders import GraphEncoder, get_encoder, glorot_uniform
from .errors import ArgumentError, ArtifactMismatchError
from .utils import derive_rng, ensure_parent_dir

_LOG = logging.getLogger(__name__)

Task = Literal["link", "node"]
PretextMode = Literal["regression", "classification"]


@dataclass(eq=False)
class PrimaryHead(Module):
    """θ₁：两层仿射，隐藏层 relu。"""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    def mlp(self, h: Tensor) -> Tensor:
        if h.shape[1] != self.w1.shape[0]:
            raise ArgumentError(f"primary head expects width {self.w1.shape[0]}, got {h.shape[1]}")
        hidden = relu(add(matmul(h, self.w1), self.b1))
        return add(matmul(hidden, self.w2), self.b2)


@dataclass(eq=False)
class PretextHead(Module):
    """θ₂^{M_d}：单层仿射。"""

    w: Tensor
    b: Tensor


@dataclass(eq=False)
class ContributionNet(Module):
    """λ：l → hidden (relu) → 1 (sigmoid)。"""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def _affine_params(
    rng: np.random.Generator, fan_in: int, fan_out: int, prefix: str
) -> tuple[Tensor, Tensor]:
    return (
        parameter(glorot_uniform(rng, fan_in, fan_out), name=f"{prefix}.w"),
        parameter(np.zeros((1, fan_out)), name=f"{prefix}.b"),
    )


def init_primary_head(
    rng: np.random.Generator, embedding_dim: int, hidden: int, out_dim: int
) -> PrimaryHead:
    w1, b1 = _affine_params(rng, embedding_dim, hidden, "primary.1")
    w2, b2 = _affine_params(rng, hidden, out_dim, "primary.2")
    return PrimaryHead(w1=w1, b1=b1, w2=w2, b2=b2)


def init_pretext_head(
    rng: np.random.Generator, embedding_dim: int, out_dim: int, metapath_id: int
) -> PretextHead:
    w, b = _affine_params(rng, embedding_dim, out_dim, f"pretext[{metapath_id}]")
    return PretextHead(w=w, b=b)


def init_contribution_net(
    rng: np.random.Generator, embedding_dim: int, hidden: int
) -> ContributionNet:
    w1, b1 = _affine_params(rng, embedding_dim, hidden, "contribution.1")
    w2, b2 = _affine_params(rng, hidden, 1, "contribution.2")
    return ContributionNet(w1=w1, b1=b1, w2=w2, b2=b2)


# ============ 前向 ============


def link_score(z_i: Tensor, z_j: Tensor, head: PrimaryHead) -> Tensor:
    """每行一个节点对的连边概率，k×1。"""
    if z_i.shape != z_j.shape:
        raise ArgumentError(f"link_score: embedding shapes differ {z_i.shape} vs {z_j.shape}")
    return sigmoid(head.mlp(mul(z_i, z_j)))


def node_logits(z: Tensor, head: PrimaryHead) -> Tensor:
    """未归一化的类别分数；交叉熵直接作用于它。"""
    return head.mlp(z)


def node_probabilities(z: Tensor, head: PrimaryHead) -> Tensor:
    return softmax_rows(node_logits(z, head))


def pair_feature(z_i: Tensor, z_j: Tensor) -> Tensor:
    """φ = |z_i − z_j|，同时是辅助任务头和贡献网络的输入。"""
    if z_i.shape != z_j.shape:
        raise ArgumentError(f"pair_feature: embedding shapes differ {z_i.shape} vs {z_j.shape}")
    return abs_(sub(z_i, z_j))


def pretext_output(phi: Tensor, head: PretextHead) -> Tensor:
    return add(matmul(phi, head.w), head.b)


def pretext_predict(z_i: Tensor, z_j: Tensor, head: PretextHead) -> Tensor:
    return pretext_output(pair_feature(z_i, z_j), head)


def contribution(phi: Tensor, net: ContributionNet) -> Tensor:
    """逐样本贡献权重，取值严格在 (0, 1)。"""
    hidden = relu(add(matmul(phi, net.w1), net.b1))
    return sigmoid(add(matmul(hidden, net.w2), net.b2))


# ============ 模型状态 ============


@dataclass(eq=False)
class ModelState:
    encoder: GraphEncoder
    primary: PrimaryHead
    pretext: dict[int, PretextHead]
    contribution: ContributionNet
    task: Task = "link"
    pretext_mode: PretextMode = "regression"

    @property
    def metapath_ids(self) -> list[int]:
        return sorted(self.pretext)

    @property
    def embedding_dim(self) -> int:
        return self.encoder.out_dim

    def w_parameters(self) -> list[Tensor]:
        """w = (编码器, θ₁, θ₂ 按元路径 id 升序)，顺序与检查点一致。"""
        params = self.encoder.parameters() + self.primary.parameters()
        for mid in self.metapath_ids:
            params.extend(self.pretext[mid].parameters())
        return params

    def lambda_parameters(self) -> list[Tensor]:
        return self.contribution.parameters()

    def all_parameters(self) -> list[Tensor]:
        return self.w_parameters() + self.lambda_parameters()

    def with_w(self, values: Sequence[np.ndarray]) -> ModelState:
        """w 替换为给定数值（新的叶子张量），λ 原样共享。"""
        values = list(values)
        if len(values) != len(self.w_parameters()):
            raise ArgumentError(f"expected {len(self.w_parameters())} w arrays, got {len(values)}")
        offset = 0

        def take(module: Module) -> Module:
            nonlocal offset
            count = len(module.parameters())
            chunk = values[offset : offset + count]
            offset += count
            return module.with_values(chunk)

        encoder = take(self.encoder)
        primary = take(self.primary)
        pretext = {mid: take(self.pretext[mid]) for mid in self.metapath_ids}
        return ModelState(
            encoder=encoder,  # type: ignore[arg-type]
            primary=primary,  # type: ignore[arg-type]
            pretext=pretext,  # type: ignore[arg-type]
            contribution=self.contribution,
            task=self.task,
            pretext_mode=self.pretext_mode,
        )

    def with_lambda(self, values: Sequence[np.ndarray]) -> ModelState:
        return ModelState(
            encoder=self.encoder,
            primary=self.primary,
            pretext=self.pretext,
            contribution=self.contribution.with_values(values),  # type: ignore[arg-type]
            task=self.task,
            pretext_mode=self.pretext_mode,
        )

    def arrays(self) -> list[np.ndarray]:
        return [p.value for p in self.all_parameters()]


def init_model_state(
    in_dim: int,
    metapath_ids: Sequence[int],
    *,
    seed: int,
    task: Task = "link",
    num_classes: int = 0,
    pretext_mode: PretextMode = "regression",
    j_max: int = 4,
    encoder: str = "gcn",
    hidden_dim: int = 512,
    embedding_dim: int = 16,
    head_hidden: int = 100,
    contribution_hidden: int = 1000,
) -> ModelState:
    """Glorot 均匀初始化权重、零偏置；同一 seed 得到相同的初始状态。"""
    if task == "node" and num_classes < 2:
        raise ArgumentError(f"node classification needs at least 2 classes, got {num_classes}")
    rng = derive_rng(seed, 0)
    enc = get_encoder(encoder).initialize(in_dim, hidden_dim, embedding_dim, rng)
    out_dim = 1 if task == "link" else num_classes
    primary = init_primary_head(rng, embedding_dim, head_hidden, out_dim)
    pretext_dim = 1 if pretext_mode == "regression" else j_max
    pretext = {
        int(mid): init_pretext_head(rng, embedding_dim, pretext_dim, int(mid))
        for mid in sorted(metapath_ids)
    }
    con = init_contribution_net(rng, embedding_dim, contribution_hidden)
    return ModelState(
        encoder=enc, primary=primary, pretext=pretext, contribution=con, task=task, pretext_mode=pretext_mode
    )


# ============ 检查点 ============


def save_checkpoint(state: ModelState, path: str | Path) -> None:
    ensure_parent_dir(path)
    arrays = state.arrays()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(arrays))]
    for arr in arrays:
        rows, cols = arr.shape
        chunks.append(struct.pack("<II", rows, cols))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))
    _LOG.info("检查点已写入 %s（%d 个参数数组）", path, len(arrays))


def read_checkpoint_arrays(path: str | Path) -> list[np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise ArtifactMismatchError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ArtifactMismatchError(f"{path}: not a checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    try:
        (count,) = struct.unpack_from("<I", data, offset)
        offset += 4
        arrays = []
        for _ in range(count):
            rows, cols = struct.unpack_from("<II", data, offset)
            offset += 8
            size = rows * cols * 8
            if offset + size > len(data):
                raise ArtifactMismatchError(f"{path}: truncated checkpoint")
            values = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=offset)
            arrays.append(values.reshape(rows, cols).astype(np.float64))
            offset += size
    except struct.error as e:
        raise ArtifactMismatchError(f"{path}: truncated checkpoint") from e
    if offset != len(data):
        raise ArtifactMismatchError(f"{path}: trailing bytes after {count} arrays")
    return arrays


def load_checkpoint(
    path: str | Path,
    metapath_ids: Sequence[int],
    *,
    task: Task = "link",
    pretext_mode: PretextMode = "regression",
    encoder: str = "gcn",
) -> ModelState:
    """按固定顺序还原 ModelState；数组个数或形状不衔接时抛出 ArtifactMismatchError。"""
    arrays = read_checkpoint_arrays(path)
    ids = sorted(int(m) for m in metapath_ids)
    expected = 2 + 4 + 2 * len(ids) + 4
    if len(arrays) != expected:
        raise ArtifactMismatchError(
            f"{path}: {len(arrays)} arrays, expected {expected} for {len(ids)} metapaths"
        )
    w0, w1 = arrays[0], arrays[1]
    p1w, p1b, p2w, p2b = arrays[2:6]
    pre = arrays[6 : 6 + 2 * len(ids)]
    c1w, c1b, c2w, c2b = arrays[6 + 2 * len(ids) :]

    emb = w1.shape[1]
    checks = [
        (w0.shape[1] == w1.shape[0], "encoder hidden dims"),
        (p1w.shape[0] == emb and p1b.shape == (1, p1w.shape[1]), "primary layer 1"),
        (p2w.shape[0] == p1w.shape[1] and p2b.shape == (1, p2w.shape[1]), "primary layer 2"),
        (c1w.shape[0] == emb and c1b.shape == (1, c1w.shape[1]), "contribution layer 1"),
        (c2w.shape == (c1w.shape[1], 1) and c2b.shape == (1, 1), "contribution layer 2"),
    ]
    for k in range(len(ids)):
        w, b = pre[2 * k], pre[2 * k + 1]
        checks.append((w.shape[0] == emb and b.shape == (1, w.shape[1]), f"pretext head {ids[k]}"))
    for ok, what in checks:
        if not ok:
            raise ArtifactMismatchError(f"{path}: inconsistent shapes in {what}")
    if task == "link" and p2w.shape[1] != 1:
        raise ArtifactMismatchError(f"{path}: primary head has {p2w.shape[1]} outputs, link task needs 1")

    template = init_model_state(
        w0.shape[0],
        ids,
        seed=0,
        task=task,
        num_classes=max(2, p2w.shape[1]),
        pretext_mode=pretext_mode,
        j_max=pre[0].shape[1] if ids else 4,
        encoder=encoder,
        hidden_dim=w0.shape[1],
        embedding_dim=emb,
        head_hidden=p1w.shape[1],
        contribution_hidden=c1w.shape[1],
    )
    n_w = len(template.w_parameters())
    try:
        return template.with_w(arrays[:n_w]).with_lambda(arrays[n_w:])
    except ArgumentError as e:
        raise ArtifactMismatchError(f"{path}: {e}") from e
