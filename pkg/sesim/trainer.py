"""
联合自监督训练

每个训练步:
    1. 采样验证批与训练批（主任务 + 各元路径的伪标签对）
    2. virtual_step:        ŵ = w − α∇_w(L_pri + Σ_d mean_i c_{d,i}·ℓ_{d,i})，普通 SGD，不修改 w
    3. meta_update_lambda:  λ' = λ − β∇_λ L_val(ŵ(λ))
    4. actual_step:         在原始 w 上对 L_pri + Σ Con(·; λ')·L_pre 做一步 Adam

贡献权重的输入 φ 对 w 取常量，因此 ŵ 关于 c_{d,i} 是线性的：
    ∂L_val/∂c_{d,i} = −α · vᵀ∇_w ℓ_{d,i} / m_d,   v = ∇_w L_val(ŵ)
vᵀ∇_w ℓ_{d,i} 对全部样本由一次前向模式（tangent = v）得到，不需要逐样本反传。
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .autodiff import (
    Tensor,
    Tape,
    add,
    bce,
    constant,
    cross_entropy,
    detach,
    gather_rows,
    grad_of,
    mean,
    mse,
    mul,
    no_tape,
    sum_,
)
from .config_manager import PairSamplerConfig, TrainConfig
from .errors import ArgumentError, ConfigError, NumericError, StateError, UndefinedMetricError
from .graph import (
    CollapsedAdj,
    HetGraph,
    MetapathSpec,
    collapse_all,
    normalize_adj,
    reach_powers,
    remove_pairs,
    union_adjacency,
    upper_pairs,
)
from .metrics import auc, macro_f1, micro_f1
from .model import (
    ModelState,
    contribution,
    init_model_state,
    link_score,
    node_logits,
    pair_feature,
    pretext_output,
)
from .pseudolabel import JumpLabelSet, build_label_set, label_row, max_order
from .utils import derive_rng, ensure_parent_dir, format_real

_LOG = logging.getLogger(__name__)

# 随机流编号，配合 derive_rng(seed, stream, ...) 使用
_SPLIT_STREAM = 1
_VAL_NEG_STREAM = 2
_TEST_NEG_STREAM = 3
_TRAIN_NEG_STREAM = 4
_BATCH_STREAMS = {"train": 11, "val": 12, "test": 13}
_PRETEXT_STREAM = 21
_VAL_PRETEXT_STREAM = 22


# ============ 数据划分 ============


def _pair_codes(pairs: np.ndarray, n: int) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    return lo * n + hi


def sample_negative_pairs(
    n: int, count: int, forbidden: set[int], rng: np.random.Generator
) -> np.ndarray:
    """均匀采样 count 个互不相同、且不在 forbidden 中的无向节点对 (i<j)。"""
    capacity = n * (n - 1) // 2 - len(forbidden)
    if count > capacity:
        raise ConfigError(f"cannot draw {count} negative pairs, only {capacity} non-edges exist")
    chosen: list[int] = []
    seen: set[int] = set()
    while len(chosen) < count:
        draw = 2 * (count - len(chosen)) + 8
        for a, b in zip(rng.integers(0, n, size=draw).tolist(), rng.integers(0, n, size=draw).tolist()):
            if a == b:
                continue
            code = min(a, b) * n + max(a, b)
            if code in forbidden or code in seen:
                continue
            seen.add(code)
            chosen.append(code)
            if len(chosen) == count:
                break
    codes = np.asarray(chosen, dtype=np.int64)
    return np.stack([codes // n, codes % n], axis=1) if count else np.zeros((0, 2), dtype=np.int64)


def _split_sizes(total: int, cfg: TrainConfig, what: str) -> tuple[int, int]:
    n_train = max(1, int(math.floor(cfg.train_fraction * total)))
    n_val = max(1, int(math.floor(cfg.val_fraction * total)))
    if n_train + n_val >= total:
        raise ConfigError(
            f"{total} {what} cannot be split into non-empty train/val/test "
            f"with fractions {cfg.train_fraction}/{cfg.val_fraction}"
        )
    return n_train, n_val


@dataclass(eq=False)
class SplitData:
    """主任务样本划分与训练用伪标签。

    link 任务中 train/val/test 是正样本对 (k,2)，验证/测试负样本固定，
    训练负样本每个 epoch 重新采样；node 任务中它们是节点下标。
    """

    task: str
    n: int
    seed: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    labels: JumpLabelSet
    encoder_adj: sp.csr_matrix
    val_negatives: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    test_negatives: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    node_labels: np.ndarray | None = None
    num_classes: int = 0
    _forbidden: set[int] = field(default_factory=set, repr=False)

    def population(self, which: str) -> int:
        items = self._positives(which)
        return 2 * len(items) if self.task == "link" else len(items)

    def _positives(self, which: str) -> np.ndarray:
        if which not in ("train", "val", "test"):
            raise ArgumentError(f"unknown split {which!r}")
        return getattr(self, which)

    def train_negatives(self, epoch: int) -> np.ndarray:
        rng = derive_rng(self.seed, _TRAIN_NEG_STREAM, epoch)
        return sample_negative_pairs(self.n, len(self.train), self._forbidden, rng)

    def samples(self, which: str, epoch: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """(items, targets)。link 任务正样本在前、负样本在后。"""
        positives = self._positives(which)
        if self.task == "node":
            assert self.node_labels is not None
            return positives, self.node_labels[positives]
        if which == "train":
            negatives = self.train_negatives(epoch)
        else:
            negatives = self.val_negatives if which == "val" else self.test_negatives
        items = np.concatenate([positives, negatives], axis=0)
        targets = np.concatenate([np.ones(len(positives)), np.zeros(len(negatives))])
        return items, targets


def _empty_labels(j_max: int, ids: Sequence[int]) -> JumpLabelSet:
    return JumpLabelSet(
        entries=np.zeros((0, 4), dtype=np.int64),
        j_max=j_max,
        metapath_ids=tuple(sorted(ids)),
        empty_metapaths=tuple(sorted(ids)),
    )


def _select_labels(labels: JumpLabelSet, ids: Sequence[int], keep: np.ndarray | None = None) -> JumpLabelSet:
    mask = np.isin(labels.entries[:, 2], list(ids))
    if keep is not None:
        mask &= keep
    kept = labels.restrict(mask)
    return JumpLabelSet(
        entries=kept.entries,
        j_max=labels.j_max,
        metapath_ids=tuple(sorted(ids)),
        empty_metapaths=tuple(m for m in sorted(ids) if not np.any(kept.entries[:, 2] == m)),
    )


def labels_agreeing_with(labels: JumpLabelSet, adjs: Sequence[CollapsedAdj]) -> np.ndarray:
    """布尔掩码：该行的 ŷ 与在 adjs 上重新计算的跳数伪标签一致。

    在完整图上构造的伪标签可能经由留出边得到，训练图上需逐行复核。
    """
    keep = np.zeros(len(labels), dtype=bool)
    if not len(labels):
        return keep
    entries = labels.entries
    for adj in adjs:
        rows = np.flatnonzero(entries[:, 2] == adj.metapath_id)
        if rows.size == 0:
            continue
        inside = (entries[rows, :2].max(axis=1) < adj.n) & (entries[rows, :2].min(axis=1) >= 0)
        rows = rows[inside]
        powers = [sp.csr_matrix(p, dtype=np.int64) for p in reach_powers(adj, max_order(labels.j_max))]
        for i in np.unique(entries[rows, 0]):
            sel = rows[entries[rows, 0] == i]
            row = label_row(adj, powers, int(i), labels.j_max)
            keep[sel] = row[entries[sel, 1]] == entries[sel, 3]
    return keep


def build_split(
    graph: HetGraph,
    adjs: Sequence[CollapsedAdj],
    cfg: TrainConfig,
    *,
    labels: JumpLabelSet | None = None,
    sampler: PairSamplerConfig | None = None,
    threads: int = 1,
    build_labels: bool = True,
) -> SplitData:
    """按 seed 划分主任务样本，并得到不泄漏留出边的伪标签集合。"""
    if not adjs:
        raise ConfigError("at least one metapath is required")
    n = graph.n
    ids = [a.metapath_id for a in adjs]
    sampler = sampler or PairSamplerConfig(seed=cfg.seed)
    rng = derive_rng(cfg.seed, _SPLIT_STREAM)

    if cfg.task == "link":
        positives = upper_pairs(union_adjacency(adjs))
        n_train, n_val = _split_sizes(len(positives), cfg, "positive pairs")
        perm = rng.permutation(len(positives))
        train = positives[np.sort(perm[:n_train])]
        val = positives[np.sort(perm[n_train : n_train + n_val])]
        test = positives[np.sort(perm[n_train + n_val :])]
        held = np.concatenate([val, test], axis=0)

        train_adjs = [remove_pairs(a, held) for a in adjs]
        encoder_adj = union_adjacency(train_adjs)
        if not build_labels:
            pretext = _empty_labels(cfg.j_max, ids)
        else:
            if labels is None:
                full = build_label_set(train_adjs, sampler, cfg.j_max, threads=threads)
                keep = np.ones(len(full), dtype=bool)
            else:
                full = labels
                keep = labels_agreeing_with(full, train_adjs)
                dropped = int(np.count_nonzero(np.isin(full.entries[:, 2], ids) & ~keep))
                if dropped:
                    _LOG.warning("%d 个给定伪标签与去除留出边后的训练图不一致，已丢弃", dropped)
            # 留出边在训练图上不再相邻，可能被采成伪标签对
            keep &= ~np.isin(_pair_codes(full.entries[:, :2], n), _pair_codes(held, n))
            pretext = _select_labels(full, ids, keep)

        forbidden = set(_pair_codes(positives, n).tolist())
        val_neg = sample_negative_pairs(n, len(val), forbidden, derive_rng(cfg.seed, _VAL_NEG_STREAM))
        forbidden |= set(_pair_codes(val_neg, n).tolist())
        test_neg = sample_negative_pairs(n, len(test), forbidden, derive_rng(cfg.seed, _TEST_NEG_STREAM))
        forbidden |= set(_pair_codes(test_neg, n).tolist())
        _LOG.info(
            "链接划分: 训练 %d / 验证 %d / 测试 %d 正样本，%d 个伪标签对",
            len(train),
            len(val),
            len(test),
            len(pretext),
        )
        return SplitData(
            task="link",
            n=n,
            seed=cfg.seed,
            train=train,
            val=val,
            test=test,
            labels=pretext,
            encoder_adj=encoder_adj,
            val_negatives=val_neg,
            test_negatives=test_neg,
            _forbidden=forbidden,
        )

    if graph.labels is None or graph.num_classes < 2:
        raise ConfigError("node classification needs labels.tsv and at least 2 classes")
    n_train, n_val = _split_sizes(n, cfg, "labeled nodes")
    perm = rng.permutation(n)
    train = np.sort(perm[:n_train])
    val = np.sort(perm[n_train : n_train + n_val])
    test = np.sort(perm[n_train + n_val :])
    if not build_labels:
        pretext = _empty_labels(cfg.j_max, ids)
    else:
        full = labels if labels is not None else build_label_set(adjs, sampler, cfg.j_max, threads=threads)
        pretext = _select_labels(full, ids, np.isin(full.entries[:, 0], train))
    _LOG.info(
        "节点划分: 训练 %d / 验证 %d / 测试 %d 节点，%d 个伪标签对",
        len(train),
        len(val),
        len(test),
        len(pretext),
    )
    return SplitData(
        task="node",
        n=n,
        seed=cfg.seed,
        train=train,
        val=val,
        test=test,
        labels=pretext,
        encoder_adj=union_adjacency(adjs),
        node_labels=np.asarray(graph.labels, dtype=np.int64),
        num_classes=graph.num_classes,
    )


@dataclass(eq=False)
class GraphInputs:
    x: Tensor
    a_norm: Tensor

    @classmethod
    def from_split(cls, graph: HetGraph, split: SplitData, dense_cap: int = 4096) -> GraphInputs:
        if graph.n > dense_cap:
            raise ConfigError(f"{graph.n} target nodes exceed the dense adjacency cap {dense_cap}")
        return cls(x=constant(graph.features), a_norm=constant(normalize_adj(split.encoder_adj)))


# ============ 小批量采样 ============


def _window(population: int, size: int, seed: int, step: int, *stream: int) -> np.ndarray:
    """第 step 步的批：该 epoch 随机排列中的一段连续窗口。"""
    if population <= 0:
        raise ConfigError("cannot sample a batch from an empty split")
    if size < 1:
        raise ArgumentError(f"batch size must be >= 1, got {size}")
    steps_per_epoch = max(1, math.ceil(population / size))
    epoch, offset = divmod(step, steps_per_epoch)
    perm = derive_rng(seed, *stream, epoch).permutation(population)
    return perm[offset * size : (offset + 1) * size]


def minibatch_sampler(split: SplitData, which: str, size: int, seed: int, step: int) -> np.ndarray:
    """split.samples(which) 中的样本下标；(seed, step) 相同则结果相同。"""
    return _window(split.population(which), size, seed, step, _BATCH_STREAMS[which])


def allocate_pretext(counts: dict[int, int], size: int) -> dict[int, int]:
    """按各元路径伪标签数量比例分配批大小（最大余数法）。"""
    total = sum(counts.values())
    if total == 0:
        return {mid: 0 for mid in counts}
    budget = min(size, total)
    shares = {mid: budget * c / total for mid, c in counts.items()}
    alloc = {mid: min(counts[mid], int(math.floor(s))) for mid, s in shares.items()}
    order = sorted(counts, key=lambda mid: (-(shares[mid] - math.floor(shares[mid])), mid))
    remaining = budget - sum(alloc.values())
    while remaining > 0:
        progressed = False
        for mid in order:
            if remaining == 0:
                break
            if alloc[mid] < counts[mid]:
                alloc[mid] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            break
    return alloc


@dataclass(eq=False)
class PretextBatch:
    pairs: dict[int, np.ndarray] = field(default_factory=dict)
    y: dict[int, np.ndarray] = field(default_factory=dict)

    def __bool__(self) -> bool:
        return any(len(p) for p in self.pairs.values())


def pretext_sampler(
    labels: JumpLabelSet, size: int, seed: int, step: int, *, stream: int = _PRETEXT_STREAM
) -> PretextBatch:
    batch = PretextBatch()
    for mid, take in sorted(allocate_pretext(labels.counts(), size).items()):
        if take == 0:
            continue
        pairs, y = labels.for_metapath(mid)
        idx = _window(len(pairs), take, seed, step, stream, mid)
        batch.pairs[mid] = pairs[idx]
        batch.y[mid] = y[idx]
    return batch


@dataclass(eq=False)
class PrimaryBatch:
    items: np.ndarray
    targets: np.ndarray


@dataclass(eq=False)
class StepBatch:
    primary: PrimaryBatch
    pretext: PretextBatch = field(default_factory=PretextBatch)


# ============ 损失 ============


def encode(state: ModelState, inputs: GraphInputs) -> Tensor:
    return state.encoder.forward(inputs.x, inputs.a_norm)


def primary_loss(state: ModelState, z: Tensor, batch: PrimaryBatch, reduction: str = "mean") -> Tensor:
    if state.task == "link":
        items = np.asarray(batch.items, dtype=np.int64).reshape(-1, 2)
        scores = link_score(gather_rows(z, items[:, 0]), gather_rows(z, items[:, 1]), state.primary)
        return bce(scores, batch.targets.reshape(-1, 1), reduction)  # type: ignore[arg-type]
    logits = node_logits(gather_rows(z, batch.items), state.primary)
    return cross_entropy(logits, batch.targets, reduction)  # type: ignore[arg-type]


def pretext_losses(
    state: ModelState, z: Tensor, metapath_id: int, pairs: np.ndarray, y: np.ndarray
) -> tuple[Tensor, Tensor]:
    """逐样本辅助任务损失 (k×1) 与 φ。"""
    phi = pair_feature(gather_rows(z, pairs[:, 0]), gather_rows(z, pairs[:, 1]))
    out = pretext_output(phi, state.pretext[metapath_id])
    if state.pretext_mode == "classification":
        return cross_entropy(out, np.asarray(y) - 1, "none"), phi
    return mse(out, np.asarray(y, dtype=np.float64).reshape(-1, 1), "none"), phi


def contribution_values(state: ModelState, phi: np.ndarray) -> np.ndarray:
    with no_tape():
        return contribution(Tensor(phi), state.contribution).value


@dataclass(eq=False)
class PretextTerm:
    metapath_id: int
    pairs: np.ndarray
    y: np.ndarray
    losses: Tensor
    weights: np.ndarray
    weighted: Tensor
    phi: np.ndarray


@dataclass(eq=False)
class JointLoss:
    primary: Tensor
    terms: list[PretextTerm]
    pretext_total: Tensor | None
    total: Tensor

    def pretext_value(self) -> float:
        return self.pretext_total.item() if self.pretext_total is not None else 0.0


def joint_loss(
    state: ModelState,
    inputs: GraphInputs,
    batch: StepBatch,
    *,
    weights: dict[int, np.ndarray] | None = None,
    con_override: float | None = None,
) -> JointLoss:
    """L_pri + Σ_d mean_i Con(φ_i; λ)·ℓ_{d,i}。

    贡献权重按当前 λ 计算且对 w 取常量；weights / con_override 可直接给出权重。
    """
    z = encode(state, inputs)
    l_pri = primary_loss(state, z, batch.primary)
    terms: list[PretextTerm] = []
    pretext_total: Tensor | None = None
    for mid in sorted(batch.pretext.pairs):
        pairs, y = batch.pretext.pairs[mid], batch.pretext.y[mid]
        if len(pairs) == 0:
            continue
        losses, phi = pretext_losses(state, z, mid, pairs, y)
        phi_value = detach(phi).value
        if weights is not None:
            c = np.asarray(weights[mid], dtype=np.float64).reshape(-1, 1)
        elif con_override is not None:
            c = np.full((len(pairs), 1), float(con_override))
        else:
            c = contribution_values(state, phi_value)
        weighted = mul(constant(c), losses)
        piece = mean(weighted)
        pretext_total = piece if pretext_total is None else add(pretext_total, piece)
        terms.append(PretextTerm(mid, pairs, y, losses, c, weighted, phi_value))
    total = l_pri if pretext_total is None else add(l_pri, pretext_total)
    return JointLoss(primary=l_pri, terms=terms, pretext_total=pretext_total, total=total)


# ============ 参数更新 ============


@dataclass(eq=False)
class VirtualStep:
    w_hat: list[np.ndarray]
    joint: JointLoss
    alpha: float


def virtual_step(
    state: ModelState,
    inputs: GraphInputs,
    batch: StepBatch,
    alpha: float,
    *,
    con_override: float | None = None,
) -> VirtualStep:
    """ŵ = w − α∇_w(L_pri + Σ Con·L_pre)，普通 SGD，不修改 state。"""
    params = state.w_parameters()
    with Tape():
        joint = joint_loss(state, inputs, batch, con_override=con_override)
        grads = grad_of(joint.total, params)
    w_hat = [p.value - alpha * g for p, g in zip(params, grads)]
    for k, (p, value) in enumerate(zip(params, w_hat)):
        if not np.all(np.isfinite(value)):
            raise NumericError("non-finite gradient", where=f"virtual_step[{p.name or k}]")
    return VirtualStep(w_hat=w_hat, joint=joint, alpha=float(alpha))


def _directional_pretext(
    state: ModelState, inputs: GraphInputs, terms: Sequence[PretextTerm], direction: Sequence[np.ndarray]
) -> dict[int, np.ndarray]:
    """对每个样本求 vᵀ∇_w ℓ_{d,i}：一次前向模式传播，tangent = v。"""
    tangent_state = state.with_w([p.value for p in state.w_parameters()])
    for p, t in zip(tangent_state.w_parameters(), direction):
        p.set_tangent(t)
    out: dict[int, np.ndarray] = {}
    with no_tape():
        z = encode(tangent_state, inputs)
        for term in terms:
            losses, _ = pretext_losses(tangent_state, z, term.metapath_id, term.pairs, term.y)
            tan = losses.tangent
            out[term.metapath_id] = np.zeros(losses.shape) if tan is None else tan
    return out


def meta_gradient(
    state: ModelState,
    inputs: GraphInputs,
    virtual: VirtualStep | None,
    val_batch: PrimaryBatch,
    *,
    mode: str = "objective",
    val_pretext: PretextBatch | None = None,
) -> list[np.ndarray]:
    """∇_λ，与 state.lambda_parameters() 对齐。

    objective: 验证集主任务损失经虚拟步对 λ 的梯度（闭式）。
    literal:   在 ŵ 处验证伪标签批上 Σ_d mean Con·ℓ 对 λ 的梯度。
    """
    if virtual is None:
        raise StateError("meta update needs the bookkeeping produced by virtual_step")
    lam = state.lambda_parameters()
    hat = state.with_w(virtual.w_hat)

    if mode == "literal":
        if not val_pretext:
            return [np.zeros_like(p.value) for p in lam]
        with no_tape():
            z_hat = encode(hat, inputs)
            pieces = []
            for mid in sorted(val_pretext.pairs):
                losses, phi = pretext_losses(hat, z_hat, mid, val_pretext.pairs[mid], val_pretext.y[mid])
                pieces.append((losses.value, phi.value))
        with Tape():
            obj: Tensor | None = None
            for loss_values, phi_values in pieces:
                c = contribution(Tensor(phi_values), state.contribution)
                piece = mean(mul(c, constant(loss_values)))
                obj = piece if obj is None else add(obj, piece)
            assert obj is not None
            return grad_of(obj, lam)

    if mode != "objective":
        raise ArgumentError(f"unknown meta mode {mode!r}")
    if not virtual.joint.terms:
        return [np.zeros_like(p.value) for p in lam]

    with Tape():
        z_hat = encode(hat, inputs)
        l_val = primary_loss(hat, z_hat, val_batch)
        v = grad_of(l_val, hat.w_parameters())

    directional = _directional_pretext(state, inputs, virtual.joint.terms, v)
    with Tape():
        obj = None
        for term in virtual.joint.terms:
            coef = -virtual.alpha * directional[term.metapath_id] / len(term.pairs)
            c = contribution(Tensor(term.phi), state.contribution)
            piece = sum_(mul(c, constant(coef)))
            obj = piece if obj is None else add(obj, piece)
        assert obj is not None
        return grad_of(obj, lam)


def meta_update_lambda(
    state: ModelState,
    inputs: GraphInputs,
    virtual: VirtualStep | None,
    val_batch: PrimaryBatch,
    beta: float,
    *,
    mode: str = "objective",
    val_pretext: PretextBatch | None = None,
) -> list[np.ndarray]:
    """λ' = λ − β∇_λ。返回新数值，不修改 state。"""
    grads = meta_gradient(state, inputs, virtual, val_batch, mode=mode, val_pretext=val_pretext)
    return [p.value - beta * g for p, g in zip(state.lambda_parameters(), grads)]


class AdamOptimizer:
    """Adam，L2 权重衰减加在梯度上；原地更新参数数值。"""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 0.001,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ArgumentError(f"{len(grads)} gradients for {len(self.params)} parameters")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        updates = []
        for k, (p, g) in enumerate(zip(self.params, grads)):
            g = g + self.weight_decay * p.value
            m = b1 * self.m[k] + (1.0 - b1) * g
            v = b2 * self.v[k] + (1.0 - b2) * g * g
            new = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.all(np.isfinite(new)):
                raise NumericError("non-finite update", where=f"adam[{p.name or k}]")
            updates.append((k, m, v, new))
        for k, m, v, new in updates:
            self.m[k] = m
            self.v[k] = v
            self.params[k].value = new


def actual_step(
    state: ModelState,
    inputs: GraphInputs,
    batch: StepBatch,
    optimizer: AdamOptimizer,
    *,
    con_override: float | None = None,
) -> JointLoss:
    """在原始 w 上计算联合损失并做一步 Adam（λ 取当前值，即 λ'）。"""
    with Tape():
        joint = joint_loss(state, inputs, batch, con_override=con_override)
        grads = grad_of(joint.total, optimizer.params)
    optimizer.step(grads)
    return joint


# ============ 训练历史 ============


@dataclass
class EpochRecord:
    epoch: int
    loss_pri: float
    loss_pre_total: float
    val_metric: float
    mean_con: dict[int, float] = field(default_factory=dict)


def history_columns(metapath_ids: Sequence[int]) -> list[str]:
    return ["epoch", "loss_pri", "loss_pre_total", "val_metric"] + [
        f"mean_con_m{mid}" for mid in sorted(metapath_ids)
    ]


def save_history_csv(history: Sequence[EpochRecord], path: str | Path, metapath_ids: Sequence[int]) -> None:
    ids = sorted(metapath_ids)
    rows = []
    for rec in history:
        row = {
            "epoch": str(rec.epoch),
            "loss_pri": format_real(rec.loss_pri),
            "loss_pre_total": format_real(rec.loss_pre_total),
            "val_metric": format_real(rec.val_metric),
        }
        for mid in ids:
            row[f"mean_con_m{mid}"] = format_real(rec.mean_con.get(mid, float("nan")))
        rows.append(row)
    ensure_parent_dir(path)
    pd.DataFrame(rows, columns=history_columns(ids)).to_csv(path, index=False, lineterminator="\n")


def load_history_csv(path: str | Path) -> list[EpochRecord]:
    frame = pd.read_csv(path)
    missing = [c for c in history_columns([]) if c not in frame.columns]
    if missing:
        raise ArgumentError(f"{path}: history is missing columns {missing}")
    con_cols = [c for c in frame.columns if c.startswith("mean_con_m")]
    history = []
    for row in frame.itertuples(index=False):
        values = row._asdict()
        history.append(
            EpochRecord(
                epoch=int(values["epoch"]),
                loss_pri=float(values["loss_pri"]),
                loss_pre_total=float(values["loss_pre_total"]),
                val_metric=float(values["val_metric"]),
                mean_con={int(c[len("mean_con_m") :]): float(values[c]) for c in con_cols},
            )
        )
    return history


def history_summary(history: Sequence[EpochRecord]) -> dict[str, float]:
    """验证指标的峰值与均值（AUC-peak / AUC-mean）。"""
    values = np.array([rec.val_metric for rec in history], dtype=np.float64)
    values = values[np.isfinite(values)]
    if values.size == 0:
        raise UndefinedMetricError("history has no finite validation metric")
    return {"auc_peak": float(values.max()), "auc_mean": float(values.mean())}


# ============ 评估 ============


def embed(state: ModelState, inputs: GraphInputs) -> np.ndarray:
    with no_tape():
        return encode(state, inputs).value


def link_scores(state: ModelState, z: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    with no_tape():
        zt = Tensor(z)
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        scores = link_score(gather_rows(zt, pairs[:, 0]), gather_rows(zt, pairs[:, 1]), state.primary)
    return scores.value.reshape(-1)


def evaluate_link(state: ModelState, inputs: GraphInputs, split: SplitData, which: str = "test") -> dict[str, float]:
    """AUC 与阈值 0.5 下的 Macro/Micro-F1。"""
    items, targets = split.samples(which)
    scores = link_scores(state, embed(state, inputs), items)
    y_true = targets.astype(np.int64)
    y_pred = (scores >= 0.5).astype(np.int64)
    return {
        "auc": auc(scores, y_true),
        "macro_f1": macro_f1(y_true, y_pred, 2),
        "micro_f1": micro_f1(y_true, y_pred, 2),
    }


def evaluate_node(state: ModelState, inputs: GraphInputs, split: SplitData, which: str = "test") -> dict[str, float]:
    items, targets = split.samples(which)
    z = embed(state, inputs)
    with no_tape():
        logits = node_logits(gather_rows(Tensor(z), items), state.primary).value
    y_pred = logits.argmax(axis=1)
    return {
        "macro_f1": macro_f1(targets, y_pred, split.num_classes),
        "micro_f1": micro_f1(targets, y_pred, split.num_classes),
    }


def validation_metric(state: ModelState, inputs: GraphInputs, split: SplitData) -> float:
    """link: 验证 AUC；node: 验证 Macro-F1。"""
    if split.task == "link":
        return evaluate_link(state, inputs, split, "val")["auc"]
    return evaluate_node(state, inputs, split, "val")["macro_f1"]


# ============ 训练主循环 ============


@dataclass(eq=False)
class TrainResult:
    state: ModelState
    history: list[EpochRecord]
    split: SplitData
    inputs: GraphInputs

    def __iter__(self):
        return iter((self.state, self.history))


def calibrate_pretext_heads(state: ModelState, inputs: GraphInputs, labels: JumpLabelSet) -> None:
    """训练开始前按训练伪标签校准各辅助任务头（原地修改）。

    regression: 权重取绝对值（φ 非负，ŷ 随距离增大），截距取初始嵌入下 ŷ − w·φ 的均值；
    classification: 截距取平滑后的类别对数频率减去平均 logit。
    初始残差均值为零，编码器不会先被拉去拟合标签的整体水平。
    """
    z = embed(state, inputs)
    for mid in state.metapath_ids:
        pairs, y = labels.for_metapath(mid)
        if len(pairs) == 0:
            continue
        head = state.pretext[mid]
        phi = np.abs(z[pairs[:, 0]] - z[pairs[:, 1]])
        if state.pretext_mode == "regression":
            w = np.abs(head.w.value)
            head.w.value = w
            head.b.value = np.array([[float(np.mean(y - phi @ w[:, 0]))]])
        else:
            classes = head.b.shape[1]
            freq = (np.bincount(y - 1, minlength=classes)[:classes] + 1.0) / (len(y) + classes)
            head.b.value = (np.log(freq) - (phi @ head.w.value).mean(axis=0)).reshape(1, -1)
        _LOG.debug("元路径 %d 的辅助任务头已按 %d 个伪标签校准", mid, len(y))


def select_metapaths(metapaths: Sequence[MetapathSpec], count: int | None) -> list[MetapathSpec]:
    if not metapaths:
        raise ConfigError("at least one metapath is required")
    chosen = list(metapaths) if count is None else list(metapaths)[:count]
    if count is not None and count > len(metapaths):
        _LOG.warning("请求 %d 条元路径，但只有 %d 条可用", count, len(metapaths))
    return chosen


def train(
    graph: HetGraph,
    metapaths: Sequence[MetapathSpec],
    cfg: TrainConfig,
    *,
    labels: JumpLabelSet | None = None,
    sampler: PairSamplerConfig | None = None,
    threads: int = 1,
    con_override: float | None = None,
) -> TrainResult:
    """按 epoch 循环 {验证批, 训练批, 虚拟步, 元更新 λ, 实际步}；给定 seed 完全确定。

    con_override 把所有贡献权重固定为常数并跳过 λ 的元更新。
    """
    specs = select_metapaths(metapaths, cfg.metapath_count)
    adjs = collapse_all(graph, specs)
    split = build_split(
        graph, adjs, cfg, labels=labels, sampler=sampler, threads=threads, build_labels=not cfg.vanilla
    )
    inputs = GraphInputs.from_split(graph, split, cfg.dense_cap)
    ids = [s.id for s in specs]
    state = init_model_state(
        graph.features.shape[1],
        ids,
        seed=cfg.seed,
        task=cfg.task,
        num_classes=graph.num_classes,
        pretext_mode=cfg.pretext_mode,
        j_max=cfg.j_max,
        encoder=cfg.encoder,
        hidden_dim=cfg.hidden_dim,
        embedding_dim=cfg.embedding_dim,
        head_hidden=cfg.head_hidden,
        contribution_hidden=cfg.contribution_hidden,
    )
    history: list[EpochRecord] = []
    if cfg.epochs == 0:
        return TrainResult(state, history, split, inputs)

    use_pretext = not cfg.vanilla and len(split.labels) > 0
    if use_pretext:
        calibrate_pretext_heads(state, inputs, split.labels)
    optimizer = AdamOptimizer(
        state.w_parameters(),
        lr=cfg.alpha,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )
    steps = cfg.steps_per_epoch or max(1, math.ceil(split.population("train") / cfg.batch_size))
    val_items, val_targets = split.samples("val")
    mode = "SESIM" if use_pretext else "vanilla"
    _LOG.info("开始训练 (%s): %d epochs × %d steps，元路径 %s", mode, cfg.epochs, steps, ids)

    for epoch in range(cfg.epochs):
        train_items, train_targets = split.samples("train", epoch)
        loss_pri = 0.0
        loss_pre = 0.0
        con_sum = {mid: 0.0 for mid in ids}
        con_count = {mid: 0 for mid in ids}
        for s in range(steps):
            step = epoch * steps + s
            try:
                idx = minibatch_sampler(split, "train", cfg.batch_size, cfg.seed, step)
                batch = StepBatch(PrimaryBatch(train_items[idx], train_targets[idx]))
                if use_pretext:
                    batch.pretext = pretext_sampler(split.labels, cfg.batch_size, cfg.seed, step)
                if use_pretext and con_override is None:
                    vidx = minibatch_sampler(split, "val", cfg.val_batch_size, cfg.seed, step)
                    val_batch = PrimaryBatch(val_items[vidx], val_targets[vidx])
                    virtual = virtual_step(state, inputs, batch, cfg.alpha)
                    val_pretext = None
                    if cfg.meta_mode == "literal":
                        val_pretext = pretext_sampler(
                            split.labels, cfg.val_batch_size, cfg.seed, step, stream=_VAL_PRETEXT_STREAM
                        )
                    new_lambda = meta_update_lambda(
                        state, inputs, virtual, val_batch, cfg.beta, mode=cfg.meta_mode, val_pretext=val_pretext
                    )
                    for p, value in zip(state.lambda_parameters(), new_lambda):
                        p.value = value
                joint = actual_step(state, inputs, batch, optimizer, con_override=con_override)
            except NumericError as e:
                raise e.with_context(epoch, step) from e

            loss_pri += joint.primary.item()
            loss_pre += joint.pretext_value()
            for term in joint.terms:
                con_sum[term.metapath_id] += float(term.weights.sum())
                con_count[term.metapath_id] += len(term.weights)

        record = EpochRecord(
            epoch=epoch,
            loss_pri=loss_pri / steps,
            loss_pre_total=loss_pre / steps,
            val_metric=validation_metric(state, inputs, split),
            mean_con={
                mid: (con_sum[mid] / con_count[mid]) if con_count[mid] else float("nan") for mid in ids
            },
        )
        history.append(record)
        con_text = " ".join(f"m{mid}={record.mean_con[mid]:.4f}" for mid in ids)
        _LOG.info(
            "epoch %d: loss_pri=%.6f loss_pre=%.6f val=%.6f con[%s]",
            epoch,
            record.loss_pri,
            record.loss_pre_total,
            record.val_metric,
            con_text,
        )
    return TrainResult(state, history, split, inputs)
