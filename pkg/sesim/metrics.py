"""
评估指标：混淆计数、Macro-F1、Micro-F1、AUC

F1 分母为 0 的类别记 0 分且仍参与平均（labels 显式给出全部 C 个类别）。
AUC 中并列分数按 0.5 计。
"""

from __future__ import annotations

import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.metrics import confusion_matrix, f1_score, roc_auc_score

from .errors import ArgumentError, UndefinedMetricError
from .utils import ensure_parent_dir

REPORT_DECIMALS = 6


@dataclass(frozen=True, eq=False)
class ConfusionCounts:
    """每个类别一行的 TP/FP/FN/TN。"""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def total(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0]) if self.tp.size else 0


def _check_labels(
    y_true: Sequence[int] | np.ndarray, y_pred: Sequence[int] | np.ndarray, num_classes: int
) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(y_true, dtype=np.int64).reshape(-1)
    p = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if t.size == 0:
        raise ArgumentError("metric on empty input")
    if t.shape != p.shape:
        raise ArgumentError(f"y_true has {t.size} entries, y_pred has {p.size}")
    if num_classes < 1:
        raise ArgumentError(f"class count must be positive, got {num_classes}")
    for name, arr in (("y_true", t), ("y_pred", p)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ArgumentError(f"{name} contains a class index outside [0, {num_classes})")
    return t, p


def confusion_counts(y_true, y_pred, num_classes: int) -> ConfusionCounts:
    t, p = _check_labels(y_true, y_pred, num_classes)
    cm = confusion_matrix(t, p, labels=list(range(num_classes)))
    tp = np.diag(cm).astype(np.int64)
    fp = cm.sum(axis=0).astype(np.int64) - tp
    fn = cm.sum(axis=1).astype(np.int64) - tp
    tn = int(cm.sum()) - tp - fp - fn
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def macro_f1(y_true, y_pred, num_classes: int) -> float:
    t, p = _check_labels(y_true, y_pred, num_classes)
    return float(f1_score(t, p, labels=list(range(num_classes)), average="macro", zero_division=0))


def micro_f1(y_true, y_pred, num_classes: int) -> float:
    t, p = _check_labels(y_true, y_pred, num_classes)
    return float(f1_score(t, p, labels=list(range(num_classes)), average="micro", zero_division=0))


def accuracy(y_true, y_pred) -> float:
    t = np.asarray(y_true).reshape(-1)
    p = np.asarray(y_pred).reshape(-1)
    if t.size == 0:
        raise ArgumentError("metric on empty input")
    return float(np.mean(t == p))


def auc(scores: Sequence[float] | np.ndarray, labels: Sequence[int] | np.ndarray) -> float:
    """随机正样本得分高于随机负样本的概率。"""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if s.shape != y.shape:
        raise ArgumentError(f"{s.size} scores for {y.size} labels")
    if s.size == 0 or np.unique(y).size < 2:
        raise UndefinedMetricError("AUC needs at least one positive and one negative sample")
    if not np.all(np.isin(y, (0, 1))):
        raise ArgumentError("AUC labels must be binary 0/1")
    return float(roc_auc_score(y, s))


def average_increase(sesim: Sequence[float], vanilla: Sequence[float]) -> float:
    """逐格相对提升 (s - v) / v 的平均值。"""
    s = np.asarray(sesim, dtype=np.float64)
    v = np.asarray(vanilla, dtype=np.float64)
    if s.size == 0 or s.shape != v.shape:
        raise ArgumentError("average_increase needs two equally long non-empty sequences")
    if np.any(v == 0):
        raise UndefinedMetricError("relative increase undefined for a zero baseline")
    return float(np.mean((s - v) / v))


def evaluation_report(values: Mapping[str, float], path: str | Path | None = None) -> dict[str, float]:
    """保留 6 位小数，按给定键序输出 JSON。"""
    report = {key: round(float(value), REPORT_DECIMALS) for key, value in values.items()}
    if path is not None:
        ensure_parent_dir(path)
        text = json.dumps(report, indent=2) + "\n"
        Path(path).write_text(text, encoding="utf-8")
    return report
