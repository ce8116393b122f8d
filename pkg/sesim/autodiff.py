"""
稠密二维张量上的最小自动微分引擎

- 反向模式: Tape 按执行顺序记录原语，backward 逆序回放一次，
  在叶子张量（requires_grad 且非运算结果）上累加 .grad。
- 前向模式: 张量可携带 tangent（对偶数），每个原语用精确的 JVP 传播，
  一次前向即可得到所有逐样本损失沿某方向 v 的方向导数。

所有数值为 float64；每个原语都检查结果有限，否则抛出 NumericError（带原语名）。
广播只支持行向量 / 列向量 / 1×1。
"""

from __future__ import annotations

import contextlib
import contextvars
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, fields, replace
from typing import Literal

import numpy as np
from scipy.special import expit

from .errors import ArgumentError, NumericError, StateError

Reduction = Literal["mean", "none"]

BCE_EPS = 1e-12

_ACTIVE_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("sesim_tape", default=None)


class Tensor:
    """二维 float64 张量。"""

    __slots__ = ("value", "requires_grad", "grad", "tangent", "name", "_tape")

    def __init__(
        self,
        value: np.ndarray | float | Sequence[Sequence[float]],
        *,
        requires_grad: bool = False,
        tangent: np.ndarray | None = None,
        name: str = "",
    ):
        arr = np.array(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        if arr.ndim != 2:
            raise ArgumentError(f"tensors are 2-D, got shape {arr.shape}")
        self.value = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tangent: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None
        if tangent is not None:
            self.set_tangent(tangent)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.value.size != 1:
            raise ArgumentError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def set_tangent(self, tangent: np.ndarray | None) -> None:
        if tangent is None:
            self.tangent = None
            return
        t = np.asarray(tangent, dtype=np.float64)
        if t.shape != self.shape:
            raise ArgumentError(f"tangent shape {t.shape} != tensor shape {self.shape}")
        self.tangent = t

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def parameter(value: np.ndarray, name: str = "") -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def constant(value: np.ndarray | float) -> Tensor:
    return Tensor(value)


@dataclass(eq=False)
class _Node:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """一次前向计算的原语记录。用作上下文管理器时成为当前活动 tape。"""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.replayed = False
        self._tokens: list[contextvars.Token] = []

    def __enter__(self) -> Tape:
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc: object) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: _Node) -> None:
        if self.replayed:
            raise StateError("tape was already replayed; call reset() before recording again")
        self.nodes.append(node)
        node.out._tape = self

    def reset(self) -> None:
        self.nodes.clear()
        self.replayed = False


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def _check_finite(op: str, arr: np.ndarray, what: str = "result") -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite {what}", where=op)


def _emit(
    op: str,
    value: np.ndarray,
    inputs: tuple[Tensor, ...],
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]],
    jvp: Callable[[list[np.ndarray | None]], np.ndarray],
) -> Tensor:
    _check_finite(op, value)
    tape = _ACTIVE_TAPE.get()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.value = value
    out.requires_grad = needs_grad
    out.grad = None
    out.tangent = None
    out.name = ""
    out._tape = None

    tangents = [t.tangent for t in inputs]
    if any(t is not None for t in tangents):
        tan = jvp(tangents)
        _check_finite(op, tan, "tangent")
        out.tangent = tan

    if needs_grad:
        assert tape is not None
        tape.record(_Node(op, out, inputs, vjp))
    return out


# ============ 广播辅助 ============


def _broadcast_shape(op: str, a: tuple[int, int], b: tuple[int, int]) -> tuple[int, int]:
    dims = []
    for da, db in zip(a, b):
        if da != db and da != 1 and db != 1:
            raise ArgumentError(f"{op}: shapes {a} and {b} are not broadcast-compatible")
        dims.append(max(da, db))
    return dims[0], dims[1]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _zero_if_none(t: np.ndarray | None, shape: tuple[int, ...]) -> np.ndarray:
    return np.zeros(shape) if t is None else t


# ============ 原语 ============


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ArgumentError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return g @ bv.T, av.T @ g

    def jvp(ts: list[np.ndarray | None]) -> np.ndarray:
        out = np.zeros((av.shape[0], bv.shape[1]))
        if ts[0] is not None:
            out = out + ts[0] @ bv
        if ts[1] is not None:
            out = out + av @ ts[1]
        return out

    return _emit("matmul", av @ bv, (a, b), vjp, jvp)


def add(a: Tensor, b: Tensor) -> Tensor:
    shape = _broadcast_shape("add", a.shape, b.shape)

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    def jvp(ts: list[np.ndarray | None]) -> np.ndarray:
        return np.broadcast_to(
            _zero_if_none(ts[0], a.shape) + _zero_if_none(ts[1], b.shape), shape
        ).copy()

    return _emit("add", a.value + b.value, (a, b), vjp, jvp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    shape = _broadcast_shape("sub", a.shape, b.shape)

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    def jvp(ts: list[np.ndarray | None]) -> np.ndarray:
        return np.broadcast_to(
            _zero_if_none(ts[0], a.shape) - _zero_if_none(ts[1], b.shape), shape
        ).copy()

    return _emit("sub", a.value - b.value, (a, b), vjp, jvp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """逐元素乘积（支持行/列广播）。"""
    shape = _broadcast_shape("mul", a.shape, b.shape)
    av, bv = a.value, b.value

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    def jvp(ts: list[np.ndarray | None]) -> np.ndarray:
        out = np.zeros(shape)
        if ts[0] is not None:
            out = out + ts[0] * bv
        if ts[1] is not None:
            out = out + av * ts[1]
        return out

    return _emit("mul", av * bv, (a, b), vjp, jvp)


def abs_(a: Tensor) -> Tensor:
    # np.sign(0) == 0 给出 0 处的次梯度 0
    sign = np.sign(a.value)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * sign,)

    def jvp(ts: list[np.ndarray | None]) -> np.ndarray:
        return sign * ts[0]  # type: ignore[operator]

    return _emit("abs", np.abs(a.value), (a,), vjp, jvp)


def relu(a: Tensor) -> Tensor:
    mask = (a.value > 0).astype(np.float64)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * mask,)

    def jvp(ts: list[np.ndarray | None]) -> np.ndarray:
        return mask * ts[0]  # type: ignore[operator]

    return _emit("relu", a.value * mask, (a,), vjp, jvp)


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.value)
    ds = s * (1.0 - s)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * ds,)

    def jvp(ts: list[np.ndarray | None]) -> np.ndarray:
        return ds * ts[0]  # type: ignore[operator]

    return _emit("sigmoid", s, (a,), vjp, jvp)


def _softmax(values: np.ndarray) -> np.ndarray:
    shifted = values - values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(a: Tensor) -> Tensor:
    s = _softmax(a.value)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    def jvp(ts: list[np.ndarray | None]) -> np.ndarray:
        t = ts[0]
        return s * (t - (t * s).sum(axis=1, keepdims=True))  # type: ignore[operator]

    return _emit("softmax_rows", s, (a,), vjp, jvp)


def sum_(a: Tensor) -> Tensor:
    shape = a.shape

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.full(shape, g[0, 0]),)

    def jvp(ts: list[np.ndarray | None]) -> np.ndarray:
        return np.array([[ts[0].sum()]])  # type: ignore[union-attr]

    return _emit("sum", np.array([[a.value.sum()]]), (a,), vjp, jvp)


def mean(a: Tensor) -> Tensor:
    shape = a.shape
    size = a.value.size
    if size == 0:
        raise ArgumentError("mean of an empty tensor")

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.full(shape, g[0, 0] / size),)

    def jvp(ts: list[np.ndarray | None]) -> np.ndarray:
        return np.array([[ts[0].sum() / size]])  # type: ignore[union-attr]

    return _emit("mean", np.array([[a.value.sum() / size]]), (a,), vjp, jvp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * c,)

    def jvp(ts: list[np.ndarray | None]) -> np.ndarray:
        return ts[0] * c  # type: ignore[operator]

    return _emit("scale", a.value * c, (a,), vjp, jvp)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ArgumentError("concat_rows needs at least one tensor")
    cols = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != cols:
            raise ArgumentError(f"concat_rows: column counts differ ({p.shape[1]} vs {cols})")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(g[bounds[k] : bounds[k + 1]] for k in range(len(parts)))

    def jvp(ts: list[np.ndarray | None]) -> np.ndarray:
        return np.concatenate([_zero_if_none(t, p.shape) for t, p in zip(ts, parts)], axis=0)

    return _emit(
        "concat_rows", np.concatenate([p.value for p in parts], axis=0), tuple(parts), vjp, jvp
    )


def gather_rows(a: Tensor, index: np.ndarray | Sequence[int]) -> Tensor:
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ArgumentError(f"gather_rows: index out of range for {a.shape[0]} rows")
    shape = a.shape

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    def jvp(ts: list[np.ndarray | None]) -> np.ndarray:
        return ts[0][idx]  # type: ignore[index]

    return _emit("gather_rows", a.value[idx], (a,), vjp, jvp)


def detach(a: Tensor) -> Tensor:
    """同值常量：不记录、不带 tangent。"""
    return Tensor(a.value.copy())


# ============ 损失 ============


def _reduce(op: str, per_sample: Tensor, reduction: Reduction) -> Tensor:
    if reduction == "none":
        return per_sample
    if reduction == "mean":
        return mean(per_sample)
    raise ArgumentError(f"{op}: unknown reduction {reduction!r}")


def _check_batch(op: str, pred: Tensor, targets: np.ndarray) -> None:
    if pred.value.size == 0:
        raise ArgumentError(f"{op}: empty batch")
    if targets.shape != pred.shape:
        raise ArgumentError(f"{op}: targets shape {targets.shape} != predictions shape {pred.shape}")


def bce(probs: Tensor, targets: np.ndarray | Sequence[float], reduction: Reduction = "mean") -> Tensor:
    """二元交叉熵，概率先截断到 [ε, 1-ε]。"""
    y = np.asarray(targets, dtype=np.float64)
    if y.size == probs.value.size:
        y = y.reshape(probs.shape)
    _check_batch("bce", probs, y)
    p = np.clip(probs.value, BCE_EPS, 1.0 - BCE_EPS)
    inside = ((probs.value >= BCE_EPS) & (probs.value <= 1.0 - BCE_EPS)).astype(np.float64)
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    dloss = inside * (p - y) / (p * (1.0 - p))

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * dloss,)

    def jvp(ts: list[np.ndarray | None]) -> np.ndarray:
        return dloss * ts[0]  # type: ignore[operator]

    return _reduce("bce", _emit("bce", loss, (probs,), vjp, jvp), reduction)


def cross_entropy(
    logits: Tensor, classes: np.ndarray | Sequence[int], reduction: Reduction = "mean"
) -> Tensor:
    """softmax 交叉熵（输入为 logits），逐样本结果为 k×1 列。"""
    cls = np.asarray(classes, dtype=np.int64).reshape(-1)
    k, c = logits.shape
    if k == 0:
        raise ArgumentError("cross_entropy: empty batch")
    if cls.shape[0] != k:
        raise ArgumentError(f"cross_entropy: {cls.shape[0]} targets for {k} rows")
    if cls.min() < 0 or cls.max() >= c:
        raise ArgumentError(f"cross_entropy: class index outside [0, {c})")
    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(k)
    loss = -log_p[rows, cls].reshape(k, 1)
    onehot = np.zeros((k, c))
    onehot[rows, cls] = 1.0
    dlogits = np.exp(log_p) - onehot

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * dlogits,)

    def jvp(ts: list[np.ndarray | None]) -> np.ndarray:
        return (dlogits * ts[0]).sum(axis=1, keepdims=True)  # type: ignore[operator]

    return _reduce("cross_entropy", _emit("cross_entropy", loss, (logits,), vjp, jvp), reduction)


def mse(pred: Tensor, targets: np.ndarray | Sequence[float], reduction: Reduction = "mean") -> Tensor:
    y = np.asarray(targets, dtype=np.float64)
    if y.size == pred.value.size:
        y = y.reshape(pred.shape)
    _check_batch("mse", pred, y)
    diff = pred.value - y

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * 2.0 * diff,)

    def jvp(ts: list[np.ndarray | None]) -> np.ndarray:
        return 2.0 * diff * ts[0]  # type: ignore[operator]

    return _reduce("mse", _emit("mse", diff * diff, (pred,), vjp, jvp), reduction)


# ============ 反向传播 ============


def backward(loss: Tensor) -> None:
    """逆序回放 loss 所在的 tape，把梯度累加到叶子张量的 .grad 上。"""
    if loss.shape != (1, 1):
        raise ArgumentError(f"backward needs a 1x1 loss, got {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise StateError("loss is not connected to a tape")
    if tape.replayed:
        raise StateError("backward called twice on the same tape without reset")
    tape.replayed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, ig in zip(node.inputs, node.vjp(g)):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + ig if key in grads else ig

    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.requires_grad and inp._tape is None:
                leaves[id(inp)] = inp
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        _check_finite(f"grad[{leaf.name or 'leaf'}]", g, "gradient")
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def grad_of(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """清零 params 的梯度后反传，返回与 params 对齐的梯度（未触达的为 0）。"""
    for p in params:
        p.zero_grad()
    backward(loss)
    return [np.zeros_like(p.value) if p.grad is None else p.grad for p in params]


# ============ 参数组 ============


@dataclass(eq=False)
class Module:
    """参数组基类：Tensor 字段按声明顺序即参数顺序。"""

    def parameters(self) -> list[Tensor]:
        return [getattr(self, f.name) for f in fields(self) if isinstance(getattr(self, f.name), Tensor)]

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [
            (f"{prefix}{f.name}", getattr(self, f.name))
            for f in fields(self)
            if isinstance(getattr(self, f.name), Tensor)
        ]

    def with_values(self, values: Sequence[np.ndarray], *, requires_grad: bool = True) -> Module:
        """同结构的新参数组，参数为新的叶子张量。"""
        names = [name for name, _ in self.named_parameters()]
        if len(values) != len(names):
            raise ArgumentError(f"{type(self).__name__}: expected {len(names)} arrays, got {len(values)}")
        updates = {}
        for name, old, value in zip(names, self.parameters(), values):
            arr = np.asarray(value, dtype=np.float64)
            if arr.shape != old.shape:
                raise ArgumentError(f"{type(self).__name__}.{name}: shape {arr.shape} != {old.shape}")
            updates[name] = Tensor(arr.copy(), requires_grad=requires_grad, name=old.name)
        return replace(self, **updates)


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """在块内停用当前 tape：运算只求值（仍传播 tangent），不记录。"""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)
