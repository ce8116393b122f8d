"""编码器接口：输入特征与归一化邻接，输出节点嵌入。"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import ClassVar

import numpy as np

from ..autodiff import Module, Tensor


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass(eq=False)
class GraphEncoder(Module, ABC):
    """可插拔图编码器。参数即 Module 中声明的 Tensor 字段。"""

    name: ClassVar[str] = ""

    @classmethod
    @abstractmethod
    def initialize(
        cls, in_dim: int, hidden_dim: int, out_dim: int, rng: np.random.Generator
    ) -> GraphEncoder:
        """按给定维度随机初始化。"""

    @abstractmethod
    def forward(self, x: Tensor, a_norm: Tensor) -> Tensor:
        """返回 n×out_dim 的嵌入矩阵。"""

    @property
    @abstractmethod
    def in_dim(self) -> int: ...

    @property
    @abstractmethod
    def out_dim(self) -> int: ...
