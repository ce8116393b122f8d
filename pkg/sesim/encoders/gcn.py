"""两层 GCN 编码器: H1 = relu(Ã X w0), Z = Ã H1 w1（第二层线性）。"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor, matmul, parameter, relu
from ..errors import ArgumentError
from .base import GraphEncoder, glorot_uniform


@dataclass(eq=False)
class GcnEncoder(GraphEncoder):
    w0: Tensor
    w1: Tensor

    name = "gcn"

    @classmethod
    def initialize(
        cls, in_dim: int, hidden_dim: int, out_dim: int, rng: np.random.Generator
    ) -> GcnEncoder:
        return cls(
            w0=parameter(glorot_uniform(rng, in_dim, hidden_dim), name="encoder.w0"),
            w1=parameter(glorot_uniform(rng, hidden_dim, out_dim), name="encoder.w1"),
        )

    @property
    def in_dim(self) -> int:
        return self.w0.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w1.shape[1]

    def forward(self, x: Tensor, a_norm: Tensor) -> Tensor:
        n = a_norm.shape[0]
        if a_norm.shape != (n, n) or x.shape[0] != n:
            raise ArgumentError(f"gcn: adjacency {a_norm.shape} does not match features {x.shape}")
        if x.shape[1] != self.in_dim:
            raise ArgumentError(f"gcn: feature dim {x.shape[1]} != w0 rows {self.in_dim}")
        if self.w0.shape[1] != self.w1.shape[0]:
            raise ArgumentError(f"gcn: hidden dims differ, w0 {self.w0.shape} vs w1 {self.w1.shape}")
        hidden = relu(matmul(matmul(a_norm, x), self.w0))
        return matmul(a_norm, matmul(hidden, self.w1))


def gcn_forward(x: Tensor, a_norm: Tensor, params: GcnEncoder) -> Tensor:
    return params.forward(x, a_norm)
