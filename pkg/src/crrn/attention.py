"""Single-channel additive attention between encoder and decoder layers.

The encoder adds ``A`` (replicated over channels) to its hidden state before
passing it forward in time; the decoder subtracts the same map from its
hidden state at the matching layer and timestep.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor


@dataclass
class AttentionMap:
    A: Tensor  # (n, 1, h, w), entries in (-1, 1)
    layer: int
    t: int


def init_attention(rng: np.random.Generator, c: int, k: int, dtype=np.float64, name="W_A") -> Parameter:
    return Parameter(T.uniform_init(rng, (1, c, k, k), c * k * k, dtype), name)


def compute_attention(W_A: Parameter, E: Tensor, layer: int = 0, t: int = 0) -> AttentionMap:
    if W_A.shape[0] != 1:
        raise ShapeError(f"attention kernel must have one output channel, got {W_A.shape}")
    k = W_A.shape[-1]
    return AttentionMap(T.tanh(T.conv2d(E, W_A, None, 1, k // 2)), layer, t)


def _replicated(x: Tensor, amap: AttentionMap) -> Tensor:
    A = amap.A
    if A.shape[0] != x.shape[0] or A.shape[2:] != x.shape[2:]:
        raise ShapeError(f"attention map {A.shape} does not fit hidden state {x.shape}")
    return T.repeat_channels(A, x.shape[1])


def apply_attention(E: Tensor, amap: AttentionMap) -> Tensor:
    return T.add(E, _replicated(E, amap))


def release_attention(D_hat: Tensor, amap: AttentionMap) -> Tensor:
    return T.sub(D_hat, _replicated(D_hat, amap))
