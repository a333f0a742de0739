"""ConvLSTM and CSTM cell steps.

Gate kernels are stored fused: ``W`` stacks the input kernels for the
i, f, g, o gates along the output axis, ``U`` the recurrent kernels in the
same order. A step runs them as one convolution over ``[x; h_prev]``, which
is numerically the sum of the eight separate convolutions.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor

GATES = ("i", "f", "g", "o")


@dataclass
class CellState:
    H: Tensor
    C: Tensor

    @staticmethod
    def zeros(n: int, c: int, h: int, w: int, dtype=np.float64) -> "CellState":
        return CellState(T.zeros((n, c, h, w), dtype), T.zeros((n, c, h, w), dtype))


@dataclass
class ConvLstmParams:
    W: Parameter    # (4c, c_in, k, k)
    U: Parameter    # (4c, c, k, k)
    bW: Parameter   # (4c,)
    bU: Parameter   # (4c,)
    P_i: Parameter  # (1, c, h, w) peepholes
    P_f: Parameter
    P_o: Parameter

    @property
    def channels(self) -> int:
        return self.U.shape[1]

    @property
    def kernel(self) -> int:
        return self.U.shape[-1]

    def parameters(self) -> Dict[str, Parameter]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def gate_kernel(self, which: str, gate: str) -> np.ndarray:
        """View of one gate's block of ``W`` or ``U``."""
        c = self.channels
        j = GATES.index(gate)
        return getattr(self, which).data[j * c:(j + 1) * c]


@dataclass
class CstmParams(ConvLstmParams):
    W_mix: Parameter  # (c, 2c, 1, 1), no bias


def _init_common(rng, c_in, c, k, h, w, dtype, prefix):
    fan = lambda ch: ch * k * k  # noqa: E731
    p = lambda name, data: Parameter(data, f"{prefix}{name}")  # noqa: E731
    return dict(
        W=p("W", T.uniform_init(rng, (4 * c, c_in, k, k), fan(c_in), dtype)),
        U=p("U", T.uniform_init(rng, (4 * c, c, k, k), fan(c), dtype)),
        bW=p("bW", np.zeros(4 * c, dtype)),
        bU=p("bU", np.zeros(4 * c, dtype)),
        P_i=p("P_i", np.zeros((1, c, h, w), dtype)),
        P_f=p("P_f", np.zeros((1, c, h, w), dtype)),
        P_o=p("P_o", np.zeros((1, c, h, w), dtype)),
    )


def init_convlstm(rng: np.random.Generator, c_in: int, c: int, k: int, h: int, w: int,
                  dtype=np.float64, prefix: str = "") -> ConvLstmParams:
    return ConvLstmParams(**_init_common(rng, c_in, c, k, h, w, dtype, prefix))


def init_cstm(rng: np.random.Generator, c_in: int, c: int, k: int, h: int, w: int,
              dtype=np.float64, prefix: str = "") -> CstmParams:
    common = _init_common(rng, c_in, c, k, h, w, dtype, prefix)
    mix = Parameter(T.uniform_init(rng, (c, 2 * c, 1, 1), 2 * c, dtype), f"{prefix}W_mix")
    return CstmParams(**common, W_mix=mix)


def param_count(p: ConvLstmParams) -> int:
    return sum(q.size for q in p.parameters().values())


def _check(p: ConvLstmParams, x: Tensor, prev: CellState) -> None:
    c = p.channels
    if x.ndim != 4 or x.shape[1] != p.W.shape[1]:
        raise ShapeError(f"cell input {x.shape} does not match kernel {p.W.shape}")
    want = (x.shape[0], c) + tuple(p.P_i.shape[2:])
    if prev.H.shape != want or prev.C.shape != want:
        raise ShapeError(f"cell state {prev.H.shape}/{prev.C.shape}, expected {want}")
    if x.shape[2:] != want[2:]:
        raise ShapeError(f"cell input {x.shape} spatial dims differ from state {want}")


def _gates(p: ConvLstmParams, x: Tensor, prev: CellState):
    k = p.kernel
    weight = T.concat((p.W, p.U), axis=1)
    z = T.conv2d(T.concat_channels(x, prev.H), weight, T.add(p.bW, p.bU), 1, k // 2)
    zi, zf, zg, zo = T.split_channels(z, 4)
    i = T.sigmoid(T.add(zi, T.mul(p.P_i, prev.C)))
    f = T.sigmoid(T.add(zf, T.mul(p.P_f, prev.C)))
    g = T.tanh(zg)
    return i, f, g, zo


def _finish(p: ConvLstmParams, i, f, g, zo, memory: Tensor) -> CellState:
    C = T.add(T.mul(f, memory), T.mul(i, g))
    o = T.sigmoid(T.add(zo, T.mul(p.P_o, C)))
    return CellState(T.mul(o, T.tanh(C)), C)


def convlstm_step(p: ConvLstmParams, x_in: Tensor, prev: CellState) -> CellState:
    _check(p, x_in, prev)
    i, f, g, zo = _gates(p, x_in, prev)
    return _finish(p, i, f, g, zo, prev.C)


def cstm_step(p: CstmParams, x_in: Tensor, c_below: Tensor, prev: CellState) -> CellState:
    """ConvLSTM gates with the memory term replaced by a 1x1 mix of
    ``[C_prev; c_below]`` (time memory first)."""
    _check(p, x_in, prev)
    if c_below.shape != prev.C.shape:
        raise ShapeError(f"c_below {c_below.shape} does not match cell state {prev.C.shape}")
    i, f, g, zo = _gates(p, x_in, prev)
    memory = T.conv1x1(T.concat_channels(prev.C, c_below), p.W_mix)
    return _finish(p, i, f, g, zo, memory)


def step(p: ConvLstmParams, x_in: Tensor, c_below: Optional[Tensor], prev: CellState) -> CellState:
    """Dispatch on the parameter type; ConvLSTM ignores ``c_below``."""
    if isinstance(p, CstmParams):
        if c_below is None:
            c_below = T.zeros(prev.C.shape, prev.C.dtype)
        return cstm_step(p, x_in, c_below, prev)
    return convlstm_step(p, x_in, prev)
