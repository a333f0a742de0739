"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .tensor import Parameter, Tape, Tensor

ParamSpec = Union[Sequence[Parameter], Mapping[str, Sequence[Parameter]]]


def _groups(params: ParamSpec) -> Dict[str, list]:
    if isinstance(params, Mapping):
        return {k: list(v) for k, v in params.items()}
    return {p.name or f"param{i}": [p] for i, p in enumerate(params)}


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check_detail(fn: Callable[[], Tensor], params: ParamSpec, eps: float = 1e-5,
                      samples: Optional[int] = None, seed: int = 0) -> Dict[str, float]:
    """Max relative error per parameter group.

    ``fn`` must rebuild the scalar loss from the current parameter values on
    every call and be deterministic. With ``samples`` set, at most that many
    coordinates are drawn per group; otherwise every coordinate is checked.
    """
    groups = _groups(params)
    every = [p for ps in groups.values() for p in ps]
    for p in every:
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    analytic = {id(p): p.grad.copy() for p in every}

    rng = np.random.default_rng(seed)
    out = {}
    for name, ps in groups.items():
        sizes = np.array([p.size for p in ps])
        total = int(sizes.sum())
        if samples is None or samples >= total:
            flat = np.arange(total)
        else:
            flat = np.sort(rng.choice(total, size=samples, replace=False))
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        worst = 0.0
        for f in flat:
            k = int(np.searchsorted(offsets, f, side="right") - 1)
            p = ps[k]
            idx = np.unravel_index(int(f - offsets[k]), p.shape)
            orig = p.data[idx]
            p.data[idx] = orig + eps
            up = fn().item()
            p.data[idx] = orig - eps
            down = fn().item()
            p.data[idx] = orig
            numeric = (up - down) / (2 * eps)
            worst = max(worst, rel_error(float(analytic[id(p)][idx]), numeric))
        out[name] = worst
    return out


def grad_check(fn: Callable[[], Tensor], params: ParamSpec, eps: float = 1e-5,
               samples: Optional[int] = None, seed: int = 0) -> float:
    """Max over parameters of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)."""
    detail = grad_check_detail(fn, params, eps, samples, seed)
    return max(detail.values()) if detail else 0.0
