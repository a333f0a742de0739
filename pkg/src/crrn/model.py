"""The reconstruction network: spatial encoder, recurrent encoder/decoder, spatial decoder.

Frames are passed around as a list of ``(n, 2, h, w)`` tensors ordered
t = 1..T. The encoder walks forward in time; the decoder starts from an
exact copy of the final encoder states and walks backward, producing the
reconstruction of frame t at step t.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import cells, spt
from . import tensor as T
from .attention import AttentionMap, apply_attention, compute_attention, init_attention, release_attention
from .cells import CellState
from .evaluation import binarize_channels
from .tensor import Parameter, RunningStats, Tensor


class ConfigError(ValueError):
    """Config file has unknown keys, wrong types or inconsistent values."""


@dataclass
class CrrnConfig:
    in_channels: int = 2
    hidden: int = 64
    kernel: int = 5
    spatial_depth: int = 2
    st_depth: int = 2
    stride: int = 2
    T: int = 20
    height: int = 32
    width: int = 32
    cell: str = "cstm"
    attention: bool = True
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", int) and (not isinstance(v, int) or isinstance(v, bool)):
                raise ConfigError(f"{f.name} must be an integer, got {v!r}")
        counts = ("in_channels", "hidden", "kernel", "spatial_depth", "st_depth", "stride", "T",
                  "height", "width")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.kernel % 2 == 0:
            raise ConfigError("kernel must be odd for same padding")
        div = self.stride ** self.spatial_depth
        if self.height % div or self.width % div:
            raise ConfigError(f"board {self.height}x{self.width} not divisible by {div}")
        if self.cell not in ("cstm", "convlstm"):
            raise ConfigError(f"cell must be 'cstm' or 'convlstm', got {self.cell!r}")
        if not isinstance(self.attention, bool):
            raise ConfigError("attention must be a boolean")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def latent_hw(self) -> Tuple[int, int]:
        div = self.stride ** self.spatial_depth
        return self.height // div, self.width // div

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CrrnConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ----------------------------------------------------------------- feeding

class FeedPolicy:
    """Chooses, per decoder step and per sequence, between ground truth
    (theta = 1) and the model's own previous output (theta = 0)."""

    def __init__(self, epsilon: float, rng: Optional[np.random.Generator] = None):
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
        self.epsilon = epsilon
        self.rng = rng if rng is not None else np.random.default_rng(0)

    @classmethod
    def teacher(cls) -> "FeedPolicy":
        return cls(1.0)

    @classmethod
    def free(cls) -> "FeedPolicy":
        return cls(0.0)

    def theta(self, n: int) -> np.ndarray:
        if self.epsilon >= 1.0:
            return np.ones(n, dtype=np.int8)
        if self.epsilon <= 0.0:
            return np.zeros(n, dtype=np.int8)
        return (self.rng.random(n) < self.epsilon).astype(np.int8)


def scheduled_sample(x: Tensor, x_gen: Tensor, theta) -> Tensor:
    """``theta * x + (1 - theta) * x_gen`` for binary theta (scalar or per sample)."""
    th = np.asarray(theta).reshape(-1)
    if np.any((th != 0) & (th != 1)):
        raise ValueError("theta must be 0 or 1")
    if np.all(th == 1):
        return x
    if np.all(th == 0):
        return x_gen
    keep = th.astype(x.dtype)[:, None, None, None]
    return T.add(T.mul(x, Tensor(np.broadcast_to(keep, x.shape).copy())),
                 T.mul(x_gen, Tensor(np.broadcast_to(1 - keep, x.shape).copy())))


# ------------------------------------------------------------------- model

@dataclass
class SpatialLayer:
    """Convolution followed by batch norm, or a biased convolution alone.

    A bias in front of batch norm would be cancelled by the mean
    subtraction, so layers with batch norm carry none.
    """
    W: Parameter
    b: Optional[Parameter] = None
    gamma: Optional[Parameter] = None
    beta: Optional[Parameter] = None
    stats: Optional[RunningStats] = None

    def parameters(self) -> Dict[str, Parameter]:
        out = {"W": self.W}
        if self.b is not None:
            out["b"] = self.b
        if self.gamma is not None:
            out.update(gamma=self.gamma, beta=self.beta)
        return out


class CrrnModel:
    def __init__(self, config: CrrnConfig, rng: Optional[np.random.Generator] = None):
        self.config = cfg = config
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        dt = np.dtype(cfg.dtype)
        self.dtype = dt
        c, k, s = cfg.hidden, cfg.kernel, cfg.stride
        hh, ww = cfg.latent_hw
        self.training = True

        def bn_layer(name, w_shape, fan, out_c, with_bn=True):
            W = Parameter(T.uniform_init(rng, w_shape, fan, dt), f"{name}.W")
            if not with_bn:
                return SpatialLayer(W, Parameter(np.zeros(out_c, dt), f"{name}.b"))
            return SpatialLayer(W, None, Parameter(np.ones(out_c, dt), f"{name}.gamma"),
                                Parameter(np.zeros(out_c, dt), f"{name}.beta"), RunningStats(out_c, dtype=dt))

        self.s_encoder: List[SpatialLayer] = []
        c_in = cfg.in_channels
        for i in range(cfg.spatial_depth):
            self.s_encoder.append(bn_layer(f"s_enc{i}", (c, c_in, k, k), c_in * k * k, c))
            c_in = c
        self.s_decoder: List[SpatialLayer] = []
        for i in range(cfg.spatial_depth):
            last = i == cfg.spatial_depth - 1
            co = cfg.in_channels if last else c
            # transposed kernels are (c_in, c_out, k, k); fan-in counts input channels
            self.s_decoder.append(bn_layer(f"s_dec{i}", (c, co, k, k), c * k * k, co, with_bn=not last))

        init = cells.init_cstm if cfg.cell == "cstm" else cells.init_convlstm
        self.encoder = [init(rng, c, c, k, hh, ww, dt, f"enc{l}.") for l in range(cfg.st_depth)]
        self.decoder = [init(rng, c, c, k, hh, ww, dt, f"dec{l}.") for l in range(cfg.st_depth)]
        self.attention: Optional[List[Parameter]] = None
        if cfg.attention:
            self.attention = [init_attention(rng, c, k, dt, f"att{l}.W_A") for l in range(cfg.st_depth)]

    # -------------------------------------------------------------- params

    def groups(self) -> Dict[str, List[Parameter]]:
        """Parameters grouped by module, in a fixed order."""
        g: Dict[str, List[Parameter]] = {}
        for i, layer in enumerate(self.s_encoder):
            g[f"s_enc{i}"] = list(layer.parameters().values())
        for l, p in enumerate(self.encoder):
            g[f"enc{l}"] = list(p.parameters().values())
        if self.attention is not None:
            for l, w in enumerate(self.attention):
                g[f"att{l}"] = [w]
        for l, p in enumerate(self.decoder):
            g[f"dec{l}"] = list(p.parameters().values())
        for i, layer in enumerate(self.s_decoder):
            g[f"s_dec{i}"] = list(layer.parameters().values())
        return g

    def parameters(self) -> List[Parameter]:
        return [p for ps in self.groups().values() for p in ps]

    def named_parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def bn_stats(self) -> Dict[str, RunningStats]:
        out = {}
        for i, layer in enumerate(self.s_encoder):
            out[f"s_enc{i}"] = layer.stats
        for i, layer in enumerate(self.s_decoder):
            if layer.stats is not None:
                out[f"s_dec{i}"] = layer.stats
        return out

    def train(self) -> "CrrnModel":
        self.training = True
        return self

    def eval(self) -> "CrrnModel":
        self.training = False
        return self

    # ------------------------------------------------------------- spatial

    def s_encode(self, x: Tensor) -> Tensor:
        cfg = self.config
        if x.shape[1:] != (cfg.in_channels, cfg.height, cfg.width):
            raise T.ShapeError(f"frame {x.shape} does not match config "
                               f"({cfg.in_channels}, {cfg.height}, {cfg.width})")
        pad = cfg.kernel // 2
        for layer in self.s_encoder:
            x = T.conv2d(x, layer.W, layer.b, cfg.stride, pad)
            x = T.batch_norm(x, layer.gamma, layer.beta, layer.stats, self.training)
            x = T.relu(x)
        return x

    def s_decode(self, z: Tensor) -> Tensor:
        cfg = self.config
        pad = cfg.kernel // 2
        op = cfg.stride - 1 if cfg.stride > 1 else 0
        for layer in self.s_decoder:
            z = T.conv_transpose2d(z, layer.W, layer.b, cfg.stride, pad, op)
            if layer.gamma is not None:
                z = T.batch_norm(z, layer.gamma, layer.beta, layer.stats, self.training)
                z = T.relu(z)
        return z

    # ----------------------------------------------------------- recurrent

    def _zero_state(self, n: int) -> CellState:
        hh, ww = self.config.latent_hw
        return CellState.zeros(n, self.config.hidden, hh, ww, self.dtype)

    def encode_sequence(self, frames: Sequence[Tensor], features: Optional[Sequence[Tensor]] = None
                        ) -> Tuple[List[CellState], List[List[AttentionMap]]]:
        """Run the encoder over t = 1..T.

        Returns the final (pre-attention) state of every layer and the
        attention maps indexed ``[layer][t]`` (empty lists without attention).
        """
        L = self.config.st_depth
        n = frames[0].shape[0]
        temporal = [self._zero_state(n) for _ in range(L)]
        final: List[CellState] = [None] * L
        maps: List[List[AttentionMap]] = [[] for _ in range(L)]
        for t, frame in enumerate(frames):
            x = features[t] if features is not None else self.s_encode(frame)
            c_below = None
            for l in range(L):
                s = cells.step(self.encoder[l], x, c_below, temporal[l])
                final[l] = s
                h_next = s.H
                if self.attention is not None:
                    amap = compute_attention(self.attention[l], s.H, l, t)
                    maps[l].append(amap)
                    h_next = apply_attention(s.H, amap)
                temporal[l] = CellState(h_next, s.C)
                x, c_below = s.H, s.C
        return final, maps

    @staticmethod
    def handoff(states: Sequence[CellState]) -> List[CellState]:
        """Decoder start states: the encoder's final (H, C) per layer, unchanged."""
        return [CellState(s.H, s.C) for s in states]

    def decode_sequence(self, states: Sequence[CellState], maps: Sequence[Sequence[AttentionMap]],
                        T_len: int, policy: FeedPolicy,
                        targets: Optional[Sequence[Tensor]] = None) -> List[Tensor]:
        """Run the decoder from t = T down to 1; returns reconstructions ordered t = 1..T."""
        L = self.config.st_depth
        if self.attention is not None and any(len(m) != T_len for m in maps):
            raise ValueError("attention maps missing for some timesteps")
        n = states[0].H.shape[0]
        hh, ww = self.config.latent_hw
        dec = self.handoff(states)
        outputs: List[Optional[Tensor]] = [None] * T_len
        for t in reversed(range(T_len)):
            if t == T_len - 1:
                x = T.zeros((n, self.config.hidden, hh, ww), self.dtype)
            else:
                theta = policy.theta(n)
                if targets is None and np.any(theta == 1):
                    raise ValueError("teacher forcing needs targets")
                fed = scheduled_sample(targets[t + 1], outputs[t + 1], theta) if targets is not None \
                    else outputs[t + 1]
                x = self.s_encode(fed)
            c_below = None
            for l in range(L):
                s = cells.step(self.decoder[l], x, c_below, dec[l])
                h = s.H
                if self.attention is not None:
                    h = release_attention(h, maps[l][t])
                dec[l] = CellState(h, s.C)
                x, c_below = h, s.C
            outputs[t] = self.s_decode(x)
        return outputs

    def forward(self, frames: Sequence[Tensor], policy: Optional[FeedPolicy] = None,
                targets: Optional[Sequence[Tensor]] = None) -> List[Tensor]:
        """Reconstruct ``frames``. ``targets`` are what teacher forcing feeds
        the decoder; they default to ``frames``."""
        policy = policy if policy is not None else FeedPolicy.free()
        states, maps = self.encode_sequence(frames)
        return self.decode_sequence(states, maps, len(frames), policy,
                                    targets if targets is not None else frames)

    def reconstruct(self, X: np.ndarray) -> np.ndarray:
        """Free-running reconstruction of ``(T, 2, h, w)`` or ``(n, T, 2, h, w)`` arrays, eval mode."""
        single = X.ndim == 4
        Xb = X[None] if single else X
        was = self.training
        self.eval()
        try:
            frames = [Tensor(np.ascontiguousarray(Xb[:, t], dtype=self.dtype)) for t in range(Xb.shape[1])]
            outs = self.forward(frames, FeedPolicy.free())
        finally:
            self.training = was
        Y = np.stack([o.data for o in outs], axis=1)
        return Y[0] if single else Y

    # ---------------------------------------------------------- checkpoint

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {name: p.data for name, p in self.named_parameters().items()}
        for name, st in self.bn_stats().items():
            arrays[f"{name}.running_mean"] = st.mean
            arrays[f"{name}.running_var"] = st.var
        return arrays

    def save(self, path, extra: Optional[dict] = None) -> None:
        """Write ``<path>`` (JSON manifest) and ``<path>.spt1`` (tensor blob)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {"format": "crrn-checkpoint/1", "config": self.config.to_dict(),
                "bn_initialized": {k: s.initialized for k, s in self.bn_stats().items()}}
        if extra:
            meta["extra"] = extra
        spt.write_bundle(path.with_name(path.name + ".spt1"), path, self.state_arrays(), meta)

    @classmethod
    def load(cls, path) -> "CrrnModel":
        arrays, manifest = spt.read_bundle(path)
        if manifest.get("format") != "crrn-checkpoint/1":
            raise ConfigError(f"{path} is not a model checkpoint")
        model = cls(CrrnConfig.from_dict(manifest["config"]))
        for name, p in model.named_parameters().items():
            if name not in arrays or arrays[name].shape != p.shape:
                raise ConfigError(f"checkpoint entry {name} missing or misshapen")
            p.data = arrays[name].astype(model.dtype)
            p.grad = np.zeros_like(p.data)
        for name, st in model.bn_stats().items():
            st.mean = arrays[f"{name}.running_mean"].astype(model.dtype)
            st.var = arrays[f"{name}.running_var"].astype(model.dtype)
            st.initialized = bool(manifest["bn_initialized"][name])
        return model


# ----------------------------------------------------------- anomaly maps

@dataclass
class AnomalyMap:
    """Reconstruction error on the volume channel, ``(..., T, h, w)``.

    Positive values mean more solder than the model expects.
    """
    epsilon: np.ndarray

    def masks(self, threshold: float, pool_k: int = 4) -> np.ndarray:
        """Excessive / insufficient binary channels, ``(..., T, 2, h, w)``."""
        return binarize_channels(self.epsilon, threshold, pool_k)


def reconstruction_error(X_in: np.ndarray, X_out: np.ndarray) -> AnomalyMap:
    X_in, X_out = np.asarray(X_in), np.asarray(X_out)
    if X_in.shape != X_out.shape:
        raise T.ShapeError(f"input {X_in.shape} and reconstruction {X_out.shape} differ")
    return AnomalyMap((X_in[..., 0, :, :] - X_out[..., 0, :, :]).astype(np.float64))


def save_config(path, config: CrrnConfig) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))


def jitter_parameters(model: CrrnModel, rng: np.random.Generator, gain: float = 3.0,
                      noise: float = 0.2) -> None:
    """Move every parameter to a generic point: scale weights by ``gain`` and
    add N(0, noise^2) everywhere (gamma around 1).

    Used before finite-difference checks. At the default init many partials
    are ~1e-9, where the checker's relative error is dominated by roundoff.
    """
    for p in model.parameters():
        if p.name.endswith(".gamma"):
            p.data = (1.0 + noise * rng.standard_normal(p.shape)).astype(p.dtype)
        else:
            p.data = (p.data * gain + noise * rng.standard_normal(p.shape)).astype(p.dtype)
        p.grad = np.zeros_like(p.data)
