"""Dataset generation from a config, and batch scoring of datasets.

Shared by the command line and by longer experiment scripts.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import List, Optional, Sequence

import numpy as np

from . import evaluation as ev
from . import synth
from .model import ConfigError, CrrnModel, reconstruction_error
from .synth import DefectKind, SpiSequence

KINDS = ("normal", "random", "defect")


@dataclass
class GeneratorConfig:
    kind: str = "normal"
    n: int = 100
    seed: int = 0
    layout_seed: int = 0
    height: int = 32
    width: int = 32
    n_pads: int = 120
    n_groups: int = 6
    T: int = 20
    T_c: int = 5
    amp_clean: float = 0.3
    amp_blade: float = 0.05
    sigma_noise: float = 0.01
    pad_noise: float = 1.0
    p_a: float = 0.1
    mu_noise: float = 5.0
    sigma_anom: float = 0.1
    sign_mode: str = "sequence"
    defect: str = "support"
    amplitude: float = 5.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        for name in ("n", "seed", "layout_seed", "height", "width", "n_pads", "n_groups", "T", "T_c"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ConfigError(f"{name} must be a non-negative integer, got {v!r}")
        if not 0.0 <= self.p_a <= 1.0:
            raise ConfigError("p_a must lie in [0, 1]")
        if self.sign_mode not in ("sequence", "pad"):
            raise ConfigError(f"unknown sign_mode {self.sign_mode!r}")
        if self.defect not in {k.value for k in DefectKind}:
            raise ConfigError(f"unknown defect {self.defect!r}")
        if self.T_c < 2 or self.amplitude <= 0:
            raise ConfigError("T_c must be >= 2 and amplitude > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**d)


def generate(cfg: GeneratorConfig) -> List[SpiSequence]:
    """Sequence i uses normal seed ``seed + i`` and anomaly seed ``seed + 1_000_003 + i``,
    so a normal and an anomalous dataset with the same seed share their clean boards."""
    lay = synth.generate_layout(cfg.layout_seed, cfg.height, cfg.width, cfg.n_groups, cfg.n_pads)
    out = []
    for i in range(cfg.n):
        s = synth.generate_normal(lay, T=cfg.T, T_c=cfg.T_c, amp_clean=cfg.amp_clean,
                                  amp_blade=cfg.amp_blade, sigma_noise=cfg.sigma_noise,
                                  seed=cfg.seed + i, pad_noise=cfg.pad_noise)
        a_seed = cfg.seed + 1_000_003 + i
        if cfg.kind == "random":
            s = synth.inject_random(s, cfg.p_a, cfg.mu_noise, cfg.sigma_anom, a_seed, cfg.sign_mode)
        elif cfg.kind == "defect":
            s = synth.inject_defect(s, cfg.defect, cfg.amplitude, a_seed)
        out.append(s)
    return out


def stack(seqs: Sequence[SpiSequence]) -> np.ndarray:
    return np.stack([s.frames for s in seqs])


def anomaly_maps(model: CrrnModel, seqs: Sequence[SpiSequence], batch_size: int = 16) -> np.ndarray:
    """Reconstruction error ``(n, T, h, w)`` for each sequence, in chunks."""
    X = stack(seqs)
    parts = []
    for i in range(0, len(X), batch_size):
        chunk = X[i:i + batch_size]
        parts.append(reconstruction_error(chunk, model.reconstruct(chunk)).epsilon)
    return np.concatenate(parts) if parts else np.zeros((0,) + X.shape[1:2] + X.shape[3:])


def crrn_pad_scores(maps: np.ndarray, seqs: Sequence[SpiSequence]) -> ev.PadScores:
    """Per-pad scores of every sequence, flattened into one set."""
    return ev.PadScores.concat([ev.crrn_scores(m, s.layout, s.labels) for m, s in zip(maps, seqs)])


def baseline_pad_scores(seqs: Sequence[SpiSequence], window: str = "board") -> ev.PadScores:
    return ev.PadScores.concat([ev.statistical_detect(s, window=window) for s in seqs])


def per_board(maps: Optional[np.ndarray], seqs: Sequence[SpiSequence], window: str = "board") -> ev.PadScores:
    """Scores kept as ``(T, n * n_pads)``: board index preserved for recall profiles.

    CRRN scores when ``maps`` is given, z-scores otherwise.
    """
    if maps is None:
        items = [ev.statistical_detect(s, window=window) for s in seqs]
    else:
        items = [ev.crrn_scores(m, s.layout, s.labels) for m, s in zip(maps, seqs)]
    return ev.PadScores(np.concatenate([x.score for x in items], axis=1),
                        np.concatenate([x.label for x in items], axis=1))
