"""Synthetic solder-paste-inspection (SPI) sequences.

A board is a grid of cells. Pads are axis-aligned rectangles grouped by
aperture shape; every pad of a group shares the footprint and the nominal
volume statistics ``(mu_g, sigma_g)``. A sequence is ``T`` consecutive
boards stacked as ``(T, 2, h, w)``: channel 0 holds the normalized volume
``(v - mu_g) / sigma_g`` on pad cells (zero elsewhere), channel 1 the pad
mask.

Normal boards carry two temporal patterns shared by every pad: a sawtooth
that resets at each stencil cleaning (period ``T_c``) and an alternating
offset from the forward/backward squeegee strokes.

Anomalies are added on top of normal boards either as random whole-pad
offsets (``inject_random``) or as graded printer-defect patterns
(``inject_defect``). Labels are stored per cell as int8 in {-1, 0, +1}:
the sign of the injected offset, 0 for untouched cells.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import spt

log = logging.getLogger(__name__)

# Aperture footprints (rows, cols) assigned to shape groups in order.
FOOTPRINTS = [(1, 1), (1, 2), (2, 1), (2, 2), (1, 3), (3, 1), (2, 3), (3, 2)]


class LayoutError(RuntimeError):
    pass


@dataclass
class BoardLayout:
    height: int
    width: int
    # one row per pad: (row, col, group, footprint rows, footprint cols)
    pads: np.ndarray
    group_mu: np.ndarray
    group_sigma: np.ndarray
    seed: Optional[int] = None

    @property
    def n_pads(self) -> int:
        return len(self.pads)

    @property
    def n_groups(self) -> int:
        return len(self.group_mu)

    @property
    def pad_groups(self) -> np.ndarray:
        return self.pads[:, 2]

    def pad_index_map(self) -> np.ndarray:
        """(h, w) int array holding the pad id of each cell, -1 off-pad."""
        idx = np.full((self.height, self.width), -1, dtype=np.int64)
        for p, (r, c, _, ph, pw) in enumerate(self.pads):
            idx[r:r + ph, c:c + pw] = p
        return idx

    def pad_mask(self) -> np.ndarray:
        return (self.pad_index_map() >= 0).astype(np.float64)

    def pad_centers(self) -> np.ndarray:
        """(n_pads, 2) footprint centers in cell coordinates."""
        if self.n_pads == 0:
            return np.zeros((0, 2))
        p = self.pads.astype(np.float64)
        return np.stack([p[:, 0] + (p[:, 3] - 1) / 2, p[:, 1] + (p[:, 4] - 1) / 2], axis=1)

    def paint(self, pad_values: np.ndarray) -> np.ndarray:
        """Spread per-pad values (..., n_pads) over their footprints -> (..., h, w)."""
        pad_values = np.asarray(pad_values)
        idx = self.pad_index_map()
        lead = pad_values.shape[:-1]
        out = np.zeros(lead + (self.height, self.width), dtype=pad_values.dtype)
        on = idx >= 0
        out[..., on] = pad_values[..., idx[on]]
        return out

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "pads": self.pads.tolist(),
            "group_mu": self.group_mu.tolist(),
            "group_sigma": self.group_sigma.tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoardLayout":
        pads = np.asarray(d["pads"], dtype=np.int64).reshape(-1, 5)
        return cls(int(d["height"]), int(d["width"]), pads,
                   np.asarray(d["group_mu"], dtype=np.float64),
                   np.asarray(d["group_sigma"], dtype=np.float64), d.get("seed"))


def _distinct_uniform(rng, n, lo, hi, min_gap):
    for _ in range(1000):
        vals = rng.uniform(lo, hi, size=n)
        if n < 2 or np.min(np.diff(np.sort(vals))) >= min_gap:
            return vals
    raise LayoutError(f"could not draw {n} distinct values in [{lo}, {hi}]")


def generate_layout(seed: int, height: int = 32, width: int = 32, n_groups: int = 6,
                    n_pads: int = 120, max_tries: int = 5000) -> BoardLayout:
    """Place ``n_pads`` non-overlapping pads in package-like rows.

    Pads come in packages: a short row or column of identical footprints at
    pitch footprint+1. Packages keep a one-cell clearance from each other,
    so dense fine-pitch regions and empty board areas both occur.
    """
    if not 1 <= n_groups <= len(FOOTPRINTS):
        raise ValueError(f"n_groups must be in [1, {len(FOOTPRINTS)}], got {n_groups}")
    rng = np.random.default_rng(seed)
    mu = _distinct_uniform(rng, n_groups, 0.5, 1.5, 0.02)
    sigma = _distinct_uniform(rng, n_groups, 0.02, 0.08, 0.002)

    occupied = np.zeros((height, width), dtype=bool)
    pads: List[tuple] = []
    tries = 0
    while len(pads) < n_pads:
        if tries >= max_tries:
            raise LayoutError(
                f"placed {len(pads)}/{n_pads} pads after {max_tries} attempts on {height}x{width}")
        tries += 1
        g = int(rng.integers(n_groups))
        ph, pw = FOOTPRINTS[g]
        count = int(min(rng.integers(2, 9), n_pads - len(pads)))
        vertical = bool(rng.integers(2))
        step_r, step_c = (ph + 1, 0) if vertical else (0, pw + 1)
        ext_r = step_r * (count - 1) + ph
        ext_c = step_c * (count - 1) + pw
        if ext_r > height or ext_c > width:
            continue
        r0 = int(rng.integers(0, height - ext_r + 1))
        c0 = int(rng.integers(0, width - ext_c + 1))
        # clearance ring of one cell around the whole package
        if occupied[max(r0 - 1, 0):r0 + ext_r + 1, max(c0 - 1, 0):c0 + ext_c + 1].any():
            continue
        for k in range(count):
            r, c = r0 + k * step_r, c0 + k * step_c
            pads.append((r, c, g, ph, pw))
            occupied[r:r + ph, c:c + pw] = True
    pad_arr = np.asarray(pads, dtype=np.int64).reshape(-1, 5)
    return BoardLayout(height, width, pad_arr, mu, sigma, seed)


@dataclass
class SpiSequence:
    frames: np.ndarray                    # (T, 2, h, w) float32
    layout: BoardLayout
    labels: Optional[np.ndarray] = None   # (T, h, w) int8 in {-1, 0, 1}
    meta: Dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def volume(self) -> np.ndarray:
        return self.frames[:, 0]

    @property
    def mask(self) -> np.ndarray:
        return self.frames[:, 1]

    def pad_volumes(self) -> np.ndarray:
        """(T, n_pads) volume read at each pad's anchor cell."""
        p = self.layout.pads
        return self.frames[:, 0, p[:, 0], p[:, 1]]

    def pad_labels(self) -> np.ndarray:
        """(T, n_pads) int8 label read at each pad's anchor cell."""
        p = self.layout.pads
        if self.labels is None:
            return np.zeros((self.T, len(p)), dtype=np.int8)
        return self.labels[:, p[:, 0], p[:, 1]]


def sawtooth(t, period: int, phase: int = 0):
    """Linear ramp in [0, 1) that resets every ``period`` boards."""
    return ((np.asarray(t) + phase) % period) / period


def blade_sign(t):
    """+1 on forward-stroke boards (odd t), -1 on backward-stroke boards."""
    return np.where(np.asarray(t) % 2 == 1, 1.0, -1.0)


def temporal_pattern(T: int, T_c: int, amp_clean: float, amp_blade: float, phase: int = 0):
    """Raw-volume offset shared by every pad at boards t = 1..T."""
    t = np.arange(1, T + 1)
    return amp_clean * sawtooth(t, T_c, phase) + amp_blade * blade_sign(t)


def generate_normal(layout: BoardLayout, T: int = 20, T_c: int = 5, amp_clean: float = 0.3,
                    amp_blade: float = 0.05, sigma_noise: float = 0.01, seed: int = 0,
                    phase: Optional[int] = None, pad_noise: float = 1.0) -> SpiSequence:
    """Normal boards t = 1..T.

    Raw volume of pad p at board t::

        mu_g + amp_clean * saw(t) + amp_blade * (+-1) + N(0, sigma_g^2) + N(0, sigma_noise^2)

    stored normalized as ``(v - mu_g) / sigma_g``. ``phase`` shifts the
    cleaning cycle; by default it is drawn from the seed. ``pad_noise``
    scales the per-pad N(0, sigma_g^2) term (0 switches it off).
    """
    if T_c < 2:
        raise ValueError(f"cleaning period must be >= 2, got {T_c}")
    rng = np.random.default_rng(seed)
    if phase is None:
        phase = int(rng.integers(T_c))
    g = layout.pad_groups
    mu, sig = layout.group_mu[g], layout.group_sigma[g]
    n = layout.n_pads
    pattern = temporal_pattern(T, T_c, amp_clean, amp_blade, phase)
    raw = (mu[None, :] + pattern[:, None]
           + rng.standard_normal((T, n)) * sig[None, :] * pad_noise
           + rng.standard_normal((T, n)) * sigma_noise)
    norm = (raw - mu[None, :]) / sig[None, :] if n else raw
    frames = np.zeros((T, 2, layout.height, layout.width), dtype=np.float32)
    frames[:, 0] = layout.paint(norm)
    frames[:, 1] = layout.pad_mask()[None]
    meta = {"kind": "normal", "T": T, "T_c": T_c, "amp_clean": amp_clean,
            "amp_blade": amp_blade, "sigma_noise": sigma_noise, "pad_noise": pad_noise,
            "seed": seed, "phase": phase}
    return SpiSequence(frames, layout, None, meta)


def inject_random(seq: SpiSequence, p_a: float, mu_noise: float = 5.0, sigma_anom: float = 0.1,
                  seed: int = 0, sign_mode: str = "sequence") -> SpiSequence:
    """Whole-pad random anomalies.

    Each pad at each board is selected with probability ``p_a`` and receives
    one draw of N(+-mu_noise, sigma_anom^2). ``sign_mode`` picks where the
    sign is drawn: once per ``"sequence"`` (an excessive or an insufficient
    run), or independently per ``"pad"`` selection.
    """
    if not 0.0 <= p_a <= 1.0:
        raise ValueError(f"anomaly ratio must lie in [0, 1], got {p_a}")
    rng = np.random.default_rng(seed)
    lay = seq.layout
    shape = (seq.T, lay.n_pads)
    selected = rng.random(shape) < p_a
    if sign_mode == "sequence":
        sign = np.full(shape, 1.0 if rng.random() < 0.5 else -1.0)
    elif sign_mode == "pad":
        sign = np.where(rng.random(shape) < 0.5, 1.0, -1.0)
    else:
        raise ValueError(f"unknown sign_mode {sign_mode!r}")
    offset = sign * mu_noise + sigma_anom * rng.standard_normal(shape)
    offset = np.where(selected, offset, 0.0)
    pad_labels = (selected * sign).astype(np.int8)

    frames = seq.frames.copy()
    frames[:, 0] = (frames[:, 0] + lay.paint(offset)).astype(np.float32)
    labels = lay.paint(pad_labels).astype(np.int8)
    if seq.labels is not None:
        labels = np.where(labels != 0, labels, seq.labels).astype(np.int8)
    meta = dict(seq.meta, anomaly={"kind": "random", "p_a": p_a, "mu_noise": mu_noise,
                                   "sigma": sigma_anom, "seed": seed, "sign_mode": sign_mode,
                                   "sign": int(sign.flat[0]) if sign_mode == "sequence" and sign.size else 0})
    return SpiSequence(frames, lay, labels, meta)


class DefectKind(str, enum.Enum):
    SQUEEGEE_BLADE = "blade"
    SUPPORT = "support"
    REMOVED_AREA = "removed_area"
    NO_KNEADING = "no_kneading"
    CLAMP = "clamp"


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def defect_profile(kind, t, T: int, clamp_sign: float = 1.0):
    """Severity f(t) of a printer defect at board t (1 <= t <= T)."""
    kind = DefectKind(kind)
    t = np.asarray(t)
    s = _sigmoid(10.0 * t / T - 5.0)
    if kind is DefectKind.SQUEEGEE_BLADE:
        return np.where(t % 2 == 1, s, 0.0)
    if kind is DefectKind.SUPPORT:
        return s
    if kind is DefectKind.REMOVED_AREA:
        return -s
    if kind is DefectKind.NO_KNEADING:
        return 1.0 - s
    if clamp_sign not in (1.0, -1.0):
        raise ValueError("clamp sign must be +1 or -1")
    return clamp_sign * s


def _local_density(layout: BoardLayout, radius: int = 3) -> np.ndarray:
    centers = layout.pad_centers()
    d = np.abs(centers[:, None, :] - centers[None, :, :]).max(axis=2)
    return (d <= radius).sum(axis=1)


def defect_mask(kind, layout: BoardLayout, seed: int = 0, print_axis: int = 0,
                stripe_width: int = 1, edge_frac: float = 0.1) -> np.ndarray:
    """Boolean per-pad selection for a defect kind.

    ``print_axis`` is the array axis the squeegee travels along; a cracked
    blade leaves a stripe parallel to it.
    """
    kind = DefectKind(kind)
    rng = np.random.default_rng(seed)
    n = layout.n_pads
    if n == 0:
        return np.zeros(0, dtype=bool)
    pads = layout.pads
    centers = layout.pad_centers()
    H, W = layout.height, layout.width

    if kind is DefectKind.SQUEEGEE_BLADE:
        # stripe across the other axis; pick a position that hits pads
        across = 1 - print_axis
        lo = pads[:, across]
        hi = lo + pads[:, 3 + across]
        pos = int(lo[rng.integers(n)])
        return (lo < pos + stripe_width) & (hi > pos)

    if kind in (DefectKind.SUPPORT, DefectKind.NO_KNEADING):
        frac = 0.25 if kind is DefectKind.SUPPORT else 0.5
        # axis-aligned rectangle of the requested area fraction and random aspect
        aspect = rng.uniform(0.6, 1.0 / 0.6)
        rh = min(H, max(1, int(round(np.sqrt(frac * H * W * aspect)))))
        rw = min(W, max(1, int(round(frac * H * W / rh))))
        r0 = int(rng.integers(0, H - rh + 1))
        c0 = int(rng.integers(0, W - rw + 1))
        return ((centers[:, 0] >= r0) & (centers[:, 0] < r0 + rh)
                & (centers[:, 1] >= c0) & (centers[:, 1] < c0 + rw))

    if kind is DefectKind.REMOVED_AREA:
        # trailing quarter of the stroke, restricted to the denser half of its pads
        extent = H if print_axis == 0 else W
        band = centers[:, print_axis] >= 0.75 * extent
        if not band.any():
            return band
        dens = _local_density(layout)
        cut = np.median(dens[band])
        return band & (dens >= cut)

    # clamp: pads entirely inside the left/right edge bands
    edge = max(1, int(np.floor(edge_frac * W)))
    c_lo = pads[:, 1]
    c_hi = c_lo + pads[:, 4]
    return (c_hi <= edge) | (c_lo >= W - edge)


def inject_defect(seq: SpiSequence, kind, amplitude: float = 5.0, seed: int = 0,
                  floor_sigmas: float = 3.0, **mask_kw) -> SpiSequence:
    """Graded printer defect: board t gets ``mask * amplitude * f(t)``.

    Volumes are in units of sigma_g, so a pad is labeled at board t when
    ``|amplitude * f(t)|`` exceeds ``floor_sigmas``.
    """
    if amplitude <= 0:
        raise ValueError("amplitude must be positive")
    kind = DefectKind(kind)
    rng = np.random.default_rng(seed)
    clamp_sign = float(rng.choice([1.0, -1.0])) if kind is DefectKind.CLAMP else 1.0
    mask = defect_mask(kind, seq.layout, seed=int(rng.integers(2**31)), **mask_kw)
    T = seq.T
    f = defect_profile(kind, np.arange(1, T + 1), T, clamp_sign)
    offset = amplitude * f[:, None] * mask[None, :].astype(np.float64)
    lay = seq.layout
    frames = seq.frames.copy()
    frames[:, 0] = (frames[:, 0] + lay.paint(offset)).astype(np.float32)
    labelled = (np.abs(offset) > floor_sigmas) & mask[None, :]
    pad_labels = (np.sign(offset) * labelled).astype(np.int8)
    labels = lay.paint(pad_labels).astype(np.int8)
    meta = dict(seq.meta, anomaly={
        "kind": "defect", "defect": kind.value, "amplitude": amplitude, "seed": seed,
        "floor_sigmas": floor_sigmas, "clamp_sign": clamp_sign, "f": f.tolist(),
        "n_defect_pads": int(mask.sum())})
    return SpiSequence(frames, lay, labels, meta)


# ---------------------------------------------------------------- dataset I/O

def save_dataset(directory, sequences: Sequence[SpiSequence], config: Optional[dict] = None) -> None:
    """One SPT1 file per sequence (frames, and labels when present) plus JSON metadata."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    layouts = {}
    index = []
    for i, seq in enumerate(sequences):
        key = json.dumps(seq.layout.to_dict(), sort_keys=True)
        layout_id = layouts.setdefault(key, len(layouts))
        name = f"seq_{i:05d}"
        spt.save(d / f"{name}.spt1", seq.frames)
        entry = {"name": name, "layout": layout_id, "meta": seq.meta}
        if seq.labels is not None:
            spt.save(d / f"{name}_labels.spt1", seq.labels)
            entry["labels"] = True
        index.append(entry)
    header = {
        "format": "spi-dataset/1",
        "config": config or {},
        "layouts": [json.loads(k) for k in layouts],
        "sequences": index,
    }
    (d / "dataset.json").write_text(json.dumps(header, indent=1, sort_keys=True))


def load_dataset(directory) -> List[SpiSequence]:
    d = Path(directory)
    header = json.loads((d / "dataset.json").read_text())
    layouts = [BoardLayout.from_dict(x) for x in header["layouts"]]
    out = []
    for entry in header["sequences"]:
        frames = spt.load(d / f"{entry['name']}.spt1")
        labels = None
        if entry.get("labels"):
            labels = spt.load(d / f"{entry['name']}_labels.spt1").astype(np.int8)
        out.append(SpiSequence(frames, layouts[entry["layout"]], labels, entry["meta"]))
    return out


def dataset_config(directory) -> dict:
    return json.loads((Path(directory) / "dataset.json").read_text()).get("config", {})
