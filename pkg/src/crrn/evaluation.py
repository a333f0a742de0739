"""Pad-level scoring, precision/recall sweeps and anomaly-map binarization.

Scores are kept as dense ``(T, n_pads)`` arrays rather than lists of
records; a :class:`PadScores` holds one score and one signed label per
(board, pad). Positive scores point at excessive solder, negative at
insufficient solder, for both the statistical baseline (z-scores) and
reconstruction errors.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .synth import BoardLayout, SpiSequence

log = logging.getLogger(__name__)

POLARITIES = ("excessive", "insufficient")


class DegenerateLabelsError(ValueError):
    pass


@dataclass
class PadScores:
    score: np.ndarray   # (T, n_pads) float
    label: np.ndarray   # (T, n_pads) int8 in {-1, 0, 1}

    def __post_init__(self):
        self.score = np.asarray(self.score, dtype=np.float64)
        self.label = np.asarray(self.label, dtype=np.int8)
        if self.score.shape != self.label.shape:
            raise ValueError(f"score shape {self.score.shape} != label shape {self.label.shape}")

    @property
    def T(self) -> int:
        return self.score.shape[0]

    def records(self):
        """Iterate (pad id, t, score, label) tuples, t counted from 1."""
        T, n = self.score.shape
        for t in range(T):
            for p in range(n):
                yield p, t + 1, float(self.score[t, p]), int(self.label[t, p])

    @staticmethod
    def concat(items: Sequence["PadScores"]) -> "PadScores":
        """Flatten several score sets into one ``(1, N)`` set for curve sweeps."""
        s = np.concatenate([x.score.ravel() for x in items])
        lab = np.concatenate([x.label.ravel() for x in items])
        return PadScores(s[None, :], lab[None, :])


def statistical_detect(seq: SpiSequence, layout: Optional[BoardLayout] = None,
                       window: str = "board") -> PadScores:
    """Per-shape-group z-scores of pad volumes.

    ``window="board"`` takes group mean/std over the pads of each board,
    ``"sequence"`` pools all boards of the sequence.
    """
    if window not in ("board", "sequence"):
        raise ValueError(f"unknown window {window!r}")
    layout = layout or seq.layout
    vol = seq.pad_volumes().astype(np.float64)
    z = np.zeros_like(vol)
    groups = layout.pad_groups
    for g in np.unique(groups):
        sel = groups == g
        if sel.sum() < 2:
            warnings.warn(f"shape group {g} has {int(sel.sum())} pad(s); scored 0")
            continue
        v = vol[:, sel]
        if window == "board":
            mean = v.mean(axis=1, keepdims=True)
            sd = v.std(axis=1, ddof=1, keepdims=True)
        else:
            mean, sd = v.mean(), v.std(ddof=1)
        z[:, sel] = np.where(sd > 0, (v - mean) / np.where(sd > 0, sd, 1.0), 0.0)
    return PadScores(z, seq.pad_labels())


def crrn_scores(anomaly_map: np.ndarray, layout: BoardLayout, labels=None) -> PadScores:
    """Mean reconstruction error over each pad footprint, per board.

    ``anomaly_map`` is ``(T, h, w)``; ``labels`` the matching cell labels.
    """
    eps = np.asarray(anomaly_map, dtype=np.float64)
    if eps.ndim == 2:
        eps = eps[None]
    idx = layout.pad_index_map()
    on = idx >= 0
    n = layout.n_pads
    counts = np.bincount(idx[on], minlength=n).astype(np.float64)
    sums = np.stack([np.bincount(idx[on], weights=e[on], minlength=n) for e in eps])
    score = sums / np.maximum(counts, 1.0)
    if labels is None:
        lab = np.zeros(score.shape, dtype=np.int8)
    else:
        labels = np.asarray(labels)
        if labels.ndim == 2:
            labels = labels[None]
        p = layout.pads
        lab = labels[:, p[:, 0], p[:, 1]] if n else np.zeros(score.shape, dtype=np.int8)
    return PadScores(score, lab)


def _oriented(scores: PadScores, polarity: str):
    if polarity == "excessive":
        return scores.score.ravel(), scores.label.ravel() == 1
    if polarity == "insufficient":
        return -scores.score.ravel(), scores.label.ravel() == -1
    raise ValueError(f"unknown polarity {polarity!r}")


@dataclass
class PRCurve:
    polarity: str
    threshold: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}


def pr_curve(scores: PadScores, polarity: str = "excessive", n_thresholds: int = 200) -> PRCurve:
    """Sweep thresholds over the oriented score range.

    Excessive: predicted positive iff ``score > theta`` against +1 labels.
    Insufficient: predicted positive iff ``score < -theta`` against -1 labels.
    Precision is taken as 1 where nothing is predicted.
    """
    s, pos = _oriented(scores, polarity)
    n_pos = int(pos.sum())
    if n_pos == 0 or n_pos == len(s):
        raise DegenerateLabelsError(
            f"{polarity}: need both positive and negative labels, got {n_pos}/{len(s)} positive")
    lo, hi = float(s.min()), float(s.max())
    if hi > lo:
        thr = np.linspace(lo, hi, n_thresholds)
    else:
        thr = np.array([lo - 1.0, lo])
    # counts of scores strictly above each threshold
    s_pos = np.sort(s[pos])
    s_neg = np.sort(s[~pos])
    tp = len(s_pos) - np.searchsorted(s_pos, thr, side="right")
    fp = len(s_neg) - np.searchsorted(s_neg, thr, side="right")
    fn = n_pos - tp
    predicted = tp + fp
    precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 1.0)
    recall = tp / n_pos
    return PRCurve(polarity, thr, precision, recall, tp, fp, fn)


def f1(precision, recall):
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    denom = p + r
    out = np.where(denom > 0, 2 * p * r / np.where(denom > 0, denom, 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


def best_f1(curve: PRCurve):
    """Return (best F1, threshold achieving it); earliest threshold wins ties."""
    scores = f1(curve.precision, curve.recall)
    i = int(np.argmax(scores))
    return float(scores[i]), float(curve.threshold[i])


def recall_profile(scores: PadScores, threshold: float) -> List[Optional[float]]:
    """Recall at each board over labeled pads; None where a board has no labels.

    A +1 pad counts as found when its score exceeds ``threshold``, a -1 pad
    when its score is below ``-threshold``.
    """
    out: List[Optional[float]] = []
    for s, lab in zip(scores.score, scores.label):
        n = int(np.count_nonzero(lab))
        if n == 0:
            out.append(None)
            continue
        hit = ((lab == 1) & (s > threshold)) | ((lab == -1) & (s < -threshold))
        out.append(float(hit.sum()) / n)
    return out


def binarize_channels(anomaly_map: np.ndarray, threshold: float, pool_k: int = 4) -> np.ndarray:
    """Split an anomaly map into binary excessive / insufficient channels.

    Stride-1 max pooling widens excessive spots and min pooling widens
    insufficient ones before thresholding. Input ``(..., h, w)``, output
    ``(..., 2, h, w)`` uint8 with channel 0 excessive.
    """
    if pool_k < 1:
        raise ValueError("pool_k must be >= 1")
    eps = np.asarray(anomaly_map, dtype=np.float64)
    size = (1,) * (eps.ndim - 2) + (pool_k, pool_k)
    hi = ndimage.maximum_filter(eps, size=size, mode="constant", cval=-np.inf)
    lo = ndimage.minimum_filter(eps, size=size, mode="constant", cval=np.inf)
    out = np.stack([hi > threshold, lo < -threshold], axis=-3)
    return out.astype(np.uint8)


@dataclass
class EvalReport:
    curves: Dict[str, PRCurve]
    best: Dict[str, Dict[str, float]]
    recall_profile: Optional[Dict[str, list]] = None
    config: Dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "curves": {k: c.to_dict() for k, c in self.curves.items()},
            "best": self.best,
            "recall_profile": self.recall_profile,
            "config": self.config,
        }


def evaluate_scores(scores: PadScores, n_thresholds: int = 200,
                    thresholds: Optional[Dict[str, float]] = None, config=None) -> EvalReport:
    """PR curves and best F1 per polarity; optional fixed thresholds for recall profiles."""
    curves, best = {}, {}
    for pol in POLARITIES:
        try:
            c = pr_curve(scores, pol, n_thresholds)
        except DegenerateLabelsError as exc:
            log.warning("%s", exc)
            continue
        curves[pol] = c
        f, th = best_f1(c)
        best[pol] = {"f1": f, "threshold": th}
    profile = None
    if thresholds:
        profile = {pol: recall_profile(scores, th) for pol, th in thresholds.items()}
    return EvalReport(curves, best, profile, dict(config or {}))
