"""Displacement metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import LengthMismatch


def as_track_array(tracks):
    """Stack predictions / ground truth into an (N, T, 2) float array.

    Accepts an array, a list of arrays or a list of objects with a
    ``predicted`` attribute.
    """
    if isinstance(tracks, np.ndarray):
        arr = tracks.astype(float, copy=False)
    else:
        items = [getattr(t, "predicted", t) for t in tracks]
        if not items:
            return np.zeros((0, 0, 2))
        lengths = {len(t) for t in items}
        if len(lengths) != 1:
            raise LengthMismatch(f"tracks of unequal length {sorted(lengths)}")
        arr = np.stack([np.asarray(t, dtype=float) for t in items])
    if arr.ndim == 2:
        arr = arr[None]
    return arr


def displacement(pred, truth):
    """Per-agent, per-step Euclidean error, shape (N, T)."""
    p, g = as_track_array(pred), as_track_array(truth)
    if p.shape != g.shape:
        raise LengthMismatch(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    return np.sqrt(((p - g) ** 2).sum(axis=-1))


def ade(pred, truth):
    err = displacement(pred, truth)
    if err.size == 0:
        raise LengthMismatch("no prediction steps to score")
    return float(np.mean(err))


def fde(pred, truth):
    err = displacement(pred, truth)
    if err.size == 0:
        raise LengthMismatch("no prediction steps to score")
    return float(np.mean(err[:, -1]))


@dataclass
class MetricResult:
    ade: float
    fde: float
    n_segments: int
    per_cluster: dict = field(default_factory=dict)  # label -> (ade, fde, n)

    @classmethod
    def from_segments(cls, seg_ade, seg_fde, labels=None):
        """Aggregate per-segment ADE/FDE; optional labels give the breakdown."""
        seg_ade = np.asarray(seg_ade, dtype=float)
        seg_fde = np.asarray(seg_fde, dtype=float)
        if not len(seg_ade):
            return cls(float("nan"), float("nan"), 0)
        per = {}
        if labels is not None:
            labels = np.asarray(labels)
            for lab in np.unique(labels):
                m = labels == lab
                per[int(lab)] = (float(seg_ade[m].mean()), float(seg_fde[m].mean()), int(m.sum()))
        return cls(float(seg_ade.mean()), float(seg_fde.mean()), len(seg_ade), per)
