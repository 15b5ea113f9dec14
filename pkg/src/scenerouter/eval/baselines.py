"""Scene-agnostic schedulers used as ablation baselines."""

from __future__ import annotations

import numpy as np

from ..errors import AllZeroWeights
from ..experts import Prediction


def _stacked(pool, window):
    """Expert outputs as an (M, N, T_pred, 2) array."""
    return np.stack([np.stack([p.predicted for p in e.predict(window)]) for e in pool])


def uniform_ensemble(pool, window):
    """Coordinate-wise mean of every expert's prediction."""
    return weighted_ensemble(pool, window, np.ones(len(pool)))


def weighted_ensemble(pool, window, weights):
    """Convex combination of expert predictions; weights are normalized here."""
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(pool),):
        raise ValueError(f"need {len(pool)} weights, got {w.shape}")
    if (w < 0).any() or not np.isfinite(w).all():
        raise ValueError("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise AllZeroWeights("ensemble weights sum to zero")
    mixed = np.tensordot(w / total, _stacked(pool, window), axes=1)
    return [Prediction(a, mixed[i]) for i, a in enumerate(window.agent_ids)]


def inverse_ade_weights(global_ade):
    """Default ensemble weights proportional to 1 / ADE.

    An expert with zero ADE takes all the weight (shared equally among ties).
    """
    ade = np.asarray(global_ade, dtype=float)
    zero = ade <= 0
    if zero.any():
        return zero / zero.sum()
    inv = 1.0 / ade
    return inv / inv.sum()


def random_choices(n_experts, window, seed):
    """1-based expert index per segment, drawn from a (seed, window_id) stream."""
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, window.window_id])
    return rng.integers(1, n_experts + 1, size=len(window.segments))


def random_scheduler(pool, window, seed):
    """Route each segment to a uniformly drawn expert, ignoring the scene."""
    picks = random_choices(len(pool), window, seed)
    return [pool[int(i)].predict_agent(window, s.agent_id) for i, s in zip(picks, window.segments)]
