"""Interpretable per-agent scene descriptors.

Seven components per segment, in this order: mean speed, speed variance,
max speed, local density, mean inter-agent distance, mean curvature and the
speed relative to the nearest neighbour.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSegment
from .trajdata import DEFAULT_DT

FEATURE_NAMES = (
    "mean_speed",
    "speed_variance",
    "max_speed",
    "local_density",
    "mean_interagent_distance",
    "mean_curvature",
    "rel_speed_to_nearest",
)
N_FEATURES = len(FEATURE_NAMES)

# Isolated agents get this many r_neighbor radii as their "far away" distance.
ISOLATED_DISTANCE_FACTOR = 10.0


@dataclass(frozen=True)
class FeatureConfig:
    r_neighbor: float = 2.0
    curvature_epsilon: float = 1e-6
    dt: float = DEFAULT_DT
    per_frame_units: bool = False
    # Turns with |sin(angle)| below this count as straight; keeps round-off
    # in long straight tracks from showing up as curvature.
    collinear_tolerance: float = 1e-9

    def __post_init__(self):
        if not self.r_neighbor > 0:
            raise ValueError("r_neighbor must be positive")
        if not self.curvature_epsilon > 0:
            raise ValueError("curvature_epsilon must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.collinear_tolerance < 0:
            raise ValueError("collinear_tolerance must be non-negative")

    @property
    def time_unit(self):
        """Divisor turning per-frame displacement into speed."""
        return 1.0 if self.per_frame_units else self.dt


@dataclass(frozen=True)
class SceneFeatureVector:
    mean_speed: float
    speed_variance: float
    max_speed: float
    local_density: float
    mean_interagent_distance: float
    mean_curvature: float
    rel_speed_to_nearest: float
    isolated: bool = False

    def as_array(self):
        return np.array([getattr(self, n) for n in FEATURE_NAMES], dtype=float)

    @classmethod
    def from_array(cls, values, isolated=False):
        values = [float(v) for v in values]
        if len(values) != N_FEATURES:
            raise ValueError(f"expected {N_FEATURES} components, got {len(values)}")
        return cls(*values, isolated=isolated)


def speed_stats(segment, dt):
    """Return (mean, variance, max) of the per-step observed speeds."""
    obs = segment.observed
    if len(obs) < 2:
        raise DegenerateSegment(f"agent {segment.agent_id}: speed needs >= 2 observed points")
    speeds = np.linalg.norm(np.diff(obs, axis=0), axis=1) / dt
    mean = speeds.mean()
    var = np.mean((speeds - mean) ** 2)
    return float(mean), float(var), float(speeds.max())


def _others(segment, window):
    # Sorted by id so sums do not depend on agent order inside the window.
    return sorted((s for s in window.segments if s.agent_id != segment.agent_id), key=lambda s: s.agent_id)


def local_density(segment, window, cfg):
    """Return (mean neighbour count within r_neighbor, mean distance to others).

    Both are averaged over the observed frames. A lone agent gets density 0
    and a far sentinel distance of ``10 * r_neighbor``.
    """
    others = _others(segment, window)
    if not others:
        return 0.0, ISOLATED_DISTANCE_FACTOR * cfg.r_neighbor
    other_pos = np.stack([s.observed for s in others])  # (M, T, 2)
    dist = np.linalg.norm(other_pos - segment.observed[None], axis=2)
    density = np.mean(np.sum(dist < cfg.r_neighbor, axis=0))
    return float(density), float(dist.mean())


def curvature_profile(segment, cfg):
    """Mean discrete curvature over the interior observed points.

    Steps shorter than ``cfg.curvature_epsilon`` contribute zero, as do turns
    whose sine is below ``cfg.collinear_tolerance``.
    """
    obs = segment.observed
    if len(obs) < 3:
        raise DegenerateSegment(f"agent {segment.agent_id}: curvature needs >= 3 observed points")
    d = np.diff(obs, axis=0)
    fwd, back = d[1:], d[:-1]
    cross = np.abs(fwd[:, 0] * back[:, 1] - fwd[:, 1] * back[:, 0])
    step = np.linalg.norm(fwd, axis=1)
    ok = step >= cfg.curvature_epsilon
    ok &= cross > cfg.collinear_tolerance * step * np.linalg.norm(back, axis=1)
    kappa = np.zeros_like(step)
    kappa[ok] = cross[ok] / step[ok] ** 3
    return float(kappa.mean())


def relative_velocity_to_nearest(segment, window, dt):
    """Speed of the agent relative to its nearest neighbour at the last observed frame.

    Ties on distance go to the lowest agent id so the result does not depend
    on agent order inside the window.
    """
    others = _others(segment, window)
    if not others:
        return 0.0
    here = segment.observed[-1]
    nearest = min(others, key=lambda s: (float(np.linalg.norm(s.observed[-1] - here)), s.agent_id))
    v_i = (segment.observed[-1] - segment.observed[-2]) / dt
    v_j = (nearest.observed[-1] - nearest.observed[-2]) / dt
    return float(np.linalg.norm(v_i - v_j))


def extract(segment, window, cfg=None):
    cfg = cfg or FeatureConfig()
    unit = cfg.time_unit
    curvature = curvature_profile(segment, cfg)
    mean, var, vmax = speed_stats(segment, unit)
    density, dist = local_density(segment, window, cfg)
    rel = relative_velocity_to_nearest(segment, window, unit)
    return SceneFeatureVector(
        mean, var, vmax, density, dist, curvature, rel, isolated=len(window.segments) == 1
    )


def extract_window(window, cfg=None):
    """Feature matrix for every segment of a window, shape (N, 7)."""
    return np.stack([extract(s, window, cfg).as_array() for s in window.segments])


def extract_all(windows, cfg=None):
    """Stack features over windows.

    Returns the (n, 7) matrix and a parallel list of (window_id, agent_id) keys.
    """
    rows, keys = [], []
    for w in windows:
        rows.append(extract_window(w, cfg))
        keys.extend((w.window_id, a) for a in w.agent_ids)
    if not rows:
        return np.zeros((0, N_FEATURES)), keys
    return np.concatenate(rows), keys


def write_feature_csv(path, features, keys):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("window_id", "agent_id") + FEATURE_NAMES)
        for (wid, aid), row in zip(keys, features):
            w.writerow([wid, aid] + [repr(float(v)) for v in row])


def read_feature_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        keys, rows = [], []
        for row in reader:
            keys.append((int(row[0]), int(row[1])))
            rows.append([float(v) for v in row[2:]])
    return np.array(rows, dtype=float).reshape(-1, N_FEATURES), keys
