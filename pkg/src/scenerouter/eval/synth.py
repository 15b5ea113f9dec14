"""Seeded synthetic heterogeneous benchmark.

Five scene regimes, each generated with dynamics that one built-in expert
reproduces exactly or near-exactly:

* ``dense_crowd``   slow crowd with exponential pairwise repulsion (social_repulsion)
* ``medium_flow``   parallel straight walkers observed with position noise (kalman_cv)
* ``sparse_static`` a few far-apart, slowly drifting agents (constant_velocity)
* ``low_density``   sparse agents accelerating along straight lines (constant_acceleration)
* ``complex_motion`` fast agents on tight circular arcs drawn from a small
  shape vocabulary (nn_retrieval)

Regime tags are kept for diagnostics only; nothing in the training pipeline
reads them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from ..experts import repulsion_step
from ..trajdata import SceneWindow, TrajectorySegment

REGIMES = ("dense_crowd", "medium_flow", "sparse_static", "low_density", "complex_motion")

DT = 0.4
T_OBS = 8
T_PRED = 12

# Repulsion constants shared with the default social_repulsion expert.
CROWD_STRENGTH = 0.5
CROWD_RANGE = 0.5

FLOW_NOISE = 0.02
ARC_SPEEDS = (1.9, 2.3)
ARC_RADII = (1.6, 2.4)


@dataclass
class SyntheticBenchmark:
    windows: list
    regimes: dict = field(default_factory=dict)  # window_id -> regime name
    dt: float = DT
    t_obs: int = T_OBS
    t_pred: int = T_PRED
    seed: int = 0

    def regime_of(self, window_id):
        return self.regimes[window_id]

    def write_tags(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["window_id", "regime"])
            for wid in sorted(self.regimes):
                w.writerow([wid, self.regimes[wid]])


def _spread_points(rng, n, half_width, min_sep):
    pts = []
    while len(pts) < n:
        p = rng.uniform(-half_width, half_width, size=2)
        if all(np.hypot(*(p - q)) >= min_sep for q in pts):
            pts.append(p)
    return np.array(pts)


def _unit(angle):
    return np.array([math.cos(angle), math.sin(angle)])


def _triangle(rng, side):
    """Vertices of a randomly rotated equilateral triangle with the given side."""
    base = rng.uniform(-math.pi, math.pi)
    r = side / math.sqrt(3.0)
    return np.array([r * _unit(base + j * 2.0 * math.pi / 3.0) for j in range(3)])


def _dense_crowd(rng, length, dt):
    n = 5
    pos = _spread_points(rng, n, 0.9, 0.6)
    heading = rng.uniform(-math.pi, math.pi)
    speeds = rng.uniform(0.6, 0.75, size=n)
    dirs = heading + rng.normal(0.0, 0.1, size=n)
    step = np.column_stack([np.cos(dirs), np.sin(dirs)]) * (speeds * dt)[:, None]
    track = [pos]
    for _ in range(length - 1):
        pos, step = repulsion_step(pos, step, CROWD_STRENGTH, CROWD_RANGE, dt)
        track.append(pos)
    return np.stack(track, axis=1)


def _medium_flow(rng, length, dt):
    heading = rng.uniform(-math.pi, math.pi)
    along, across = _unit(heading), _unit(heading + math.pi / 2)
    lanes = (np.arange(3) - 1.0) * rng.uniform(3.8, 4.2)
    t = np.arange(length) * dt
    flow_speed = rng.uniform(1.0, 1.3)
    tracks = []
    for lane in lanes:
        speed = flow_speed + rng.normal(0.0, 0.02)
        start = lane * across + rng.uniform(-1.0, 1.0) * along
        clean = start + (speed * t)[:, None] * along
        tracks.append(clean + rng.normal(0.0, FLOW_NOISE, size=clean.shape))
    return np.stack(tracks)


def _sparse_static(rng, length, dt, t_obs):
    # Slow straight drift whose speed changes on the last observed step and keeps
    # the new one: only last-step extrapolation continues it exactly.
    pos = _triangle(rng, rng.uniform(10.0, 11.0))
    switch = t_obs - 2
    tracks = []
    for p in pos:
        d = _unit(rng.uniform(-math.pi, math.pi))
        v1, v2 = d * rng.uniform(0.0, 0.06), d * rng.uniform(0.0, 0.06)
        steps = np.array([v1 if i < switch else v2 for i in range(length - 1)]) * dt
        tracks.append(p + np.vstack([np.zeros(2), np.cumsum(steps, axis=0)]))
    return np.stack(tracks)


def _low_density(rng, length, dt):
    pos = _triangle(rng, rng.uniform(10.0, 11.0))
    heading = rng.uniform(-math.pi, math.pi)
    t = np.arange(length) * dt
    v_common, a_common = rng.uniform(0.6, 0.9), rng.uniform(0.17, 0.22)
    tracks = []
    for p in pos:
        d = _unit(heading + rng.normal(0.0, 0.05))
        v0 = v_common + rng.normal(0.0, 0.02)
        acc = a_common + rng.normal(0.0, 0.005)
        tracks.append(p + (v0 * t + 0.5 * acc * t**2)[:, None] * d)
    return np.stack(tracks)


def _complex_motion(rng, length, dt):
    # Agents circle their own centres in lock-step: one arc shape per window.
    centres = _triangle(rng, rng.uniform(3.0, 3.5))
    t = np.arange(length) * dt
    speed = ARC_SPEEDS[int(rng.integers(len(ARC_SPEEDS)))]
    radius = ARC_RADII[int(rng.integers(len(ARC_RADII)))]
    omega = speed / radius * (1 if rng.random() < 0.5 else -1)
    phase = rng.uniform(-math.pi, math.pi) + omega * t
    arc = radius * np.column_stack([np.cos(phase), np.sin(phase)])
    return np.stack([c + arc for c in centres])


GENERATORS = {
    "dense_crowd": _dense_crowd,
    "medium_flow": _medium_flow,
    "sparse_static": _sparse_static,
    "low_density": _low_density,
    "complex_motion": _complex_motion,
}


def synth_benchmark(seed=42, n_per_regime=200, t_obs=T_OBS, t_pred=T_PRED, dt=DT):
    """Generate ``len(REGIMES) * n_per_regime`` windows, regimes interleaved.

    Every window occupies its own block of frames and its own agent ids so the
    benchmark can be written to a trajectory file and re-windowed losslessly
    with ``stride == t_obs + t_pred``.
    """
    rng = np.random.default_rng(seed)
    length = t_obs + t_pred
    windows, regimes = [], {}
    next_agent = 0
    for i in range(n_per_regime * len(REGIMES)):
        regime = REGIMES[i % len(REGIMES)]
        gen = GENERATORS[regime]
        tracks = gen(rng, length, dt, t_obs) if gen is _sparse_static else gen(rng, length, dt)
        offset = rng.uniform(-50.0, 50.0, size=2)
        frame_start = i * length
        segs = []
        for track in tracks:
            track = track + offset
            segs.append(TrajectorySegment(next_agent, track[:t_obs], track[t_obs:],
                                          frame_start=frame_start, dt=dt))
            next_agent += 1
        windows.append(SceneWindow(i, tuple(segs)))
        regimes[i] = regime
    return SyntheticBenchmark(windows, regimes, dt, t_obs, t_pred, seed)
