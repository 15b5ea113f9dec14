"""Trajectory ingestion, fixed-length windowing and rigid/scale augmentation.

Input files are whitespace separated ``frame agent x y`` lines (extra
columns ignored, ``#`` starts a comment), the layout most pedestrian
datasets are exported in.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import EmptyDataset, InvalidWindowParams, ParseError

DEFAULT_DT = 0.4


def _frozen(arr):
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RawRecord:
    frame_id: int
    agent_id: int
    x: float
    y: float

    @property
    def position(self):
        return (self.x, self.y)


@dataclass(frozen=True, eq=False)
class TrajectorySegment:
    """One agent's observed history and ground-truth future, shape (T, 2)."""

    agent_id: int
    observed: np.ndarray
    future: np.ndarray
    frame_start: int = 0
    dt: float = DEFAULT_DT

    def __post_init__(self):
        obs = _frozen(self.observed)
        fut = _frozen(self.future)
        if obs.ndim != 2 or obs.shape[1] != 2 or fut.ndim != 2 or fut.shape[1] != 2:
            raise ValueError("observed/future must have shape (T, 2)")
        if len(obs) < 1 or len(fut) < 1:
            raise ValueError("observed and future need at least one point")
        if not (np.isfinite(obs).all() and np.isfinite(fut).all()):
            raise ValueError("non-finite coordinates in segment")
        object.__setattr__(self, "observed", obs)
        object.__setattr__(self, "future", fut)

    @property
    def t_obs(self):
        return len(self.observed)

    @property
    def t_pred(self):
        return len(self.future)

    def __eq__(self, other):
        if not isinstance(other, TrajectorySegment):
            return NotImplemented
        return (
            self.agent_id == other.agent_id
            and self.frame_start == other.frame_start
            and self.dt == other.dt
            and np.array_equal(self.observed, other.observed)
            and np.array_equal(self.future, other.future)
        )


@dataclass(frozen=True)
class SceneWindow:
    """Time-aligned segments of every agent present in one window."""

    window_id: int
    segments: tuple = field(default_factory=tuple)

    def __post_init__(self):
        segs = tuple(self.segments)
        if not segs:
            raise ValueError("a window needs at least one segment")
        first = segs[0]
        for s in segs[1:]:
            if (s.frame_start, s.t_obs, s.t_pred, s.dt) != (
                first.frame_start, first.t_obs, first.t_pred, first.dt
            ):
                raise ValueError("segments in a window must be time-aligned")
        object.__setattr__(self, "segments", segs)

    @property
    def frame_start(self):
        return self.segments[0].frame_start

    @property
    def dt(self):
        return self.segments[0].dt

    @property
    def t_obs(self):
        return self.segments[0].t_obs

    @property
    def t_pred(self):
        return self.segments[0].t_pred

    @property
    def agent_ids(self):
        return [s.agent_id for s in self.segments]

    def observed_array(self):
        """Stacked observations, shape (N, T_obs, 2)."""
        return np.stack([s.observed for s in self.segments])

    def future_array(self):
        return np.stack([s.future for s in self.segments])

    def segment(self, agent_id):
        for s in self.segments:
            if s.agent_id == agent_id:
                return s
        raise KeyError(agent_id)


@dataclass(frozen=True)
class AugmentParams:
    scale: float = 1.0
    rotation: float = 0.0
    translation: tuple = (0.0, 0.0)
    pivot: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not math.isfinite(self.rotation):
            raise ValueError("rotation must be finite")
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))
        object.__setattr__(self, "pivot", tuple(float(v) for v in self.pivot))

    @property
    def is_identity(self):
        return self.scale == 1.0 and self.rotation == 0.0 and self.translation == (0.0, 0.0)

    def inverse(self):
        """Analytic inverse: augment(augment(w, p), p.inverse()) == w."""
        new_pivot = (self.pivot[0] + self.translation[0], self.pivot[1] + self.translation[1])
        return AugmentParams(
            scale=1.0 / self.scale,
            rotation=-self.rotation,
            translation=(-self.translation[0], -self.translation[1]),
            pivot=new_pivot,
        )

    def matrix(self):
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])


def parse_dataset(path, dt=DEFAULT_DT):
    """Read a ``frame agent x y`` file into records sorted by (frame, agent).

    Raises ``FileNotFoundError`` for a missing path, ``ParseError`` naming the
    first malformed line, and ``EmptyDataset`` when nothing valid was read.
    ``dt`` is accepted for interface symmetry; records carry frame ticks only.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trajectory file not found: {path}")
    records = {}
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.replace(",", " ").split()
            if len(parts) < 4:
                raise ParseError(lineno, f"expected 4 fields, got {len(parts)}")
            try:
                frame = float(parts[0])
                agent = float(parts[1])
                x = float(parts[2])
                y = float(parts[3])
            except ValueError:
                raise ParseError(lineno, "non-numeric field") from None
            if frame != int(frame) or agent != int(agent):
                raise ParseError(lineno, "frame and agent ids must be integers")
            if frame < 0:
                raise ParseError(lineno, "negative frame id")
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ParseError(lineno, "non-finite position")
            key = (int(frame), int(agent))
            if key in records:
                raise ParseError(lineno, f"duplicate record for frame {key[0]}, agent {key[1]}")
            records[key] = RawRecord(key[0], key[1], x, y)
    if not records:
        raise EmptyDataset(f"no trajectory records in {path}")
    return [records[k] for k in sorted(records)]


def window_segments(records, t_obs, t_pred, stride=1, dt=DEFAULT_DT):
    """Cut records into fixed-length scene windows.

    Window starts are ``first_frame + j * stride``. An agent joins a window
    only if it has a position at every one of the ``t_obs + t_pred`` frames;
    windows left with no agents are dropped. Window ids are assigned in
    start-frame order.
    """
    if t_obs < 3 or t_pred < 1 or stride < 1:
        raise InvalidWindowParams(
            f"need t_obs >= 3, t_pred >= 1, stride >= 1 (got {t_obs}, {t_pred}, {stride})"
        )
    if not records:
        return []
    tracks = defaultdict(dict)
    for r in records:
        tracks[r.agent_id][r.frame_id] = (r.x, r.y)
    first = min(r.frame_id for r in records)
    last = max(r.frame_id for r in records)
    length = t_obs + t_pred
    windows = []
    for start in range(first, last - length + 2, stride):
        frames = range(start, start + length)
        segs = []
        for agent in sorted(tracks):
            track = tracks[agent]
            if all(f in track for f in frames):
                pts = [track[f] for f in frames]
                segs.append(
                    TrajectorySegment(agent, pts[:t_obs], pts[t_obs:], frame_start=start, dt=dt)
                )
        if segs:
            windows.append(SceneWindow(len(windows), tuple(segs)))
    return windows


def _transform(points, mat, pivot, shift):
    return (points - pivot) @ mat.T + pivot + shift


def augment(window, params):
    """Apply ``scale * R(rotation) * (p - pivot) + pivot + translation``."""
    if params.is_identity:
        return window
    mat = params.matrix()
    pivot = np.asarray(params.pivot)
    shift = np.asarray(params.translation)
    segs = tuple(
        replace(
            s,
            observed=_transform(s.observed, mat, pivot, shift),
            future=_transform(s.future, mat, pivot, shift),
        )
        for s in window.segments
    )
    return SceneWindow(window.window_id, segs)


def random_augment_params(rng, scale_range=(1.0, 1.0), max_translation=5.0):
    """Draw rotation uniformly on the circle, translation in a square."""
    lo, hi = scale_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    return AugmentParams(
        scale=scale,
        rotation=float(rng.uniform(-math.pi, math.pi)),
        translation=tuple(rng.uniform(-max_translation, max_translation, size=2)),
    )


WINDOW_CSV_HEADER = ("window_id", "agent_id", "frame", "x", "y")


def write_windows_csv(windows, path):
    """Dump windows as one row per (window_id, agent_id, frame, x, y)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(WINDOW_CSV_HEADER)
        for win in windows:
            for s in win.segments:
                pts = np.concatenate([s.observed, s.future])
                for i, (x, y) in enumerate(pts):
                    w.writerow([win.window_id, s.agent_id, s.frame_start + i, repr(float(x)), repr(float(y))])


def read_windows_csv(path, t_obs, t_pred, dt=DEFAULT_DT):
    """Inverse of :func:`write_windows_csv`."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"window file not found: {path}")
    rows = defaultdict(lambda: defaultdict(list))
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(header) != WINDOW_CSV_HEADER:
            raise ParseError(1, f"unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                wid, aid, frame = int(row[0]), int(row[1]), int(row[2])
                x, y = float(row[3]), float(row[4])
            except (ValueError, IndexError):
                raise ParseError(lineno, "malformed window row") from None
            rows[wid][aid].append((frame, x, y))
    windows = []
    for wid in sorted(rows):
        segs = []
        for aid in sorted(rows[wid]):
            pts = sorted(rows[wid][aid])
            if len(pts) != t_obs + t_pred:
                raise ParseError(0, f"window {wid} agent {aid}: expected {t_obs + t_pred} frames")
            xy = [(p[1], p[2]) for p in pts]
            segs.append(TrajectorySegment(aid, xy[:t_obs], xy[t_obs:], frame_start=pts[0][0], dt=dt))
        windows.append(SceneWindow(wid, tuple(segs)))
    return windows


def write_trajectory_file(windows, path):
    """Write windows back out in the ``frame agent x y`` ingestion format."""
    lines = []
    for win in windows:
        for s in win.segments:
            pts = np.concatenate([s.observed, s.future])
            for i, (x, y) in enumerate(pts):
                lines.append((s.frame_start + i, s.agent_id, repr(float(x)), repr(float(y))))
    lines.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w") as fh:
        fh.write("# frame agent x y\n")
        for f, a, x, y in lines:
            fh.write(f"{f} {a} {x} {y}\n")
