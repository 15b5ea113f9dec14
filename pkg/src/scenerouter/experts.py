"""Built-in trajectory predictors and the expert pool.

Every expert maps a :class:`SceneWindow` to one deterministic prediction per
segment. Experts are frozen once registered in a pool; the router never
changes their parameters.
"""

from __future__ import annotations

import csv
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .errors import ArtifactError, DuplicateExpertName, EmptyBank


@dataclass(frozen=True, eq=False)
class Prediction:
    agent_id: int
    predicted: np.ndarray  # (T_pred, 2)


@dataclass(frozen=True)
class ExpertId:
    index: int  # 1-based position in the pool
    name: str
    cost_hint: float


def _linear_rollout(last, step, horizon):
    """``last + tau * step`` for tau = 1..horizon; shared so reductions stay bit-exact."""
    tau = np.arange(1, horizon + 1, dtype=float)[:, None]
    return last[None, :] + tau * step[None, :]


class Expert(ABC):
    kind = "expert"
    cost_hint = 1.0

    def __init__(self, name=None):
        self.name = name or self.kind

    @abstractmethod
    def predict(self, window):
        """Return a list of :class:`Prediction`, one per segment, in window order."""

    def predict_agent(self, window, agent_id):
        """Prediction for a single agent, with the rest of the window as context."""
        for p in self.predict(window):
            if p.agent_id == agent_id:
                return p
        raise KeyError(f"agent {agent_id} not in window {window.window_id}")

    def params(self):
        return {}

    def spec(self):
        """One manifest line: ``name kind key=value ...``."""
        extra = " ".join(f"{k}={v!r}" for k, v in sorted(self.params().items()))
        return f"{self.name} {self.kind} {extra}".strip()

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


class ConstantVelocity(Expert):
    kind = "constant_velocity"
    cost_hint = 1.0

    def predict(self, window):
        out = []
        for s in window.segments:
            if s.t_obs < 2:
                step = np.zeros(2)
            else:
                step = s.observed[-1] - s.observed[-2]
            out.append(Prediction(s.agent_id, _linear_rollout(s.observed[-1], step, s.t_pred)))
        return out


class ConstantAcceleration(Expert):
    """Second-order extrapolation from the last two displacement steps.

    The per-step acceleration is clamped to ``max_accel`` (m/s^2).
    """

    kind = "constant_acceleration"
    cost_hint = 1.2

    def __init__(self, name=None, max_accel=5.0):
        super().__init__(name)
        self.max_accel = float(max_accel)

    def params(self):
        return {"max_accel": self.max_accel}

    def predict(self, window):
        out = []
        limit = self.max_accel * window.dt**2
        tau = np.arange(1, window.t_pred + 1, dtype=float)[:, None]
        for s in window.segments:
            obs = s.observed
            v1 = obs[-1] - obs[-2]
            acc = v1 - (obs[-2] - obs[-3])
            norm = math.hypot(*acc)
            if norm > limit:
                acc = acc * (limit / norm)
            pred = _linear_rollout(obs[-1], v1, s.t_pred) + (tau * (tau + 1) / 2.0) * acc[None, :]
            out.append(Prediction(s.agent_id, pred))
        return out


class KalmanCV(Expert):
    """Constant-velocity Kalman filter run over the observation, then rolled out.

    ``process_noise`` is the white-acceleration spectral density (m^2/s^3),
    ``measurement_noise`` the position noise standard deviation (m).
    """

    kind = "kalman_cv"
    cost_hint = 3.0

    def __init__(self, name=None, process_noise=0.001, measurement_noise=0.05):
        super().__init__(name)
        self.process_noise = float(process_noise)
        self.measurement_noise = float(measurement_noise)

    def params(self):
        return {"process_noise": self.process_noise, "measurement_noise": self.measurement_noise}

    def _matrices(self, dt):
        F = np.eye(4)
        F[0, 2] = F[1, 3] = dt
        q = self.process_noise
        Q1 = q * np.array([[dt**3 / 3, dt**2 / 2], [dt**2 / 2, dt]])
        Q = np.zeros((4, 4))
        Q[np.ix_([0, 2], [0, 2])] = Q1
        Q[np.ix_([1, 3], [1, 3])] = Q1
        H = np.zeros((2, 4))
        H[0, 0] = H[1, 1] = 1.0
        R = self.measurement_noise**2 * np.eye(2)
        return F, Q, H, R

    def predict(self, window):
        dt = window.dt
        F, Q, H, R = self._matrices(dt)
        obs = window.observed_array()  # (N, T, 2)
        # All agents share the same covariance recursion, hence the same gains.
        state = np.concatenate([obs[:, 0], (obs[:, 1] - obs[:, 0]) / dt], axis=1)
        r2 = self.measurement_noise**2
        P = np.diag([r2, r2, 2 * r2 / dt**2, 2 * r2 / dt**2])
        for t in range(1, obs.shape[1]):
            state = state @ F.T
            P = F @ P @ F.T + Q
            S = H @ P @ H.T + R
            K = P @ H.T @ np.linalg.inv(S)
            state = state + (obs[:, t] - state @ H.T) @ K.T
            P = (np.eye(4) - K @ H) @ P
        preds = np.empty((len(obs), window.t_pred, 2))
        for t in range(window.t_pred):
            state = state @ F.T
            preds[:, t] = state[:, :2]
        return [Prediction(a, preds[i]) for i, a in enumerate(window.agent_ids)]


def _rotation(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def normalize_track(observed):
    """Origin at the last observed point, last heading along +x.

    Returns (normalized observation, origin, heading angle).
    """
    origin = observed[-1]
    heading = observed[-1] - observed[-2]
    if math.hypot(*heading) < 1e-9:
        heading = observed[-1] - observed[0]
    angle = math.atan2(heading[1], heading[0]) if math.hypot(*heading) >= 1e-9 else 0.0
    rot = _rotation(-angle)
    return (observed - origin) @ rot.T, origin, angle


def to_local(points, origin, angle):
    return (points - origin) @ _rotation(-angle).T


def to_world(points, origin, angle):
    return points @ _rotation(angle).T + origin


class NNRetrieval(Expert):
    """Replay the future of the most similar normalized training observation."""

    kind = "nn_retrieval"
    cost_hint = 8.0

    def __init__(self, name=None, bank_obs=None, bank_fut=None):
        super().__init__(name)
        self.bank_obs = None if bank_obs is None else np.asarray(bank_obs, dtype=float)
        self.bank_fut = None if bank_fut is None else np.asarray(bank_fut, dtype=float)

    @classmethod
    def fit(cls, windows, name=None):
        obs, fut = [], []
        for w in windows:
            for s in w.segments:
                local, origin, angle = normalize_track(s.observed)
                obs.append(local)
                fut.append(to_local(s.future, origin, angle))
        if not obs:
            raise EmptyBank("no training segments for the retrieval bank")
        return cls(name, np.array(obs), np.array(fut))

    def __len__(self):
        return 0 if self.bank_obs is None else len(self.bank_obs)

    def query(self, observed):
        """Index of the nearest bank entry; ties go to the lowest index."""
        if not len(self):
            raise EmptyBank(f"{self.name}: retrieval bank is empty")
        local, origin, angle = normalize_track(observed)
        if local.shape != self.bank_obs.shape[1:]:
            raise ValueError(f"observation length {len(local)} does not match bank")
        d2 = ((self.bank_obs - local[None]) ** 2).sum(axis=(1, 2))
        return int(np.argmin(d2)), origin, angle

    def _predict_segment(self, s):
        idx, origin, angle = self.query(s.observed)
        fut = self.bank_fut[idx]
        if len(fut) < s.t_pred:
            raise ValueError("bank horizon shorter than requested prediction")
        return Prediction(s.agent_id, to_world(fut[: s.t_pred], origin, angle))

    def predict(self, window):
        return [self._predict_segment(s) for s in window.segments]

    def predict_agent(self, window, agent_id):
        return self._predict_segment(window.segment(agent_id))

    def save_bank(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["entry", "part", "step", "x", "y"])
            for i, (o, f) in enumerate(zip(self.bank_obs, self.bank_fut)):
                for part, arr in (("obs", o), ("fut", f)):
                    for t, (x, y) in enumerate(arr):
                        w.writerow([i, part, t, repr(float(x)), repr(float(y))])

    @classmethod
    def load_bank(cls, path, name=None):
        obs, fut = {}, {}
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                target = obs if row[1] == "obs" else fut
                target.setdefault(int(row[0]), []).append((float(row[3]), float(row[4])))
        if not obs:
            raise EmptyBank(f"{path}: empty retrieval bank")
        keys = sorted(obs)
        return cls(name, np.array([obs[k] for k in keys]), np.array([fut[k] for k in keys]))


def repulsion_forces(positions, strength, range_):
    """Pairwise ``strength * exp(-d / range_)`` pushes along the separation direction."""
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    np.fill_diagonal(dist, np.inf)
    mag = strength * np.exp(-dist / range_)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(dist[..., None] > 1e-12, diff / dist[..., None], 0.0)
    return (mag[..., None] * unit).sum(axis=1)


def repulsion_step(positions, step, strength, range_, dt):
    """Advance one frame: per-frame displacement picks up ``dt^2 * force``."""
    step = step + dt**2 * repulsion_forces(positions, strength, range_)
    return positions + step, step


class SocialRepulsion(Expert):
    """Constant velocity plus exponential pairwise repulsion, forward-Euler rollout.

    ``strength`` in m/s^2, ``range_`` in meters. With zero strength the
    output is bit-identical to :class:`ConstantVelocity`.
    """

    kind = "social_repulsion"
    cost_hint = 5.0

    def __init__(self, name=None, strength=0.5, range_=0.5):
        super().__init__(name)
        self.strength = float(strength)
        self.range_ = float(range_)

    def params(self):
        return {"strength": self.strength, "range_": self.range_}

    def predict(self, window):
        obs = window.observed_array()
        last = obs[:, -1]
        base_step = obs[:, -1] - obs[:, -2]
        horizon = window.t_pred
        linear = np.stack([_linear_rollout(last[i], base_step[i], horizon) for i in range(len(obs))])
        if self.strength == 0.0 or len(obs) == 1:
            return [Prediction(a, linear[i]) for i, a in enumerate(window.agent_ids)]
        # Track the force-induced correction separately from the straight line.
        corr_step = np.zeros_like(last)
        corr = np.zeros_like(last)
        pos = last
        out = np.empty_like(linear)
        for t in range(horizon):
            corr_step = corr_step + window.dt**2 * repulsion_forces(pos, self.strength, self.range_)
            corr = corr + corr_step
            out[:, t] = linear[:, t] + corr
            pos = out[:, t]
        return [Prediction(a, out[i]) for i, a in enumerate(window.agent_ids)]


EXPERT_TYPES = {
    cls.kind: cls
    for cls in (ConstantVelocity, ConstantAcceleration, KalmanCV, NNRetrieval, SocialRepulsion)
}


def _coerce(value):
    try:
        return float(value)
    except ValueError:
        return value


def expert_from_spec(spec, bank=None):
    """Build an expert from ``kind[:key=value,...]`` or a manifest line.

    ``name`` may be given as a key; ``bank`` supplies windows or a bank path
    for ``nn_retrieval``.
    """
    spec = spec.strip()
    if ":" in spec or " " not in spec:
        kind, _, rest = spec.partition(":")
        items = [kv for kv in rest.split(",") if kv]
        name = None
    else:
        name, kind, *items = spec.split()
    kwargs = {}
    for kv in items:
        key, _, val = kv.partition("=")
        kwargs[key.strip()] = _coerce(val.strip())
    if "name" in kwargs:
        name = str(kwargs.pop("name"))
    if kind not in EXPERT_TYPES:
        raise ArtifactError(f"unknown expert kind {kind!r}")
    cls = EXPERT_TYPES[kind]
    if cls is NNRetrieval:
        if bank is None:
            raise EmptyBank("nn_retrieval needs a training bank")
        if isinstance(bank, (str, bytes)) or hasattr(bank, "__fspath__"):
            return NNRetrieval.load_bank(bank, name=name)
        return NNRetrieval.fit(bank, name=name)
    return cls(name=name, **kwargs)


class ExpertPool:
    """Ordered, name-unique collection of frozen experts (1-based indices)."""

    def __init__(self, experts=()):
        self._experts = []
        for e in experts:
            self.add(e)

    def add(self, expert):
        if any(e.name == expert.name for e in self._experts):
            raise DuplicateExpertName(f"expert {expert.name!r} already in pool")
        self._experts.append(expert)
        return len(self._experts)

    def __len__(self):
        return len(self._experts)

    def __iter__(self):
        return iter(self._experts)

    def __getitem__(self, index):
        """1-based lookup, matching policy-table expert indices."""
        if not 1 <= index <= len(self._experts):
            raise IndexError(index)
        return self._experts[index - 1]

    def ids(self):
        return [ExpertId(i + 1, e.name, e.cost_hint) for i, e in enumerate(self._experts)]

    @property
    def names(self):
        return [e.name for e in self._experts]

    def index_of(self, name):
        return self.names.index(name) + 1

    def subset(self, names):
        return ExpertPool([self[self.index_of(n)] for n in names])

    def write_manifest(self, path, bank_file="nn_bank.csv"):
        with open(path, "w") as fh:
            fh.write("# name kind params\n")
            for e in self._experts:
                line = e.spec()
                if isinstance(e, NNRetrieval):
                    line += f" bank={bank_file!r}"
                fh.write(line + "\n")

    @classmethod
    def read_manifest(cls, path, base_dir=None):
        from pathlib import Path

        base_dir = Path(base_dir or Path(path).parent)
        pool = cls()
        with open(path) as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                name, kind, *items = line.split()
                bank = None
                if kind == NNRetrieval.kind:
                    bank_items = [kv for kv in items if kv.startswith("bank=")]
                    if not bank_items:
                        raise ArtifactError(f"{path}: nn_retrieval entry without bank file")
                    bank = base_dir / bank_items[0].split("=", 1)[1].strip("'\"")
                    items = [kv for kv in items if not kv.startswith("bank=")]
                pool.add(expert_from_spec(" ".join([name, kind] + items), bank=bank))
        return pool


def default_pool(train_windows, social_strength=0.5, social_range=0.5):
    """The five built-in experts, the retrieval bank fitted on ``train_windows``."""
    return ExpertPool([
        ConstantVelocity(),
        ConstantAcceleration(),
        KalmanCV(),
        NNRetrieval.fit(train_windows),
        SocialRepulsion(strength=social_strength, range_=social_range),
    ])
