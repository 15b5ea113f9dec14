"""Scene context encoder and K-means scene partitioning.

Features are standardized, squashed with a softmax, lifted by a seeded
Gaussian random projection and sparsified with a fixed random mask. K-means
in that space provides the pseudo-labels used to train the scene classifier.
Cluster labels are 1-based everywhere outside this module's internals.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ArtifactError, TooFewSamples
from .features import FEATURE_NAMES, N_FEATURES

log = logging.getLogger(__name__)

STD_FLOOR = 1e-12
FORMAT_VERSION = 1


@dataclass(frozen=True)
class EncoderParams:
    input_dim: int = N_FEATURES
    projected_dim: int = 64
    sparsity: float = 0.5
    seed: int = 0
    temperature: float = 4.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.projected_dim < 1:
            raise ValueError("projected_dim must be >= 1")
        if not 0 < self.sparsity <= 1:
            raise ValueError("sparsity must be in (0, 1]")

    @property
    def n_zeroed(self):
        return int(round((1.0 - self.sparsity) * self.projected_dim))

    def projection(self):
        """Projection matrix (projected_dim, input_dim) and boolean keep-mask."""
        proj_ss, mask_ss = np.random.SeedSequence(self.seed).spawn(2)
        mat = np.random.default_rng(proj_ss).standard_normal((self.projected_dim, self.input_dim))
        mat /= math.sqrt(self.projected_dim)
        keep = np.ones(self.projected_dim, dtype=bool)
        zeroed = np.random.default_rng(mask_ss).permutation(self.projected_dim)[: self.n_zeroed]
        keep[zeroed] = False
        return mat, keep


def standardization(features):
    """Column means and floored population standard deviations."""
    features = np.asarray(features, dtype=float)
    return features.mean(axis=0), np.maximum(features.std(axis=0), STD_FLOOR)


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=float)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def encode(z, params, stats, projection=None):
    """Encode one feature vector or a stack of them.

    ``projection`` overrides the seeded matrix (used to pin the pipeline in
    tests); the sparsity mask still comes from ``params``.
    """
    means, stds = stats
    z = np.asarray(z.as_array() if hasattr(z, "as_array") else z, dtype=float)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    mat, keep = params.projection()
    if projection is not None:
        mat = np.asarray(projection, dtype=float)
    soft = softmax((z - means) / stds / params.temperature)
    # Explicit product-sum instead of BLAS matmul: a row encodes to the same
    # bits whether it arrives alone or inside a batch.
    out = (soft[:, None, :] * mat[None, :, :]).sum(axis=2)
    out[:, ~keep] = 0.0
    return out[0] if single else out


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray  # 0-based
    inertia: float
    n_iter: int
    history: list = field(default_factory=list)


def _sq_dists(X, C):
    out = np.empty((len(X), len(C)))
    for j, c in enumerate(C):
        out[:, j] = ((X - c) ** 2).sum(axis=1)
    return out


def _kmeans_pp(X, k, rng):
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers, dtype=float)


def _check_monotone(history, value):
    if history:
        prev = history[-1]
        if value > prev + 1e-12 * max(1.0, abs(prev)):
            raise AssertionError(f"k-means inertia increased: {prev!r} -> {value!r}")
    history.append(value)


def _lloyd(X, k, rng, max_iter, tol):
    C = _kmeans_pp(X, k, rng)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = _sq_dists(X, C)
        labels = np.argmin(d2, axis=1)
        cost = d2[np.arange(len(X)), labels]
        _check_monotone(history, float(cost.sum()))
        counts = np.bincount(labels, minlength=k)
        for j in np.flatnonzero(counts == 0):
            far = int(np.argmax(cost))
            if cost[far] <= 0:
                break
            counts[labels[far]] -= 1
            labels[far] = j
            counts[j] = 1
            C[j] = X[far]
            cost[far] = 0.0
        if (counts == 0).any():
            _check_monotone(history, float(cost.sum()))
        new_C = C.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new_C[j] = X[members].mean(axis=0)
        _check_monotone(history, float(((X - new_C[labels]) ** 2).sum()))
        shift = float(np.sqrt(((new_C - C) ** 2).sum(axis=1)).max())
        C = new_C
        if shift < tol:
            break
    d2 = _sq_dists(X, C)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(len(X)), labels].sum())
    _check_monotone(history, inertia)
    return KMeansResult(C, labels, inertia, n_iter, history)


def kmeans_fit(X, k, seed=0, max_iter=300, tol=1e-6, n_init=10):
    """Lloyd's algorithm with k-means++ seeding, best of ``n_init`` restarts.

    Empty clusters are re-seeded on the point currently farthest from its
    centroid. The returned labels come from a final assignment against the
    returned centroids, so they agree with nearest-centroid lookup.
    """
    X = np.asarray(X, dtype=float)
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(X) < k:
        raise TooFewSamples(f"{len(X)} samples cannot form {k} clusters")
    best = None
    for child in np.random.SeedSequence(seed).spawn(n_init):
        res = _lloyd(X, k, np.random.default_rng(child), max_iter, tol)
        if best is None or res.inertia < best.inertia:
            best = res
    log.debug("k-means k=%d inertia=%.6g after %d iterations", k, best.inertia, best.n_iter)
    return best


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray
    encoder: EncoderParams
    inertia: float
    feature_means: np.ndarray
    feature_stds: np.ndarray
    cluster_on_raw: bool = False
    tol: float = 1e-6
    max_iter: int = 300
    train_labels: np.ndarray = None  # 1-based, from the final fit iteration

    def embed(self, features):
        features = np.asarray(features, dtype=float)
        if self.cluster_on_raw:
            return (features - self.feature_means) / self.feature_stds
        return encode(features, self.encoder, (self.feature_means, self.feature_stds))

    def nearest(self, embedded):
        """1-based index of the closest centroid; ties go to the lowest index."""
        embedded = np.atleast_2d(embedded)
        return np.argmin(_sq_dists(embedded, self.centroids), axis=1) + 1

    def assign(self, features):
        return self.nearest(self.embed(np.atleast_2d(features)))

    def save(self, path):
        e = self.encoder
        lines = [
            f"cluster_model v{FORMAT_VERSION}",
            f"k {self.k}",
            f"input_dim {e.input_dim}",
            f"projected_dim {e.projected_dim}",
            f"sparsity {e.sparsity!r}",
            f"seed {e.seed}",
            f"temperature {e.temperature!r}",
            f"tol {self.tol!r}",
            f"max_iter {self.max_iter}",
            f"cluster_on_raw {int(self.cluster_on_raw)}",
            f"inertia {self.inertia!r}",
            "means " + " ".join(repr(float(v)) for v in self.feature_means),
            "stds " + " ".join(repr(float(v)) for v in self.feature_stds),
        ]
        lines += ["centroid " + " ".join(repr(float(v)) for v in c) for c in self.centroids]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            lines = [ln.split() for ln in fh if ln.strip()]
        if not lines or lines[0] != ["cluster_model", f"v{FORMAT_VERSION}"]:
            raise ArtifactError(f"{path}: not a v{FORMAT_VERSION} cluster model")
        head = {ln[0]: ln[1:] for ln in lines[1:] if ln[0] != "centroid"}
        centroids = np.array([[float(v) for v in ln[1:]] for ln in lines if ln[0] == "centroid"])
        enc = EncoderParams(
            input_dim=int(head["input_dim"][0]),
            projected_dim=int(head["projected_dim"][0]),
            sparsity=float(head["sparsity"][0]),
            seed=int(head["seed"][0]),
            temperature=float(head["temperature"][0]),
        )
        return cls(
            k=int(head["k"][0]),
            centroids=centroids,
            encoder=enc,
            inertia=float(head["inertia"][0]),
            feature_means=np.array([float(v) for v in head["means"]]),
            feature_stds=np.array([float(v) for v in head["stds"]]),
            cluster_on_raw=bool(int(head["cluster_on_raw"][0])),
            tol=float(head["tol"][0]),
            max_iter=int(head["max_iter"][0]),
        )


def fit_cluster_model(features, k, params=None, seed=0, max_iter=300, tol=1e-6, n_init=10,
                      cluster_on_raw=False):
    """Standardize, encode and partition a training feature matrix."""
    params = params or EncoderParams()
    means, stds = standardization(features)
    model = ClusterModel(
        k=k, centroids=None, encoder=params, inertia=0.0, feature_means=means,
        feature_stds=stds, cluster_on_raw=cluster_on_raw, tol=tol, max_iter=max_iter,
    )
    res = kmeans_fit(model.embed(features), k, seed=seed, max_iter=max_iter, tol=tol, n_init=n_init)
    model.centroids = res.centroids
    model.inertia = res.inertia
    model.train_labels = res.labels + 1
    return model


@dataclass(frozen=True)
class PseudoLabel:
    window_id: int
    agent_id: int
    label: int


def assign_label(z, model):
    """Nearest-centroid scene label (1-based) for one feature vector."""
    z = z.as_array() if hasattr(z, "as_array") else z
    return int(model.assign(z)[0])


def assign_labels(model, features, keys):
    labels = model.assign(features) if len(features) else np.zeros(0, dtype=int)
    return [PseudoLabel(w, a, int(lab)) for (w, a), lab in zip(keys, labels)]


def cluster_statistics(labels, features, k=None):
    """Per-cluster means of the raw feature components.

    Returns a list of dicts with ``cluster``, ``count`` and one entry per
    feature name; clusters without members get count 0 and NaN means.
    """
    labels = np.asarray(labels, dtype=int)
    features = np.asarray(features, dtype=float).reshape(-1, N_FEATURES)
    k = k or (int(labels.max()) if len(labels) else 0)
    rows = []
    for c in range(1, k + 1):
        members = features[labels == c]
        row = {"cluster": c, "count": len(members)}
        if len(members):
            means = members.mean(axis=0)
        else:
            log.warning("cluster %d has no members", c)
            means = np.full(N_FEATURES, np.nan)
        row.update({name: float(v) for name, v in zip(FEATURE_NAMES, means)})
        rows.append(row)
    return rows


# Column names follow the per-scene statistics table layout.
STATS_COLUMNS = (
    ("neighbor_count", "local_density"),
    ("mean_speed", "mean_speed"),
    ("speed_variance", "speed_variance"),
    ("max_speed", "max_speed"),
    ("trajectory_curvature", "mean_curvature"),
    ("rel_speed_nearest", "rel_speed_to_nearest"),
    ("average_distance", "mean_interagent_distance"),
)


def write_cluster_statistics(path, rows, names=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "scene", "count"] + [c for c, _ in STATS_COLUMNS])
        for row in rows:
            scene = (names or {}).get(row["cluster"], "")
            w.writerow([row["cluster"], scene, row["count"]]
                       + [repr(row[f]) for _, f in STATS_COLUMNS])

