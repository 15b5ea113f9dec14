"""End-to-end fit / evaluate pipeline and run-directory artifacts.

Stages, in order: ingest, featurize, cluster, train, evidence, policy,
evaluate. A single integer seed drives every stochastic step through
stage-keyed sub-seeds, so each stage can be reproduced on its own.
"""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import classifier as clf
from .encoder import (
    ClusterModel,
    EncoderParams,
    cluster_statistics,
    fit_cluster_model,
    write_cluster_statistics,
)
from .errors import ArtifactNotFound, HashMismatch, SceneRouterError, VersionMismatch
from .eval.metrics import MetricResult, displacement
from .experts import ExpertPool, NNRetrieval, default_pool
from .features import FeatureConfig, extract_all, write_feature_csv
from .scheduler import (
    EvidenceTable,
    PolicyTable,
    build_policy,
    evidence_from_errors,
    route,
)
from .trajdata import (
    augment,
    parse_dataset,
    random_augment_params,
    read_windows_csv,
    window_segments,
    write_windows_csv,
)

log = logging.getLogger(__name__)

SYNTHETIC = "synthetic"
MANIFEST_FORMAT = "scenerouter_run v1"

# Artifacts whose sha256 goes into the manifest.
HASHED_ARTIFACTS = (
    "features.csv",
    "cluster_model.txt",
    "classifier.txt",
    "pool.txt",
    "nn_bank.csv",
    "evidence.csv",
    "policy.csv",
    "metrics.csv",
)
FROZEN_ARTIFACTS = ("cluster_model.txt", "classifier.txt")


@dataclass
class PipelineConfig:
    dataset: str = SYNTHETIC
    dt: float = 0.4
    t_obs: int = 8
    t_pred: int = 12
    stride: int = 20
    synth_per_regime: int = 200
    r_neighbor: float = 2.0
    per_frame_units: bool = False
    k: int = 5
    projected_dim: int = 64
    sparsity: float = 0.5
    temperature: float = 4.0
    cluster_on_raw: bool = False
    kmeans_restarts: int = 10
    max_depth: int = 4
    n_rounds: int = 100
    learning_rate: float = 0.1
    min_samples_leaf: int = 5
    patience: int = 10
    val_fraction: float = 0.2
    train_fraction: float = 0.6
    evidence_fraction: float = 0.2
    augment_copies: int = 0
    augment_scale_min: float = 1.0
    augment_scale_max: float = 1.0
    pool_manifest: str = ""
    reduced_pool: str = "constant_velocity,constant_acceleration,kalman_cv"
    social_strength: float = 0.5
    social_range: float = 0.5
    seed: int = 42
    threads: int = 0

    # Fields that do not change any artifact content.
    _UNHASHED = ("threads",)

    def __post_init__(self):
        if min(self.train_fraction, self.evidence_fraction) <= 0:
            raise ValueError("split fractions must be positive")
        if self.train_fraction + self.evidence_fraction >= 1:
            raise ValueError("train + evidence fractions must leave room for a test split")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in dataclasses.fields(self)]

    def dumps(self):
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.items())

    def config_hash(self):
        text = "".join(f"{k}={_fmt(v)}\n" for k, v in self.items() if k not in self._UNHASHED)
        return hashlib.sha256(text.encode()).hexdigest()

    @classmethod
    def from_mapping(cls, values, base=None):
        base = base or cls()
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        changes = {}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            changes[key] = _parse_value(raw, type(getattr(base, key)))
        return base.replace(**changes)

    @classmethod
    def load(cls, path, base=None):
        values = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key=value")
                key, _, val = line.partition("=")
                values[key.strip()] = val.strip()
        return cls.from_mapping(values, base)


def _fmt(value):
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(raw, typ):
    if not isinstance(raw, str):
        return typ(raw)
    if typ is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return typ(raw)


def derive_seed(seed, stage):
    """Stage-keyed 63-bit sub-seed."""
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@contextlib.contextmanager
def stage(name):
    """Tag any library error escaping the block with the stage name."""
    try:
        yield
    except SceneRouterError as exc:
        if exc.stage is None:
            exc.with_stage(name)
        raise


def parallel_map(fn, items, threads=0):
    """Ordered map; results come back in input order whatever the thread count."""
    items = list(items)
    if threads == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads or None) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------- data

def load_windows(cfg):
    """Windows of the configured dataset plus regime tags (synthetic only)."""
    if cfg.dataset == SYNTHETIC:
        from .eval.synth import synth_benchmark

        bench = synth_benchmark(cfg.seed, cfg.synth_per_regime, cfg.t_obs, cfg.t_pred, cfg.dt)
        return bench.windows, bench.regimes
    path = Path(cfg.dataset)
    if path.suffix == ".csv":
        return read_windows_csv(path, cfg.t_obs, cfg.t_pred, cfg.dt), None
    records = parse_dataset(path, cfg.dt)
    return window_segments(records, cfg.t_obs, cfg.t_pred, cfg.stride, cfg.dt), None


def split_windows(windows, cfg):
    """Seeded three-way split into (train, evidence, test) window lists."""
    n = len(windows)
    order = np.random.default_rng(derive_seed(cfg.seed, "split")).permutation(n)
    n_train = int(round(cfg.train_fraction * n))
    n_evid = int(round(cfg.evidence_fraction * n))
    pick = lambda idx: [windows[i] for i in sorted(idx)]  # noqa: E731
    return (
        pick(order[:n_train]),
        pick(order[n_train : n_train + n_evid]),
        pick(order[n_train + n_evid :]),
    )


def augmented(windows, cfg):
    """Training windows followed by ``augment_copies`` transformed copies of each."""
    if cfg.augment_copies <= 0:
        return list(windows)
    rng = np.random.default_rng(derive_seed(cfg.seed, "augment"))
    out = list(windows)
    for _ in range(cfg.augment_copies):
        for w in windows:
            params = random_augment_params(rng, (cfg.augment_scale_min, cfg.augment_scale_max))
            out.append(augment(w, params))
    return out


def feature_config(cfg):
    return FeatureConfig(r_neighbor=cfg.r_neighbor, dt=cfg.dt, per_frame_units=cfg.per_frame_units)


def encoder_params(cfg):
    return EncoderParams(
        projected_dim=cfg.projected_dim,
        sparsity=cfg.sparsity,
        seed=derive_seed(cfg.seed, "encoder"),
        temperature=cfg.temperature,
    )


def classifier_params(cfg, stage_name="classifier"):
    return clf.ClassifierParams(
        max_depth=cfg.max_depth,
        n_rounds=cfg.n_rounds,
        learning_rate=cfg.learning_rate,
        min_samples_leaf=cfg.min_samples_leaf,
        patience=cfg.patience,
        seed=derive_seed(cfg.seed, stage_name),
    )


def score_window(predictions, window):
    """Per-segment (ADE, FDE) arrays of window-ordered predictions."""
    err = displacement(predictions, window.future_array())
    return err.mean(axis=1), err[:, -1]


def expert_errors(pool, windows, threads=0):
    """Per-segment ADE and FDE of every pool expert, shape (n_segments, M) each."""
    def one(w):
        cols = [score_window(e.predict(w), w) for e in pool]
        return np.column_stack([c[0] for c in cols]), np.column_stack([c[1] for c in cols])

    parts = parallel_map(one, windows, threads)
    m = len(pool)
    if not parts:
        return np.zeros((0, m)), np.zeros((0, m))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


@dataclass
class Prepared:
    """K-independent state shared by every fit on one dataset and seed."""

    cfg: PipelineConfig
    windows: list
    regimes: dict
    train: list
    evidence: list
    test: list
    train_features: np.ndarray
    train_keys: list
    evidence_features: np.ndarray
    evidence_keys: list
    pool: ExpertPool
    evidence_ade: np.ndarray = None  # (n_evidence_segments, M)
    test_ade: np.ndarray = None
    test_fde: np.ndarray = None


def build_pool(cfg, train_windows):
    if cfg.pool_manifest:
        return ExpertPool.read_manifest(cfg.pool_manifest)
    return default_pool(train_windows, cfg.social_strength, cfg.social_range)


def prepare(cfg, windows=None, regimes=None):
    with stage("ingest"):
        if windows is None:
            windows, regimes = load_windows(cfg)
        if not windows:
            from .errors import EmptyDataset

            raise EmptyDataset("dataset produced no windows")
        train, evid, test = split_windows(windows, cfg)
    fcfg = feature_config(cfg)
    with stage("featurize"):
        train_x, train_keys = extract_all(augmented(train, cfg), fcfg)
        evid_x, evid_keys = extract_all(evid, fcfg)
    with stage("evidence"):
        pool = build_pool(cfg, train)
        evid_ade, _ = expert_errors(pool, evid, cfg.threads)
    with stage("evaluate"):
        test_ade, test_fde = expert_errors(pool, test, cfg.threads)
    return Prepared(cfg, windows, regimes or {}, train, evid, test, train_x, train_keys,
                    evid_x, evid_keys, pool, evid_ade, test_ade, test_fde)


@dataclass
class Fitted:
    prep: Prepared
    k: int
    cluster_model: ClusterModel
    classifier: clf.SceneClassifier
    report: clf.TrainReport
    evidence_labels: np.ndarray  # 1-based, aligned with prep.evidence_keys
    evidence: EvidenceTable
    policy: PolicyTable
    pool: ExpertPool

    @property
    def cfg(self):
        return self.prep.cfg

    def evidence_label_map(self):
        return dict(zip(self.prep.evidence_keys, (int(v) for v in self.evidence_labels)))


def fit(prep, k=None, label_mode="cluster", pool=None, reuse=None):
    """Cluster, train the classifier, then build evidence and policy.

    ``label_mode="random"`` trains on seeded random labels and keys the
    evidence on the classifier's own predictions. ``reuse`` takes the cluster
    model and classifier of an earlier fit, so only evidence and policy are
    rebuilt (the classifier never depends on the pool).
    """
    cfg = prep.cfg
    pool = pool or prep.pool
    if reuse is not None:
        k, model, classifier, report = reuse.k, reuse.cluster_model, reuse.classifier, reuse.report
        ev_labels = reuse.evidence_labels
        return _fit_policy(prep, k, model, classifier, report, ev_labels, pool)
    k = k or cfg.k
    with stage("cluster"):
        model = fit_cluster_model(
            prep.train_features, k, encoder_params(cfg), seed=derive_seed(cfg.seed, "kmeans"),
            n_init=cfg.kmeans_restarts, cluster_on_raw=cfg.cluster_on_raw,
        )
    with stage("train"):
        if label_mode == "random":
            rng = np.random.default_rng(derive_seed(cfg.seed, "random_labels"))
            labels = rng.integers(1, k + 1, size=len(prep.train_features))
        elif label_mode == "cluster":
            labels = model.train_labels
        else:
            raise ValueError(f"unknown label mode {label_mode!r}")
        classifier, report = clf.train(prep.train_features, labels, cfg.val_fraction,
                                       classifier_params(cfg), k=k)
    with stage("evidence"):
        if label_mode == "random":
            ev_labels = classifier.predict(prep.evidence_features)
        else:
            ev_labels = model.assign(prep.evidence_features)
    return _fit_policy(prep, k, model, classifier, report, ev_labels, pool)


def _fit_policy(prep, k, model, classifier, report, ev_labels, pool):
    with stage("evidence"):
        if pool is prep.pool:
            seg_ade = prep.evidence_ade
        else:
            cols = [prep.pool.index_of(n) - 1 for n in pool.names]
            seg_ade = prep.evidence_ade[:, cols]
        evidence = evidence_from_errors(seg_ade, ev_labels, k, pool.names)
    with stage("policy"):
        policy = build_policy(evidence)
    return Fitted(prep, k, model, classifier, report, np.asarray(ev_labels), evidence, policy, pool)


def route_windows(fitted, windows, labels=None, threads=0):
    """Route every window; returns (MetricResult, predictions, decisions)."""
    fcfg = feature_config(fitted.cfg)

    def one(w):
        lab = None if labels is None else {a: labels[(w.window_id, a)] for a in w.agent_ids}
        preds, decisions = route(w, fitted.classifier, fitted.policy, fitted.pool, fcfg, lab)
        return preds, decisions, score_window(preds, w)

    with stage("evaluate"):
        parts = parallel_map(one, windows, threads)
    preds = [p for part in parts for p in part[0]]
    decisions = [d for part in parts for d in part[1]]
    if not parts:
        return MetricResult(float("nan"), float("nan"), 0), preds, decisions
    seg_ade = np.concatenate([p[2][0] for p in parts])
    seg_fde = np.concatenate([p[2][1] for p in parts])
    result = MetricResult.from_segments(seg_ade, seg_fde, [d.predicted_label for d in decisions])
    return result, preds, decisions


def single_best_index(prep, pool=None):
    """1-based index of the expert with the lowest mean evidence-split ADE."""
    seg = prep.evidence_ade
    if pool is not None and pool is not prep.pool:
        seg = seg[:, [prep.pool.index_of(n) - 1 for n in pool.names]]
    return int(np.argmin(seg.mean(axis=0))) + 1


# ---------------------------------------------------------------- artifacts

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out, cfg, extra=None):
    out = Path(out)
    lines = [MANIFEST_FORMAT, f"config_hash {cfg.config_hash()}", f"seed {cfg.seed}", f"k {cfg.k}"]
    for key, val in (extra or {}).items():
        lines.append(f"{key} {val}")
    for name in HASHED_ARTIFACTS:
        if (out / name).exists():
            lines.append(f"sha256 {name} {sha256_file(out / name)}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_manifest(out):
    path = Path(out) / "manifest.txt"
    if not path.exists():
        raise ArtifactNotFound(f"missing artifact: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != MANIFEST_FORMAT:
        raise VersionMismatch(f"{path}: expected {MANIFEST_FORMAT}")
    info, hashes = {}, {}
    for line in lines[1:]:
        parts = line.split()
        if parts[0] == "sha256":
            hashes[parts[1]] = parts[2]
        else:
            info[parts[0]] = " ".join(parts[1:])
    info["hashes"] = hashes
    return info


def verify_hashes(out, names=FROZEN_ARTIFACTS):
    """Raise HashMismatch if any listed artifact differs from the manifest."""
    out = Path(out)
    hashes = read_manifest(out)["hashes"]
    for name in names:
        path = out / name
        if not path.exists():
            raise ArtifactNotFound(f"missing artifact: {path}")
        if hashes.get(name) != sha256_file(path):
            raise HashMismatch(f"{path} does not match the run manifest hash")


def require(path):
    path = Path(path)
    if not path.exists():
        raise ArtifactNotFound(f"missing artifact: {path}")
    return path


METRIC_COLUMNS = ("split", "method", "cluster", "ade", "fde", "n_segments")


def _metric_rows(split, method, result):
    rows = [(split, method, "all", repr(result.ade), repr(result.fde), result.n_segments)]
    for c in sorted(result.per_cluster):
        a, f, n = result.per_cluster[c]
        rows.append((split, method, c, repr(a), repr(f), n))
    return rows


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        w.writerows(rows)


def read_metrics(path):
    with open(require(path), newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class RunResult:
    fitted: Fitted
    test: MetricResult
    evidence_routed: MetricResult
    single_best: MetricResult
    single_best_name: str
    per_expert: dict = field(default_factory=dict)


def evaluate(fitted):
    """Routed and per-expert metrics on the test split, routed on the evidence split."""
    prep = fitted.prep
    threads = fitted.cfg.threads
    test, _, decisions = route_windows(fitted, prep.test, threads=threads)
    evid, _, _ = route_windows(fitted, prep.evidence, threads=threads)
    labels = [d.predicted_label for d in decisions]
    per_expert = {}
    for i, name in enumerate(prep.pool.names):
        per_expert[name] = MetricResult.from_segments(prep.test_ade[:, i], prep.test_fde[:, i], labels)
    best = single_best_index(prep, fitted.pool)
    best_name = fitted.pool.names[best - 1]
    return RunResult(fitted, test, evid, per_expert[best_name], best_name, per_expert)


def run(cfg, out=None, windows=None, regimes=None):
    """Full pipeline; with ``out`` every intermediate artifact is written there."""
    prep = prepare(cfg, windows, regimes)
    fitted = fit(prep)
    result = evaluate(fitted)
    if out is not None:
        write_run(result, out)
    return result


def write_run(result, out):
    fitted = result.fitted
    prep, cfg = fitted.prep, fitted.cfg
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps())
    write_feature_csv(out / "features.csv", prep.train_features, prep.train_keys)
    fitted.cluster_model.save(out / "cluster_model.txt")
    fitted.classifier.save(out / "classifier.txt")
    fitted.report.write_csv(out / "train_report.csv")
    (out / "confusion.txt").write_text(fitted.report.confusion_text() + "\n")
    conf = np.asarray(fitted.report.confusion, dtype=int)
    with open(out / "confusion.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true"] + [f"pred_{j + 1}" for j in range(len(conf))])
        for i, row in enumerate(conf):
            w.writerow([i + 1] + [int(v) for v in row])
    fitted.pool.write_manifest(out / "pool.txt")
    for e in fitted.pool:
        if isinstance(e, NNRetrieval):
            e.save_bank(out / "nn_bank.csv")
            break
    fitted.evidence.write_csv(out / "evidence.csv")
    fitted.policy.write_csv(out / "policy.csv")
    write_windows_csv(prep.evidence, out / "holdout.csv")
    with open(out / "holdout_labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window_id", "agent_id", "label"])
        for (wid, aid), lab in zip(prep.evidence_keys, fitted.evidence_labels):
            w.writerow([wid, aid, int(lab)])
    stats = cluster_statistics(fitted.cluster_model.train_labels, prep.train_features, fitted.k)
    write_cluster_statistics(out / "cluster_stats.csv", stats)

    rows = _metric_rows("test", "routed", result.test)
    rows += _metric_rows("evidence", "routed", result.evidence_routed)
    rows += _metric_rows("test", f"single_best:{result.single_best_name}", result.single_best)
    for name, res in result.per_expert.items():
        rows += _metric_rows("test", f"expert:{name}", res)
    write_metrics(out / "metrics.csv", rows)
    write_manifest(out, cfg, {
        "val_accuracy": repr(fitted.report.val_accuracy),
        "policy_version": fitted.policy.version,
    })


def read_holdout_labels(out):
    with open(require(Path(out) / "holdout_labels.csv"), newline="") as fh:
        return {(int(r["window_id"]), int(r["agent_id"])): int(r["label"]) for r in csv.DictReader(fh)}


@dataclass
class Artifacts:
    """Frozen artifacts loaded back from a run directory."""

    out: Path
    cfg: PipelineConfig
    cluster_model: ClusterModel
    classifier: clf.SceneClassifier
    pool: ExpertPool
    evidence: EvidenceTable
    policy: PolicyTable
    manifest: dict


def _parsed(loader, path, *args):
    """Load an artifact, reporting malformed content as an artifact error."""
    path = require(path)
    try:
        return loader(path, *args)
    except (ValueError, IndexError, KeyError) as exc:
        raise VersionMismatch(f"{path}: malformed artifact ({exc})") from exc


def load_artifacts(out):
    """Load and cross-check a run directory; frozen artifacts are hash-verified first."""
    out = Path(out)
    if not out.is_dir():
        raise ArtifactNotFound(f"model directory not found: {out}")
    manifest = read_manifest(out)
    verify_hashes(out)
    cfg = _parsed(PipelineConfig.load, out / "config.txt")
    if cfg.config_hash() != manifest.get("config_hash"):
        raise HashMismatch(f"{out / 'config.txt'} does not match the manifest config hash")
    model = _parsed(ClusterModel.load, out / "cluster_model.txt")
    classifier = _parsed(clf.SceneClassifier.load, out / "classifier.txt")
    pool = _parsed(ExpertPool.read_manifest, out / "pool.txt")
    evidence = _parsed(EvidenceTable.read_csv, out / "evidence.csv")
    policy = _parsed(PolicyTable.read_csv, out / "policy.csv", evidence)
    if classifier.k != policy.k or model.k != policy.k:
        raise VersionMismatch(
            f"artifact K mismatch: cluster model {model.k}, classifier {classifier.k}, policy {policy.k}"
        )
    return Artifacts(out, cfg, model, classifier, pool, evidence, policy, manifest)
