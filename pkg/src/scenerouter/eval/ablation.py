"""Component ablations and the K sweep, all scored on the test split."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ..errors import UnknownVariant
from ..pipeline import (
    PipelineConfig,
    Prepared,
    derive_seed,
    fit,
    prepare,
    route_windows,
    score_window,
    single_best_index,
)
from .baselines import inverse_ade_weights, random_choices, uniform_ensemble, weighted_ensemble
from .metrics import MetricResult

VARIANTS = (
    "full",
    "random_labels",
    "no_clustering",
    "random_expert",
    "uniform_ensemble",
    "weighted_ensemble",
    "single_best",
    "reduced_pool",
)


@dataclass(frozen=True)
class AblationConfig:
    variant: str
    seed: int = 42
    pool_subset: tuple = ()  # expert names for reduced_pool; empty means the config default

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise UnknownVariant(f"unknown ablation variant {self.variant!r}; choose from {', '.join(VARIANTS)}")


def _prepared(dataset, seed, cfg):
    if isinstance(dataset, Prepared):
        return dataset
    cfg = (cfg or PipelineConfig()).replace(seed=seed)
    if dataset is None:
        return prepare(cfg)
    return prepare(cfg, windows=list(dataset))


class AblationSuite:
    """Runs variants against one prepared dataset, sharing the full fit."""

    def __init__(self, prep):
        self.prep = prep
        self._full = None

    @property
    def cfg(self):
        return self.prep.cfg

    def full_fit(self):
        if self._full is None:
            self._full = fit(self.prep)
        return self._full

    def _columns(self, index):
        p = self.prep
        return MetricResult.from_segments(p.test_ade[:, index - 1], p.test_fde[:, index - 1])

    def _per_window(self, predict):
        ades, fdes = [], []
        for w in self.prep.test:
            a, f = score_window(predict(w), w)
            ades.append(a)
            fdes.append(f)
        return MetricResult.from_segments(np.concatenate(ades), np.concatenate(fdes))

    def run(self, cfg):
        if isinstance(cfg, str):
            cfg = AblationConfig(cfg, self.cfg.seed)
        prep, v = self.prep, cfg.variant
        threads = self.cfg.threads
        if v == "full":
            return route_windows(self.full_fit(), prep.test, threads=threads)[0]
        if v == "random_labels":
            return route_windows(fit(prep, label_mode="random"), prep.test, threads=threads)[0]
        if v == "no_clustering":
            return route_windows(fit(prep, k=1), prep.test, threads=threads)[0]
        if v == "single_best":
            return self._columns(single_best_index(prep))
        if v == "random_expert":
            seed = derive_seed(cfg.seed, "random_expert")
            m = len(prep.pool)
            picks = np.concatenate([random_choices(m, w, seed) for w in prep.test])
            rows = np.arange(len(picks))
            return MetricResult.from_segments(prep.test_ade[rows, picks - 1], prep.test_fde[rows, picks - 1])
        if v == "uniform_ensemble":
            return self._per_window(lambda w: uniform_ensemble(prep.pool, w))
        if v == "weighted_ensemble":
            weights = inverse_ade_weights(prep.evidence_ade.mean(axis=0))
            return self._per_window(lambda w: weighted_ensemble(prep.pool, w, weights))
        if v == "reduced_pool":
            names = cfg.pool_subset or tuple(n for n in self.cfg.reduced_pool.split(",") if n)
            pool = prep.pool.subset(names)
            return route_windows(fit(prep, pool=pool, reuse=self.full_fit()), prep.test, threads=threads)[0]
        raise UnknownVariant(v)


def run_ablation(dataset, cfg, pipeline_cfg=None):
    """Metric of one ablation variant on the test split.

    ``dataset`` is a :class:`Prepared`, a list of windows, or ``None`` for
    the synthetic benchmark of ``pipeline_cfg``.
    """
    if isinstance(cfg, str):
        cfg = AblationConfig(cfg, (pipeline_cfg or PipelineConfig()).seed)
    return AblationSuite(_prepared(dataset, cfg.seed, pipeline_cfg)).run(cfg)


ABLATION_COLUMNS = ("variant", "ade", "fde", "n_segments", "delta_vs_single_best")


def write_ablation(path, results, reference=None):
    """``results`` maps variant -> MetricResult, in row order."""
    ref = reference if reference is not None else results.get("single_best")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for name, r in results.items():
            delta = "" if ref is None else repr((r.ade - ref.ade) / ref.ade)
            w.writerow([name, repr(r.ade), repr(r.fde), r.n_segments, delta])


@dataclass
class SweepRow:
    k: int
    val_accuracy: float
    routed_ade: float
    routed_fde: float
    evidence_ade: float  # policy's expected ADE on the evidence split
    inertia: float
    n_rounds: int


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)
    dataset: str = "synthetic"

    @property
    def best_k(self):
        """K with the lowest routed ADE; exact ties go to the smaller K."""
        best = None
        for r in sorted(self.rows, key=lambda r: r.k):
            if best is None or r.routed_ade < best.routed_ade:
                best = r
        return None if best is None else best.k

    def row(self, k):
        return next(r for r in self.rows if r.k == k)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "classifier_val_accuracy", f"routed_ade_{self.dataset}",
                        f"routed_fde_{self.dataset}", "evidence_expected_ade", "kmeans_inertia",
                        "boosting_rounds"])
            for r in self.rows:
                w.writerow([r.k, repr(r.val_accuracy), repr(r.routed_ade), repr(r.routed_fde),
                            repr(r.evidence_ade), repr(r.inertia), r.n_rounds])

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [SweepRow(int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4]),
                             float(r[5]), int(r[6])) for r in reader]
        return cls(rows, header[2].removeprefix("routed_ade_"))


def sweep_k(dataset, ks, seed=42, pipeline_cfg=None):
    """Refit encoder, classifier, evidence and policy for every K and route the test split."""
    prep = _prepared(dataset, seed, pipeline_cfg)
    name = "synthetic" if prep.cfg.dataset == "synthetic" else str(prep.cfg.dataset)
    result = SweepResult(dataset=name.rsplit("/", 1)[-1])
    for k in ks:
        fitted = fit(prep, k=k)
        metrics = route_windows(fitted, prep.test, threads=prep.cfg.threads)[0]
        result.rows.append(SweepRow(
            k, fitted.report.val_accuracy, metrics.ade, metrics.fde,
            fitted.policy.expected_ade(), fitted.cluster_model.inertia, fitted.report.n_rounds,
        ))
    return result
