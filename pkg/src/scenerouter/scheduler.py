"""Per-cluster expert evidence, the argmin policy table and inference-time routing."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ArtifactError, EmptyHoldout, NoEvidence, VersionMismatch
from .eval.metrics import displacement
from .features import extract_window

POLICY_FORMAT = "policy_table v1"


def _label_lookup(labels):
    """Normalize labels to a dict keyed by (window_id, agent_id)."""
    if isinstance(labels, dict):
        return labels
    return {(lab.window_id, lab.agent_id): int(lab.label) for lab in labels}


def segment_errors(pool, windows):
    """Per-segment ADE and FDE of every expert.

    Returns ``(keys, ade, fde)`` where ``keys`` lists (window_id, agent_id)
    in window order and ``ade``/``fde`` have shape (n_segments, M).
    """
    keys, ade_rows, fde_rows = [], [], []
    for w in windows:
        truth = w.future_array()
        per_ade, per_fde = [], []
        for expert in pool:
            err = displacement(expert.predict(w), truth)
            per_ade.append(err.mean(axis=1))
            per_fde.append(err[:, -1])
        ade_rows.append(np.column_stack(per_ade))
        fde_rows.append(np.column_stack(per_fde))
        keys.extend((w.window_id, a) for a in w.agent_ids)
    if not keys:
        m = len(pool)
        return keys, np.zeros((0, m)), np.zeros((0, m))
    return keys, np.concatenate(ade_rows), np.concatenate(fde_rows)


@dataclass
class EvidenceTable:
    ade: np.ndarray  # (K, M), NaN where absent
    counts: np.ndarray  # (K, M) segment counts
    expert_names: list
    split_id: str = "evidence"

    @property
    def k(self):
        return self.ade.shape[0]

    @property
    def m(self):
        return self.ade.shape[1]

    @property
    def absent(self):
        return self.counts == 0

    def cluster_weights(self):
        """Share of evidence segments per cluster (first expert column)."""
        n = self.counts.max(axis=1).astype(float)
        total = n.sum()
        return n / total if total else n

    def global_ade(self):
        """Segment-weighted ADE of each expert over all clusters with evidence."""
        filled = np.where(self.absent, 0.0, self.ade)
        n = self.counts.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n > 0, (filled * self.counts).sum(axis=0) / n, np.nan)

    def with_column(self, name, ade_col, count_col):
        return EvidenceTable(
            np.column_stack([self.ade, ade_col]),
            np.column_stack([self.counts, count_col]),
            list(self.expert_names) + [name],
            self.split_id,
        )

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cluster"] + list(self.expert_names) + [f"n:{n}" for n in self.expert_names])
            for k in range(self.k):
                ades = ["" if self.absent[k, m] else repr(float(self.ade[k, m])) for m in range(self.m)]
                w.writerow([k + 1] + ades + [int(c) for c in self.counts[k]])

    @classmethod
    def read_csv(cls, path, split_id="evidence"):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][0] != "cluster":
            raise ArtifactError(f"{path}: not an evidence table")
        m = (len(rows[0]) - 1) // 2
        names = rows[0][1 : m + 1]
        ade = np.array([[float(v) if v else np.nan for v in r[1 : m + 1]] for r in rows[1:]])
        counts = np.array([[int(v) for v in r[m + 1 :]] for r in rows[1:]], dtype=int)
        return cls(ade.reshape(-1, m), counts.reshape(-1, m), names, split_id)


def evidence_from_errors(seg_ade, seg_labels, k, expert_names, split_id="evidence"):
    """Aggregate an (n, M) per-segment ADE matrix into a K x M evidence table."""
    seg_ade = np.asarray(seg_ade, dtype=float).reshape(len(seg_labels), -1)
    seg_labels = np.asarray(seg_labels, dtype=int)
    m = seg_ade.shape[1]
    ade = np.full((k, m), np.nan)
    counts = np.zeros((k, m), dtype=int)
    for c in range(1, k + 1):
        members = seg_labels == c
        n = int(members.sum())
        if n:
            ade[c - 1] = seg_ade[members].mean(axis=0)
            counts[c - 1] = n
    return EvidenceTable(ade, counts, list(expert_names), split_id)


def build_evidence(pool, windows, labels, k=None, split_id="evidence"):
    """K x M table of per-cluster mean ADE on a held-out split.

    ``labels`` maps every (window_id, agent_id) of ``windows`` to a 1-based
    cluster id, either as a dict or a sequence of PseudoLabel.
    """
    lookup = _label_lookup(labels)
    keys, seg_ade, _ = segment_errors(pool, windows)
    if not keys:
        raise EmptyHoldout("held-out split has no segments")
    seg_labels = [lookup[key] for key in keys]
    k = k or max(seg_labels)
    return evidence_from_errors(seg_ade, seg_labels, k, pool.names, split_id)


@dataclass
class PolicyTable:
    mapping: dict  # cluster id -> 1-based expert index
    evidence: EvidenceTable
    version: int = 1
    fallback: frozenset = frozenset()

    @property
    def k(self):
        return self.evidence.k

    @property
    def expert_names(self):
        return self.evidence.expert_names

    def expert_for(self, label):
        return self.mapping[int(label)]

    def expected_ade(self):
        """Sum over clusters of weight * ADE of the chosen expert (evidence clusters only)."""
        w = self.evidence.cluster_weights()
        total = 0.0
        for c in range(1, self.k + 1):
            if self.evidence.counts[c - 1].max() > 0:
                total += w[c - 1] * self.evidence.ade[c - 1, self.mapping[c] - 1]
        return float(total)

    def write_csv(self, path):
        ev = self.evidence
        with open(path, "w", newline="") as fh:
            fh.write(f"# {POLICY_FORMAT} version={self.version} k={self.k} m={ev.m}\n")
            w = csv.writer(fh)
            w.writerow(["cluster_id", "expert_index", "expert_name", "evidence_ade",
                        "sample_count", "fallback_flag"])
            for c in range(1, self.k + 1):
                e = self.mapping[c]
                cell = ev.ade[c - 1, e - 1]
                w.writerow([c, e, ev.expert_names[e - 1], "" if np.isnan(cell) else repr(float(cell)),
                            int(ev.counts[c - 1, e - 1]), int(c in self.fallback)])

    @classmethod
    def read_csv(cls, path, evidence):
        with open(path, newline="") as fh:
            head = fh.readline().split()
            if head[1:3] != POLICY_FORMAT.split():
                raise VersionMismatch(f"{path}: expected {POLICY_FORMAT}")
            meta = dict(item.split("=", 1) for item in head[3:])
            rows = list(csv.DictReader(fh))
        k = int(meta["k"])
        if k != evidence.k or int(meta["m"]) != evidence.m:
            raise VersionMismatch(f"{path}: policy shape ({k}, {meta['m']}) does not match evidence "
                                  f"({evidence.k}, {evidence.m})")
        mapping, fallback = {}, set()
        for r in rows:
            c = int(r["cluster_id"])
            mapping[c] = int(r["expert_index"])
            if evidence.expert_names[mapping[c] - 1] != r["expert_name"]:
                raise VersionMismatch(f"{path}: cluster {c} names {r['expert_name']!r}, evidence "
                                      f"has {evidence.expert_names[mapping[c] - 1]!r}")
            if int(r["fallback_flag"]):
                fallback.add(c)
        return cls(mapping, evidence, int(meta["version"]), frozenset(fallback))


def _argmin_lowest(values):
    """Index of the minimum over finite entries, ties to the lowest index; None if none."""
    best = None
    for i, v in enumerate(values):
        if np.isfinite(v) and (best is None or v < values[best]):
            best = i
    return best


def build_policy(evidence, version=1):
    """Per-cluster ADE argmin; clusters without evidence use the global best expert."""
    global_best = _argmin_lowest(evidence.global_ade())
    if global_best is None:
        raise NoEvidence("evidence table has no populated cells")
    mapping, fallback = {}, set()
    for c in range(evidence.k):
        row = np.where(evidence.absent[c], np.nan, evidence.ade[c])
        best = _argmin_lowest(row)
        if best is None:
            best = global_best
            fallback.add(c + 1)
        mapping[c + 1] = best + 1
    return PolicyTable(mapping, evidence, version, frozenset(fallback))


@dataclass
class RoutingDecision:
    window_id: int
    agent_id: int
    predicted_label: int
    chosen_expert: object  # ExpertId
    probabilities: tuple
    latency_us: dict = field(default_factory=dict, compare=False)


def check_compatible(policy, pool, classifier=None):
    if classifier is not None and classifier.k != policy.k:
        raise VersionMismatch(f"classifier has {classifier.k} classes, policy has {policy.k} clusters")
    for c, idx in policy.mapping.items():
        if idx > len(pool) or pool[idx].name != policy.expert_names[idx - 1]:
            raise VersionMismatch(f"policy cluster {c} refers to expert {idx} "
                                  f"({policy.expert_names[idx - 1]!r}) missing from the pool")


def route(window, classifier, policy, pool, cfg=None, labels=None):
    """Classify every segment and run only its policy expert.

    ``labels`` (dict keyed by agent id) replaces the classifier, which is how
    oracle routing is evaluated. Returns ``(predictions, decisions)``.
    """
    check_compatible(policy, pool, None if labels is not None else classifier)
    ids = pool.ids()
    n = len(window.segments)
    t0 = time.perf_counter_ns()
    if labels is None:
        feats = extract_window(window, cfg)
        t1 = time.perf_counter_ns()
        proba = classifier.predict_proba(feats)
        pred_labels = np.argmax(proba, axis=1) + 1
        t2 = time.perf_counter_ns()
    else:
        t1 = t2 = t0
        pred_labels = np.array([labels[a] for a in window.agent_ids])
        proba = np.zeros((n, policy.k))
        proba[np.arange(n), pred_labels - 1] = 1.0
    feat_us = (t1 - t0) / 1000.0 / n
    cls_us = (t2 - t1) / 1000.0 / n
    predictions, decisions = [], []
    for seg, label, p in zip(window.segments, pred_labels, proba):
        idx = policy.expert_for(label)
        t3 = time.perf_counter_ns()
        predictions.append(pool[idx].predict_agent(window, seg.agent_id))
        pred_us = (time.perf_counter_ns() - t3) / 1000.0
        decisions.append(RoutingDecision(
            window.window_id, seg.agent_id, int(label), ids[idx - 1],
            tuple(float(v) for v in p),
            {"feature": feat_us, "classify": cls_us, "predict": pred_us},
        ))
    return predictions, decisions


def register_expert(pool, new_expert, holdout, labels, policy):
    """Add an expert, score only it on the holdout and rebuild the policy.

    The classifier and cluster model are not touched.
    """
    pool.add(new_expert)
    lookup = _label_lookup(labels)
    seg_ade, seg_labels = [], []
    for w in holdout:
        err = displacement(new_expert.predict(w), w.future_array())
        seg_ade.extend(err.mean(axis=1))
        seg_labels.extend(lookup[(w.window_id, a)] for a in w.agent_ids)
    if not seg_labels:
        raise EmptyHoldout("held-out split has no segments")
    col = evidence_from_errors(np.array(seg_ade)[:, None], seg_labels, policy.k, [new_expert.name])
    evidence = policy.evidence.with_column(new_expert.name, col.ade[:, 0], col.counts[:, 0])
    return build_policy(evidence, version=policy.version + 1)
