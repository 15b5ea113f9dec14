"""Report tables, plot-data CSVs, figures and a text summary from a run directory."""

from __future__ import annotations

import csv
import shutil
from pathlib import Path

import numpy as np

from ..encoder import ClusterModel
from ..experts import ExpertPool
from ..features import FEATURE_NAMES, read_feature_csv
from ..pipeline import read_metrics, require
from ..scheduler import EvidenceTable, PolicyTable


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def read_confusion(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=int)


def pca_2d(features):
    """Project standardized features onto their first two principal axes.

    Axis signs are fixed so the largest-magnitude loading is positive.
    """
    x = np.asarray(features, dtype=float)
    std = x.std(axis=0)
    z = (x - x.mean(axis=0)) / np.where(std > 0, std, 1.0)
    _, _, vt = np.linalg.svd(z, full_matrices=False)
    axes = vt[:2]
    signs = np.sign(axes[np.arange(len(axes)), np.abs(axes).argmax(axis=1)])
    return z @ (axes * signs[:, None]).T


def _totals(metrics, split, method_prefix):
    for r in metrics:
        if r["split"] == split and r["method"].startswith(method_prefix) and r["cluster"] == "all":
            return r
    return None


def build_report(run_dir, out_dir=None, figures=True):
    """Write every report table next to (or inside ``out_dir`` of) a run.

    Returns the list of files written.
    """
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    written = []

    metrics = read_metrics(run_dir / "metrics.csv")
    evidence = EvidenceTable.read_csv(require(run_dir / "evidence.csv"))
    policy = PolicyTable.read_csv(require(run_dir / "policy.csv"), evidence)
    pool = ExpertPool.read_manifest(require(run_dir / "pool.txt"))
    cost = {e.name: e.cost_hint for e in pool}

    # Method comparison with relative latency.
    routed = _totals(metrics, "test", "routed")
    routed_clusters = {int(r["cluster"]): int(r["n_segments"]) for r in metrics
                       if r["split"] == "test" and r["method"] == "routed" and r["cluster"] != "all"}
    n_routed = sum(routed_clusters.values()) or 1
    routed_cost = sum(n * cost[policy.expert_names[policy.mapping[c] - 1]]
                      for c, n in routed_clusters.items()) / n_routed
    names, costs, ades, rows = [], [], [], []
    for r in metrics:
        if r["split"] == "test" and r["method"].startswith("expert:") and r["cluster"] == "all":
            name = r["method"].split(":", 1)[1]
            names.append(name)
            costs.append(cost[name])
            ades.append(float(r["ade"]))
            rows.append([name, r["ade"], r["fde"], repr(cost[name])])
    names.append("routed")
    costs.append(routed_cost)
    ades.append(float(routed["ade"]))
    rows.append(["routed", routed["ade"], routed["fde"], repr(routed_cost)])
    written.append(_write_rows(out / "table_methods.csv", ["method", "ade", "fde", "relative_latency"], rows))
    written.append(_write_rows(out / "plot_accuracy_latency.csv", ["method", "x_latency", "y_ade"],
                               [[n, repr(c), repr(a)] for n, c, a in zip(names, costs, ades)]))

    # Ablation and sweep tables, when those commands have been run.
    for src, dst in (("ablation.csv", "table_ablation.csv"), ("sweep.csv", "table_k_sweep.csv")):
        if (run_dir / src).exists():
            shutil.copyfile(run_dir / src, out / dst)
            written.append(out / dst)

    # Per-cluster feature statistics, annotated with the serving expert.
    with open(require(run_dir / "cluster_stats.csv"), newline="") as fh:
        stats = list(csv.reader(fh))
    header = stats[0] + ["served_by"]
    stat_rows = [r + [policy.expert_names[policy.mapping[int(r[0])] - 1]] for r in stats[1:]]
    written.append(_write_rows(out / "table_cluster_stats.csv", header, stat_rows))

    # Confusion matrix.
    conf = read_confusion(require(run_dir / "confusion.csv"))
    written.append(_write_rows(out / "confusion_matrix.csv",
                               ["true"] + [f"pred_{j + 1}" for j in range(len(conf))],
                               [[i + 1] + list(map(int, row)) for i, row in enumerate(conf)]))

    # PCA scatter of training features coloured by scene.
    features, keys = read_feature_csv(require(run_dir / "features.csv"))
    model = ClusterModel.load(require(run_dir / "cluster_model.txt"))
    labels = model.assign(features) if len(features) else np.zeros(0, dtype=int)
    pcs = pca_2d(features) if len(features) > 2 else np.zeros((len(features), 2))
    written.append(_write_rows(out / "plot_pca_scatter.csv", ["window_id", "agent_id", "pc1", "pc2", "scene"],
                               [[w, a, repr(float(p[0])), repr(float(p[1])), int(lab)]
                                for (w, a), p, lab in zip(keys, pcs, labels)]))

    # Summary: per-cluster routed vs the best single expert.
    best = _totals(metrics, "test", "single_best:")
    best_name = best["method"].split(":", 1)[1] if best else ""
    per_best = {int(r["cluster"]): r for r in metrics if r["split"] == "test"
                and r["method"] == f"single_best:{best_name}" and r["cluster"] != "all"}
    lines = [
        f"test segments: {routed['n_segments']}",
        f"routed ADE {float(routed['ade']):.6f} m, FDE {float(routed['fde']):.6f} m",
    ]
    if best:
        gain = 1.0 - float(routed["ade"]) / float(best["ade"]) if float(best["ade"]) > 0 else 0.0
        lines.append(f"best single expert: {best_name}, ADE {float(best['ade']):.6f} m "
                     f"(routing gain {100 * gain:.1f}%)")
    lines.append("")
    lines.append(f"{'scene':>5} {'n':>6} {'expert':<22} {'routed_ade':>11} {'single_ade':>11} {'delta':>10}")
    for r in metrics:
        if r["split"] != "test" or r["method"] != "routed" or r["cluster"] == "all":
            continue
        c = int(r["cluster"])
        single = float(per_best[c]["ade"]) if c in per_best else float("nan")
        lines.append(f"{c:>5} {int(r['n_segments']):>6} {policy.expert_names[policy.mapping[c] - 1]:<22} "
                     f"{float(r['ade']):>11.6f} {single:>11.6f} {float(r['ade']) - single:>+10.6f}")
    lines.append("")
    lines.append("feature order: " + ", ".join(FEATURE_NAMES))
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    written.append(out / "summary.txt")

    if figures:
        from . import plotting

        written.append(plotting.confusion_figure(conf, out / "confusion.png"))
        written.append(plotting.accuracy_latency_figure(names, costs, ades, out / "accuracy_latency.png",
                                                        highlight="routed"))
        if len(features):
            written.append(plotting.scatter_figure(pcs, labels, out / "pca_scatter.png"))
        if (run_dir / "sweep.csv").exists():
            from .ablation import SweepResult

            sweep = SweepResult.read_csv(run_dir / "sweep.csv")
            written.append(plotting.sweep_figure([r.k for r in sweep.rows], [r.routed_ade for r in sweep.rows],
                                                 [r.val_accuracy for r in sweep.rows], out / "k_sweep.png"))
    return written
