"""Command-line driver.

Exit codes: 0 success, 1 usage, 2 data error, 3 artifact/version error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .errors import ArtifactError, EmptyDataset, SceneRouterError
from .eval.metrics import MetricResult
from .experts import NNRetrieval, expert_from_spec
from .scheduler import register_expert, route
from .trajdata import parse_dataset, read_windows_csv, window_segments

log = logging.getLogger("scenerouter")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ARTIFACT = 0, 1, 2, 3
DEFAULT_KS = (3, 4, 5, 6, 7, 8, 10)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, help="master seed (default 42)")
    p.add_argument("--threads", type=int, help="worker threads (0 = all cores)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--k", type=int, help="number of scene clusters")
    p.add_argument("--dataset", help="'synthetic', a 'frame agent x y' file or a window CSV")
    p.add_argument("--dt", type=float, help="seconds per frame")
    p.add_argument("--t-obs", type=int, dest="t_obs", help="observed frames per window")
    p.add_argument("--t-pred", type=int, dest="t_pred", help="predicted frames per window")
    p.add_argument("--stride", type=int, help="frames between window starts")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def build_parser():
    parser = _Parser(prog="scenerouter", description="Scene clustering and expert routing for trajectory forecasting.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="fit the full pipeline and write every artifact")
    _common(p)

    p = sub.add_parser("route", help="route windows through frozen artifacts")
    p.add_argument("model_dir")
    p.add_argument("input", help="window CSV or 'frame agent x y' trajectory file")
    p.add_argument("--out", help="output directory (default MODEL_DIR/routed)")
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("add-expert", help="score a new expert and update the policy")
    p.add_argument("model_dir")
    p.add_argument("spec", help="kind[:key=value,...], e.g. constant_velocity:name=cv2")

    p = sub.add_parser("ablate", help="component ablation table")
    _common(p)
    p.add_argument("--variants", default="", help="comma-separated variants (default: all)")

    p = sub.add_parser("sweep", help="number-of-scenes sweep")
    _common(p)
    p.add_argument("--ks", default=",".join(map(str, DEFAULT_KS)), help="comma-separated K values")

    p = sub.add_parser("synth", help="write the synthetic benchmark")
    _common(p)

    p = sub.add_parser("report", help="tables, plot data and figures from a run directory")
    p.add_argument("run_dir")
    p.add_argument("--out", help="report directory (default RUN_DIR/report)")
    p.add_argument("--no-figures", action="store_true")
    return parser


def resolve_config(args):
    cfg = pl.PipelineConfig()
    try:
        if args.config:
            cfg = pl.PipelineConfig.load(args.config, cfg)
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            key, _, val = item.partition("=")
            overrides[key] = val
        for key in ("seed", "threads", "k", "dataset", "dt", "t_obs", "t_pred", "stride"):
            val = getattr(args, key, None)
            if val is not None:
                overrides[key] = val
        return pl.PipelineConfig.from_mapping(overrides, cfg)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def _out(args, default="scenerouter_out"):
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args):
    cfg = resolve_config(args)
    out = _out(args)
    result = pl.run(cfg, out)
    print(f"routed test ADE {result.test.ade:.6f} FDE {result.test.fde:.6f} "
          f"(best single {result.single_best_name}: {result.single_best.ade:.6f})")
    print(f"artifacts in {out}")
    return EXIT_OK


def _load_route_input(path, cfg):
    path = Path(path)
    if not path.exists():
        raise EmptyDataset(f"input file not found: {path}")
    if path.suffix == ".csv":
        return read_windows_csv(path, cfg.t_obs, cfg.t_pred, cfg.dt)
    try:
        records = parse_dataset(path, cfg.dt)
    except EmptyDataset:
        return []
    return window_segments(records, cfg.t_obs, cfg.t_pred, cfg.stride, cfg.dt)


def cmd_route(args):
    art = pl.load_artifacts(args.model_dir)
    windows = _load_route_input(args.input, art.cfg)
    out = _out(args, Path(args.model_dir) / "routed")
    fcfg = pl.feature_config(art.cfg)
    k = art.policy.k
    seg_ade, seg_fde = [], []
    with open(out / "predictions.csv", "w", newline="") as pf, open(out / "decisions.csv", "w", newline="") as df:
        pw, dw = csv.writer(pf), csv.writer(df)
        pw.writerow(["window_id", "agent_id", "step", "x", "y"])
        dw.writerow(["window_id", "agent_id", "predicted_label", "expert_index", "expert_name"]
                    + [f"p_{c + 1}" for c in range(k)] + ["feature_us", "classify_us", "predict_us"])
        for w in windows:
            preds, decisions = route(w, art.classifier, art.policy, art.pool, fcfg)
            a, f = pl.score_window(preds, w)
            seg_ade.append(a)
            seg_fde.append(f)
            for p in preds:
                for t, (x, y) in enumerate(p.predicted):
                    pw.writerow([w.window_id, p.agent_id, t + 1, repr(float(x)), repr(float(y))])
            for d in decisions:
                lat = d.latency_us
                dw.writerow([d.window_id, d.agent_id, d.predicted_label, d.chosen_expert.index,
                             d.chosen_expert.name] + [repr(v) for v in d.probabilities]
                            + [f"{lat['feature']:.3f}", f"{lat['classify']:.3f}", f"{lat['predict']:.3f}"])
    if seg_ade:
        res = MetricResult.from_segments(np.concatenate(seg_ade), np.concatenate(seg_fde))
    else:
        res = MetricResult(float("nan"), float("nan"), 0)
    with open(out / "route_metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ade", "fde", "n_segments", "n_windows"])
        if res.n_segments:
            w.writerow([repr(res.ade), repr(res.fde), res.n_segments, len(windows)])
    if res.n_segments:
        print(f"routed {res.n_segments} segments in {len(windows)} windows: ADE {res.ade:.6f} FDE {res.fde:.6f}")
    else:
        print("no windows to route")
    return EXIT_OK


def cmd_add_expert(args):
    model_dir = Path(args.model_dir)
    pl.verify_hashes(model_dir)
    art = pl.load_artifacts(model_dir)
    bank = model_dir / "nn_bank.csv"
    try:
        expert = expert_from_spec(args.spec, bank=bank if bank.exists() else None)
    except (ArtifactError, TypeError) as exc:
        raise UsageError(f"bad expert spec {args.spec!r}: {exc}") from exc
    holdout = read_windows_csv(pl.require(model_dir / "holdout.csv"), art.cfg.t_obs, art.cfg.t_pred, art.cfg.dt)
    labels = pl.read_holdout_labels(model_dir)
    old = art.policy
    new = register_expert(art.pool, expert, holdout, labels, old)

    new.evidence.write_csv(model_dir / "evidence.csv")
    new.write_csv(model_dir / "policy.csv")
    art.pool.write_manifest(model_dir / "pool.txt")
    if isinstance(expert, NNRetrieval) and not bank.exists():
        expert.save_bank(bank)
    diff = [f"policy version {old.version} -> {new.version}"]
    for c in range(1, new.k + 1):
        before = old.expert_names[old.mapping[c] - 1]
        after = new.expert_names[new.mapping[c] - 1]
        mark = "changed" if before != after else "same"
        diff.append(f"cluster {c}: {before} -> {after} ({mark})")
    (model_dir / "policy_diff.txt").write_text("\n".join(diff) + "\n")
    info = pl.read_manifest(model_dir)
    pl.write_manifest(model_dir, art.cfg, {
        "val_accuracy": info.get("val_accuracy", ""),
        "policy_version": new.version,
    })
    print("\n".join(diff))
    return EXIT_OK


def cmd_ablate(args):
    from .eval.ablation import VARIANTS, AblationConfig, AblationSuite, write_ablation

    cfg = resolve_config(args)
    names = [v.strip() for v in args.variants.split(",") if v.strip()] or list(VARIANTS)
    configs = [AblationConfig(v, cfg.seed) for v in names]  # validates names before any work
    suite = AblationSuite(pl.prepare(cfg))
    results = {c.variant: suite.run(c) for c in configs}
    ref = results.get("single_best") or suite.run("single_best")
    out = _out(args)
    write_ablation(out / "ablation.csv", results, reference=ref)
    for name, r in results.items():
        print(f"{name:<18} ADE {r.ade:.6f} FDE {r.fde:.6f}")
    return EXIT_OK


def cmd_sweep(args):
    from .eval.ablation import sweep_k

    cfg = resolve_config(args)
    try:
        ks = [int(k) for k in args.ks.split(",") if k.strip()]
    except ValueError as exc:
        raise UsageError(f"--ks: {exc}") from exc
    if not ks or min(ks) < 1:
        raise UsageError("--ks needs positive integers")
    result = sweep_k(pl.prepare(cfg), ks, cfg.seed)
    out = _out(args)
    result.write_csv(out / "sweep.csv")
    for r in result.rows:
        print(f"K={r.k:<3} val_acc {r.val_accuracy:.3f} routed ADE {r.routed_ade:.6f}")
    print(f"best K: {result.best_k}")
    return EXIT_OK


def cmd_synth(args):
    from .eval.synth import synth_benchmark
    from .trajdata import write_trajectory_file, write_windows_csv

    cfg = resolve_config(args)
    bench = synth_benchmark(cfg.seed, cfg.synth_per_regime, cfg.t_obs, cfg.t_pred, cfg.dt)
    out = _out(args)
    write_trajectory_file(bench.windows, out / "trajectories.txt")
    write_windows_csv(bench.windows, out / "windows.csv")
    bench.write_tags(out / "regimes.csv")
    print(f"{len(bench.windows)} windows written to {out} "
          f"(re-window with --stride {cfg.t_obs + cfg.t_pred})")
    return EXIT_OK


def cmd_report(args):
    from .eval.report import build_report

    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise pl.ArtifactNotFound(f"run directory not found: {run_dir}")
    written = build_report(run_dir, args.out, figures=not args.no_figures)
    for path in written:
        print(path)
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "route": cmd_route,
    "add-expert": cmd_add_expert,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "synth": cmd_synth,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"scenerouter: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SceneRouterError as exc:
        code = exc.exit_code
        print(f"scenerouter: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    except FileNotFoundError as exc:
        print(f"scenerouter: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
