"""Command line entry point: ``uniloc generate|label|train|evaluate|sweep``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
import time
from pathlib import Path

from .config import PipelineConfig, load_config, override
from .dataset import read_dataset, write_dataset
from .identify import IdMode
from .nn import Regime, complexity_estimate, load_model, save_model
from .ot import OtSolver
from .pipeline import (Method, crossing_point, evaluate, run_fingerprint_grid, run_generate, run_label,
                       run_sweep, run_train, write_manifest, write_sweep_csv)

log = logging.getLogger("uniloc")


def _threads(n):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _identifier_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    return override(cfg, "identify", accuracy=getattr(args, "p_i", None),
                    mode=IdMode(args.id_mode) if getattr(args, "id_mode", None) else None,
                    seed=getattr(args, "id_seed", None))


def _estimator_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    return override(cfg, "dictionary", angle_grid=getattr(args, "angle_grid", None),
                    delay_grid=getattr(args, "delay_grid", None), max_paths=getattr(args, "max_paths", None))


def _ot_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    cfg = override(cfg, "ot", solver=OtSolver(args.ot_solver) if args.ot_solver else None,
                   regularization=args.ot_eps, max_iterations=args.ot_iters)
    return override(cfg, "label", delta_d=args.delta_d)


def cmd_generate(args, cfg: PipelineConfig) -> int:
    cfg = override(cfg, "data", n_train=args.n_train, n_test=args.n_test,
                   train_seed=args.train_seed, test_seed=args.test_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = cfg.load_scene()
    train_ds, test_ds = run_generate(cfg, scene)
    files = [out / "train.uloc", out / "test.uloc"]
    write_dataset(files[0], train_ds)
    write_dataset(files[1], test_ds)
    summary = {"train": train_ds.summary(), "test": test_ds.summary()}
    if args.fingerprint:
        fp = run_fingerprint_grid(scene, cfg)
        files.append(out / "fingerprint.uloc")
        write_dataset(files[-1], fp)
        summary["fingerprint"] = fp.summary()
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    write_manifest(out, "generate", cfg, outputs=files)
    for name, s in summary.items():
        print(f"{name}: {s['n_users']} users ({s['n_los']} LoS, {s['n_nlos']} NLoS)")
    return 0


def cmd_label(args, cfg: PipelineConfig) -> int:
    cfg = _ot_overrides(_estimator_overrides(_identifier_overrides(cfg, args), args), args)
    ds = read_dataset(args.data)
    labelled = run_label(ds, cfg.load_scene(), cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, labelled)
    write_manifest(out.parent, "label", cfg, inputs=[args.data], outputs=[out],
                   extra={"summary": labelled.summary(), "ground_truth_reads": labelled.ground_truth_reads})
    s = labelled.summary()
    print(f"labelled {s['n_users']} users, {s['n_identified_los']} identified LoS")
    return 0


def cmd_train(args, cfg: PipelineConfig) -> int:
    cfg = override(cfg, "train", epochs=args.epochs, seed=args.seed, learning_rate=args.lr)
    regime = Regime(args.regime)
    ds = read_dataset(args.data)
    t0 = time.perf_counter()
    result = run_train(ds, cfg.load_scene(), cfg, regime)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(result.model, out)
    hist = out.with_suffix(".loss.csv")
    with open(hist, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        w.writerows((i + 1, repr(v)) for i, v in enumerate(result.history))
    if result.history:
        from .plotting import plot_loss
        plot_loss(result.history, out.with_suffix(".loss.png"), f"{regime.value} training loss")
    write_manifest(out.parent, "train", cfg, inputs=[args.data], outputs=[out, hist],
                   extra={"regime": regime.value, "ground_truth_reads": ds.ground_truth_reads,
                          "macs_per_epoch": complexity_estimate(result.model.widths, len(ds))})
    last = result.history[-1] if result.history else float("nan")
    print(f"trained {regime.value} for {len(result.history)} epochs in {time.perf_counter() - t0:.1f} s, "
          f"final loss {last:.4g}")
    return 0


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    cfg = _estimator_overrides(_identifier_overrides(cfg, args), args)
    method = Method(args.method)
    test = read_dataset(args.test)
    model = load_model(args.model) if args.model else None
    report = evaluate(method, test, cfg.load_scene(), cfg, model,
                      identifier=cfg.identify if method in (Method.UNIFIED, Method.CONSERVATIVE) else None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_cdf_csv(out / "error_cdf.csv")
    (out / "report.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True))
    from .plotting import plot_cdfs
    plot_cdfs([report], out / "error_cdf.png")
    inputs = [args.test] + ([args.model] if args.model else [])
    write_manifest(out, "evaluate", cfg, inputs=inputs,
                   outputs=[out / "error_cdf.csv", out / "report.json"],
                   extra={"method": method.value, "report_digest": report.digest()})
    print(f"{method.value}: MAE LoS {report.mae_los:.3f} m, NLoS {report.mae_nlos:.3f} m, "
          f"all {report.mae_all:.3f} m over {len(report.errors)} users")
    return 0


def cmd_sweep(args, cfg: PipelineConfig) -> int:
    cfg = override(cfg, "train", epochs=args.epochs)
    if args.grid:
        cfg = override(cfg, "sweep", grid=tuple(args.grid))
    if args.no_retrain:
        cfg = override(cfg, "sweep", retrain=False)
    train_ds = read_dataset(args.train)
    test_ds = read_dataset(args.test)
    rows, _ = run_sweep(train_ds, test_ds, cfg.load_scene(), cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, out / "sweep.csv")
    from .plotting import plot_sweep
    plot_sweep(rows, out / "sweep.png")
    cross = crossing_point(rows)
    write_manifest(out, "sweep", cfg, inputs=[args.train, args.test], outputs=[out / "sweep.csv"],
                   extra={"crossing_p_i": cross})
    for r in rows:
        print(f"p_I={r.p_i:.2f} {r.method:>12}: LoS {r.mae_los:.2f}  NLoS {r.mae_nlos:.2f}  all {r.mae_all:.2f}")
    print("crossing p_I:", "none on grid" if cross is None else f"{cross:.3f}")
    return 0


def _dictionary_flags(p):
    p.add_argument("--angle-grid", type=int, help="OMP angle atoms")
    p.add_argument("--delay-grid", type=int, help="OMP delay atoms")
    p.add_argument("--max-paths", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uniloc", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (defaults if omitted)")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS threads (1 for bitwise reproducibility)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="sample users, trace paths, write datasets")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--train-seed", type=int)
    p.add_argument("--test-seed", type=int)
    p.add_argument("--fingerprint", action="store_true", help="also write the surveyed grid dataset")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("label", parents=[common], help="model-based estimates, identification, OT labels")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--p-i", type=float, help="identification accuracy")
    p.add_argument("--id-mode", choices=[m.value for m in IdMode])
    p.add_argument("--id-seed", type=int)
    p.add_argument("--delta-d", type=float, help="NLoS target grid spacing (m)")
    p.add_argument("--ot-solver", choices=[s.value for s in OtSolver])
    p.add_argument("--ot-eps", type=float, help="absolute entropic weight (default: scaled median cost)")
    p.add_argument("--ot-iters", type=int)
    _dictionary_flags(p)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train", parents=[common], help="train the network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="model file")
    p.add_argument("--regime", choices=[r.value for r in Regime], default=Regime.SELF_LABEL.value)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="localize a test set and report errors")
    p.add_argument("--test", required=True)
    p.add_argument("--method", choices=[m.value for m in Method], default=Method.UNIFIED.value)
    p.add_argument("--model")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--p-i", type=float)
    p.add_argument("--id-seed", type=int)
    _dictionary_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", parents=[common], help="MAE against identification accuracy")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=float, nargs="+")
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-retrain", action="store_true", help="train once at the first grid value")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
    except (OSError, ValueError) as exc:
        print(f"uniloc: bad config: {exc}", file=sys.stderr)
        return 2
    with _threads(args.threads):
        return args.func(args, cfg)


if __name__ == "__main__":
    sys.exit(main())
