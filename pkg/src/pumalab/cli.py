"""Command line front end.

Exit codes: 0 success, 1 bad configuration or unreadable input, 2 some
cells failed but the report was written, 3 nothing usable came out.
"""

import argparse
import dataclasses
import sys

from . import config as cfgmod
from . import experiments as ex
from . import metrics
from .config import ConfigError
from .model import init_mlp, save_checkpoint


def _build_parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="experiment config file (INI)")
    shared.add_argument("--seed", type=int, default=None,
                        help="override the [experiment] seed")
    shared.add_argument("--out", default=None,
                        help="output path (report JSON, checkpoint, or CSV)")

    p = argparse.ArgumentParser(
        prog="pumalab",
        description="influence-based data removal laboratory")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[shared],
                   help="train the base model and save a checkpoint")
    sub.add_parser("remove", parents=[shared],
                   help="run the removal grid (methods x fractions x repeats)")
    sub.add_parser("attack", parents=[shared],
                   help="removal grid plus membership attack rates")
    sub.add_parser("debug", parents=[shared],
                   help="rank mislabel suspects against clean-data baselines")
    sub.add_parser("calibrate", parents=[shared],
                   help="small-step calibration patch on corrupted data")
    sub.add_parser("sweep", parents=[shared],
                   help="patch strength sweep over [sweep] etas")
    sub.add_parser("bench", parents=[shared],
                   help="removal wall-clock comparison at the first fraction")
    sub.add_parser("report", parents=[shared],
                   help="summarize a report JSON, or convert it to CSV via --out")
    return p


def _load_config(args):
    if not args.config:
        raise ConfigError(f"{args.command} needs --config")
    cfg = cfgmod.load(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _summarize(report, stream):
    by_key = {}
    for cell in report.cells:
        if report.kind in ("remove", "attack", "bench"):
            key = (cell.get("method"), cell.get("fraction"))
        elif report.kind == "sweep":
            key = ("eta", cell.get("eta"))
        else:
            key = (report.kind, None)
        by_key.setdefault(key, []).append(cell)

    def mean(cells, field):
        vals = [c[field] for c in cells
                if c.get(field) is not None and c.get("status") == "ok"]
        return sum(vals) / len(vals) if vals else None

    def show(x, digits=3):
        return "-" if x is None else f"{x:.{digits}f}"

    for key in sorted(by_key, key=lambda k: (str(k[0]), str(k[1]))):
        cells = by_key[key]
        bad = sum(1 for c in cells if c.get("status") != "ok")
        if report.kind in ("remove", "attack", "bench"):
            line = (f"  {key[0]:<8} fraction={key[1]:<4} "
                    f"acc {show(mean(cells, 'accuracy_before'))}"
                    f" -> {show(mean(cells, 'accuracy_after'))}")
            if any(c.get("attack_before") is not None for c in cells):
                line += (f"  attack {show(mean(cells, 'attack_before'))}"
                         f" -> {show(mean(cells, 'attack_after'))}")
            t = mean(cells, "remove_ms")
            if t is not None:
                line += f"  remove {t:.0f}ms"
        elif report.kind == "sweep":
            line = (f"  eta={key[1]:<7} "
                    f"acc {show(mean(cells, 'accuracy_after'))}"
                    f"  attack {show(mean(cells, 'attack_after'))}")
        elif report.kind == "debug":
            line = (f"  suspects {show(mean(cells, 'suspect_count'), 1)}"
                    f"  recall@20% {show(mean(cells, 'psi_recall_20'))}"
                    f" vs ntk {show(mean(cells, 'ntk_recall_20'))}")
        elif report.kind == "calibrate":
            line = (f"  ece {show(mean(cells, 'ece_before'), 4)}"
                    f" -> {show(mean(cells, 'ece_after'), 4)}")
        else:
            line = f"  {key[0]}"
        if bad:
            line += f"  [{bad}/{len(cells)} failed]"
        print(line, file=stream)


def _finish(report, args, default_name):
    out = args.out or default_name
    ex.emit_report(report, out, "json")
    failed = report.failed_cells()
    print(f"{report.kind}: {len(report.cells)} cells, "
          f"{len(failed)} failed, wrote {out}")
    _summarize(report, sys.stdout)
    for cell in failed[:5]:
        print(f"  failed cell: {cell.get('error')}", file=sys.stderr)
    if not report.cells or len(failed) == len(report.cells):
        return 3
    if failed:
        return 2
    return 0


def _cmd_train(args):
    cfg = _load_config(args)
    train_set, test_set = ex.build_datasets(cfg)
    spec = ex.model_spec_for(cfg, train_set)
    model, _ = ex.train_schedule(init_mlp(spec), train_set,
                                 cfg.train_configs())
    out = args.out or "model.json"
    save_checkpoint(model, out)
    print(f"train: accuracy {metrics.accuracy(model, train_set):.3f} "
          f"(train) / {metrics.accuracy(model, test_set):.3f} (held out), "
          f"wrote {out}")
    return 0


def _cmd_report(args):
    if not args.config:
        raise ConfigError("report needs --config pointing at a report JSON")
    try:
        report = ex.load_report(args.config)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read report {args.config}: {exc}") from None
    if args.out:
        ex.emit_report(report, args.out, "csv")
        print(f"report: {len(report.cells)} cells -> {args.out}")
    else:
        print(f"report: kind={report.kind} cells={len(report.cells)} "
              f"failed={len(report.failed_cells())}")
        _summarize(report, sys.stdout)
    return 0


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "report":
            return _cmd_report(args)
        cfg = _load_config(args)
        if args.command == "remove":
            report = ex.run_removal_experiment(cfg, include_attack=False)
        elif args.command == "attack":
            report = ex.run_removal_experiment(cfg, include_attack=True,
                                               kind="attack")
        elif args.command == "debug":
            report = ex.run_debug_experiment(cfg)
        elif args.command == "calibrate":
            report = ex.run_calibration_experiment(cfg)
        elif args.command == "sweep":
            report = ex.run_eta_sweep(cfg)
        elif args.command == "bench":
            report = ex.run_bench(cfg)
        else:
            raise ConfigError(f"unknown command {args.command!r}")
        return _finish(report, args, f"{args.command}_report.json")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
