"""Command-line interface.

Commands compose through a run directory: ``init`` creates it, ``gen-data``
writes a dataset, ``loop`` runs the autonomous research loop against it,
``report`` renders the evolution table, ``serve`` exposes the HTTP API and
dashboard over a live loop.  Exit codes: 0 ok, 1 check/run failure, 2 usage.
"""

from __future__ import annotations

import argparse
import json
import os
import signal
import sys
import threading

from .advisory import ScriptedAdvisor
from .apiserver import DEFAULT_PORT, ApiServer
from .dataset import DiskSource, split_by_day, write_dataset
from .external_advisor import ExternalAdvisor, load_advisor_config
from .memstore import MemoryStore
from .modelcfg import preset_variant
from .orchestrator import LoopConfig, LoopControl, RunDir, run_loop
from .params import read_snapshot
from .profiles import DEFAULT_SEED, spec_for_profile
from .reporting import render_report, report_rows
from .schedule import preset_schedule
from .training import TrainRunSpec, train
from .models import build_model
from .evaluation import CELL_KEYS, MetricReport, metric_M


class UsageError(Exception):
    pass


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rankforge",
                                     description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="create a run directory with a fresh memory store")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(fn=cmd_init)

    p = sub.add_parser("gen-data", help="generate a seeded synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--profile", default="default", choices=("default", "replay"))
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--days", type=int)
    p.add_argument("--examples-per-day", type=int)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a single variant and print its metrics")
    _data_flags(p)
    _variant_flags(p)
    p.add_argument("--curve-csv", help="write the per-day loss curve here")
    p.add_argument("--snapshot", help="write the final parameter snapshot here")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a parameter snapshot on the eval window")
    _data_flags(p)
    _variant_flags(p, schedule=False)
    p.add_argument("--snapshot", required=True)
    p.add_argument("--baseline-aggregate", type=float)
    p.add_argument("--csv", help="write the six-cell AUC table as CSV")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference check of all gradients")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("loop", help="run the autonomous research loop")
    _data_flags(p)
    _loop_flags(p)
    p.set_defaults(fn=cmd_loop)

    p = sub.add_parser("report", help="render the evolution table from a run dir")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--format", default="md", choices=("md", "csv"))
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("serve", help="start the HTTP API plus the loop")
    _data_flags(p)
    _loop_flags(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=DEFAULT_PORT)
    p.add_argument("--static-dir", help="dashboard assets (default: frontend/dist)")
    p.add_argument("--no-loop", action="store_true",
                   help="serve an existing run dir without running the loop")
    p.set_defaults(fn=cmd_serve)
    return parser


def _data_flags(p):
    p.add_argument("--data-dir", required=True,
                   help="directory containing the dataset manifest")


def _variant_flags(p, schedule=True):
    p.add_argument("--variant", default="V2",
                   help="preset tag: V1 V2 V3.0 V3.1 V3.2 V3.3 V3.4 V3.5")
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--num-heads", type=int, default=2)
    p.add_argument("--num-layers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-days", type=int,
                   help="default: dataset days minus the 7-day eval window")
    if schedule:
        p.add_argument("--schedule",
                       help="Constant | HalfDataFifth | FourPhase (default: variant preset)")
        p.add_argument("--base-lr", type=float, default=0.006)
        p.add_argument("--batch-size", type=int, default=64)


def _loop_flags(p):
    p.add_argument("--run-dir", required=True)
    p.add_argument("--threshold", type=float, default=0.5,
                   help="persistence threshold: higher favors fixing over reverting")
    p.add_argument("--budget-gpu-hours", type=float, default=2.0)
    p.add_argument("--gate", default="auto", choices=("auto", "require"))
    p.add_argument("--advisors", help="advisor config file (default: one scripted advisor)")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--base-lr", type=float, default=0.006)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--train-days", type=int)
    p.add_argument("--initial", default="V2", help="initial baseline preset tag")
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--clock", default="logical", choices=("logical", "wall"))
    p.add_argument("--fix-cap", type=int, default=2)


def _source(args) -> DiskSource:
    if not os.path.isdir(args.data_dir):
        raise FileNotFoundError(f"--data-dir {args.data_dir} is not a directory")
    return DiskSource(args.data_dir)


def _variant(args, tag=None):
    return preset_variant(tag or args.variant, embed_dim=args.embed_dim,
                          num_heads=args.num_heads, num_layers=args.num_layers)


def cmd_init(args) -> int:
    rd = RunDir(args.run_dir)
    store = MemoryStore(rd.memory)
    if store.exists():
        print(f"error: run dir already initialized: {args.run_dir}", file=sys.stderr)
        return 2
    rd.create()
    store.init_store()
    print(f"initialized run dir at {args.run_dir}")
    return 0


def cmd_gen_data(args) -> int:
    spec = spec_for_profile(args.profile)
    if args.days:
        spec.days = args.days
    if args.examples_per_day:
        spec.examples_per_day = args.examples_per_day
    spec.__post_init__()
    manifest = write_dataset(spec, args.seed, args.out)
    print(f"wrote {spec.days} day shards + manifest to {args.out}")
    print(f"manifest: {manifest}")
    return 0


def cmd_train(args) -> int:
    source = _source(args)
    train_days = args.train_days or source.days - 7
    split = split_by_day(source, train_days)
    variant = _variant(args)
    schedule = (preset_schedule(args.variant, args.base_lr) if not args.schedule
                else preset_schedule({"Constant": "V2", "HalfDataFifth": "V3.2",
                                      "FourPhase": "V3.5"}[args.schedule], args.base_lr))
    spec = TrainRunSpec(variant=variant, schedule=schedule, batch_size=args.batch_size,
                        total_days=train_days, seed=args.seed)
    record = train(spec, source, split, snapshot_path=args.snapshot)
    if args.curve_csv:
        from .training import loss_curve_csv
        with open(args.curve_csv, "w", encoding="utf-8") as fh:
            fh.write(loss_curve_csv(record))
    print(f"status: {record.status}")
    if record.fault_reason:
        print(f"fault: {record.fault_reason}")
    if record.report is not None:
        print(record.report.to_markdown())
    print(f"gpu_hours: {record.gpu_hours:.6f}")
    return 0 if record.status == "Succeeded" else 1


def cmd_eval(args) -> int:
    source = _source(args)
    train_days = args.train_days or source.days - 7
    split = split_by_day(source, train_days)
    model = build_model(_variant(args), source.spec.dims(), args.seed)
    model.params.load(args.snapshot)
    baseline = None
    if args.baseline_aggregate is not None:
        baseline = MetricReport(aucs={}, aggregate=args.baseline_aggregate)
    report = metric_M(model.predict_packed, source, split, baseline=baseline)
    print(report.to_markdown())
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write("cell,auc\n")
            for key in CELL_KEYS:
                fh.write(f"{key},{report.aucs.get(key, '')}\n")
            fh.write(f"aggregate,{report.aggregate}\n")
    return 0 if report.valid else 1


def cmd_grad_check(args) -> int:
    from .gradcheck import model_check, primitive_sweep
    checks = [("primitives", lambda: primitive_sweep(args.seeds)),
              ("model_separate_sequences", lambda: model_check("separate")),
              ("model_unified_sequence", lambda: model_check("unified"))]
    worst = 0.0
    for name, fn in checks:
        value = fn()
        worst = max(worst, value)
        print(f"{name}: max relative discrepancy {value:.3e}")
    print(f"overall: {worst:.3e} (tolerance {args.tolerance:g})")
    if worst > args.tolerance:
        print("FAIL", file=sys.stderr)
        return 1
    print("OK")
    return 0


def _loop_setup(args):
    source = _source(args)
    advisors = None
    external = False
    if args.advisors:
        handles = load_advisor_config(args.advisors)
        advisors = []
        for handle in handles:
            if handle.kind == "scripted":
                advisors.append(ScriptedAdvisor(handle.id))
            else:
                external = True
                log_dir = os.path.join(args.run_dir, "logs", "advisors")
                advisors.append(ExternalAdvisor(handle, log_dir=log_dir))
    if external and args.clock == "logical":
        raise UsageError("external advisors cannot run in deterministic-replay "
                         "mode; pass --clock wall")
    cfg = LoopConfig(
        threshold=args.threshold, budget_gpu_hours=args.budget_gpu_hours,
        gate_mode="RequireApproval" if args.gate == "require" else "AutoApprove",
        seed=args.seed, train_days=args.train_days, batch_size=args.batch_size,
        base_lr=args.base_lr, clock=args.clock, fix_cap=args.fix_cap,
        initial_variant=preset_variant(args.initial, embed_dim=args.embed_dim))
    return source, cfg, advisors


def cmd_loop(args) -> int:
    source, cfg, advisors = _loop_setup(args)
    result = run_loop(args.run_dir, source, cfg, advisors=advisors)
    print(f"loop finished after {result.rounds} rounds: {result.stop_reason}")
    print(f"final baseline: {result.state.baseline_tag}")
    print(render_report(report_rows(result.store.load_index())))
    return 0


def cmd_report(args) -> int:
    store = MemoryStore(RunDir(args.run_dir).memory)
    if not store.exists():
        raise FileNotFoundError(f"no memory store under {args.run_dir}")
    rows = report_rows(store.load_index())
    if args.format == "md":
        print(render_report(rows))
    else:
        print("version,innovations,seq_len,lr,delta,status")
        for r in rows:
            print(f"{r.version},\"{r.innovations}\",{r.seq_len},{r.lr},{r.delta},{r.status}")
    return 0


def cmd_serve(args) -> int:
    source, cfg, advisors = _loop_setup(args)
    control = LoopControl()
    store = MemoryStore(RunDir(args.run_dir).memory)
    static_dir = args.static_dir
    if static_dir is None:
        guess = os.path.join(os.getcwd(), "frontend", "dist")
        static_dir = guess if os.path.isdir(guess) else None
    server = ApiServer(control, store, host=args.host, port=args.port,
                       static_dir=static_dir)
    server.start()
    print(f"api listening on http://{args.host}:{server.port}/", flush=True)

    loop_thread = None
    if not args.no_loop:
        loop_thread = threading.Thread(
            target=run_loop, args=(args.run_dir, source, cfg),
            kwargs={"advisors": advisors, "control": control}, daemon=True)
        loop_thread.start()

    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *a: stop.set())
    signal.signal(signal.SIGTERM, lambda *a: stop.set())
    while not stop.is_set():
        stop.wait(0.5)
    control.stop()
    if loop_thread is not None:
        loop_thread.join(timeout=30.0)
    server.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
