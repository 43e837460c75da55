"""``haocl`` command line: node daemons and benchmark runs."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import signal
import sys
import threading
import warnings
from pathlib import Path

from . import bench
from .config import load_config
from .daemon import NodeDaemon
from .errors import ConfigError, HaoclError


def _size_arg(text):
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        num = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"size {key} needs a number, got {value!r}") from None
    return key, int(num) if num.is_integer() and "." not in value and "e" not in value.lower() else num


def _add_run_args(p):
    p.add_argument("--config", required=True, help="cluster config file")
    p.add_argument("--benchmark", required=True, choices=bench.BENCHMARKS)
    p.add_argument("--size", type=_size_arg, action="append", default=[], metavar="KEY=VALUE",
                   help="override one size parameter, e.g. --size m=512 (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--user", default="bench", help="user id presented to the daemons")
    p.add_argument("--launch", action="store_true",
                   help="spawn the config's daemons locally for the duration of the run")
    p.add_argument("--report", type=Path, help="also write the JSON report here")
    p.add_argument("--save-result", type=Path, help="write the result array(s) as .npy")


def build_parser():
    parser = argparse.ArgumentParser(prog="haocl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    node = sub.add_parser("node", help="run a node daemon")
    node.add_argument("--config", required=True)
    node.add_argument("--name", required=True, help="which node entry of the config to serve")

    run = sub.add_parser("run", help="run a benchmark and print its JSON report")
    _add_run_args(run)
    run.add_argument("--policy", default="user_directed",
                     choices=["user_directed", "round_robin", "static_map", "cost_model"])
    run.add_argument("--partitions", type=int, default=1)
    run.add_argument("--baseline-file", type=Path, default=None,
                     help="baseline store used to compute speedup")

    base = sub.add_parser("baseline", help="record a single-device baseline run")
    _add_run_args(base)
    base.add_argument("--baseline-file", type=Path, default=None)

    bd = sub.add_parser("breakdown", help="tabulate phase times of saved reports as CSV")
    bd.add_argument("reports", nargs="+", type=Path)
    bd.add_argument("--out", type=Path, help="write CSV here instead of stdout")
    return parser


def cmd_node(args):
    config = load_config(args.config)
    node = config.node(args.name)
    calls = logging.getLogger("haocl.calls")
    handler = logging.StreamHandler(sys.stdout)
    handler.setFormatter(logging.Formatter("%(message)s"))
    calls.addHandler(handler)
    calls.setLevel(logging.INFO)
    calls.propagate = False

    daemon = NodeDaemon(node.endpoint, node.devices, node.name).start()

    def on_signal(signum, frame):
        threading.Thread(target=daemon.stop, daemon=True).start()

    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)
    while not daemon.wait(0.2):
        pass
    return 0


def _run(args, policy, partitions, baseline_file):
    config = load_config(args.config)
    cluster = bench.LocalCluster(config).start() if args.launch else None
    try:
        return bench.run_benchmark(config, args.benchmark, dict(args.size), policy=policy,
                                   partitions=partitions, seed=args.seed, user_id=args.user,
                                   baseline_file=baseline_file)
    finally:
        if cluster is not None:
            cluster.stop()


def _emit(args, report, result):
    text = report.to_json()
    print(text)
    if args.report:
        args.report.write_text(text + "\n")
    if args.save_result:
        import numpy as np

        if isinstance(result, tuple):
            np.savez(args.save_result, *result)
        else:
            np.save(args.save_result, result)
    return 0 if report.verify == "pass" else 3


def cmd_run(args):
    baseline = args.baseline_file or Path(bench.default_baseline_file())
    with warnings.catch_warnings():
        warnings.simplefilter("always")
        with warnings.catch_warnings(record=True) as caught:
            report, result = _run(args, args.policy, args.partitions, baseline)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    return _emit(args, report, result)


def cmd_baseline(args):
    report, result = _run(args, "user_directed", 1, None)
    path = args.baseline_file or Path(bench.default_baseline_file())
    if report.verify == "pass":
        bench.record_baseline(report, path)
    return _emit(args, report, result)


def cmd_breakdown(args):
    rows = bench.breakdown_rows(args.reports)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(out, fieldnames=bench.BREAKDOWN_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.3f}" if isinstance(v, float) else v) for k, v in row.items()})
    finally:
        if args.out:
            out.close()
    return 0


COMMANDS = {"node": cmd_node, "run": cmd_run, "baseline": cmd_baseline, "breakdown": cmd_breakdown}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (HaoclError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
