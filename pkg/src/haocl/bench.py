"""Benchmark harness: local clusters, seeded workloads, phase timing and reports."""

from __future__ import annotations

import json
import math
import os
import random
import socket
import subprocess
import sys
import tempfile
import threading
import time
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .comm import Endpoint, connect
from .config import ClusterConfig, DeviceModel, NodeConfig, load_config, parse_config
from .errors import ConfigError, HaoclError
from .host import PHASES, HostContext, TimingBreakdown, init_cluster
from .scheduler import Auto, Explicit, KernelTask
from .wire import DeviceType

BENCHMARKS = ("matmul", "spmv", "bfs", "knn", "vecadd")

DEFAULT_SIZES = {
    "matmul": {"m": 1024, "k": 1024, "n": 1024},
    "spmv": {"rows": 100_000, "cols": 100_000, "density": 1e-4},
    "bfs": {"vertices": 100_000, "edges": 1_000_000},
    "knn": {"refs": 100_000, "queries": 1000, "dim": 16, "k": 10},
    "vecadd": {"n": 1_000_000},
}

INIT_FLAG_PCT = 5.0


# -- local clusters ------------------------------------------------------------

def _port_pair_free(port):
    for p in (port, port + 1):
        with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
            try:
                s.bind(("127.0.0.1", p))
            except OSError:
                return False
    return True


def free_port_pairs(count, rng=None):
    """``count`` base ports whose port and port+1 are both bindable."""
    rng = rng or random.Random()
    out = []
    while len(out) < count:
        p = rng.randrange(20000, 60000, 2)
        if p not in out and p + 1 not in out and _port_pair_free(p):
            out.append(p)
    return out


def local_config(devices_per_node, host="127.0.0.1", static_map=None) -> ClusterConfig:
    """Config for daemons on one machine.

    ``devices_per_node`` is a list with one entry per node, each a list of
    ``(type, throughput)`` pairs.
    """
    ports = free_port_pairs(len(devices_per_node) + 1)
    nodes = tuple(
        NodeConfig(f"n{i}", Endpoint(host, ports[i + 1]),
                   tuple(DeviceModel(DeviceType.parse(t), float(r)) for t, r in devs))
        for i, devs in enumerate(devices_per_node)
    )
    return ClusterConfig(Endpoint(host, ports[0]), nodes, dict(static_map or {}))


class LocalCluster:
    """Node daemons as child processes of this one, one per config node."""

    def __init__(self, config: ClusterConfig, workdir=None, quiet=True):
        self.config = config
        self._tmp = None
        if workdir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="haocl-")
            workdir = self._tmp.name
        self.workdir = Path(workdir)
        self.config_path = self.workdir / "cluster.conf"
        self.config_path.write_text(config.to_text())
        self.quiet = quiet
        self.procs: dict[str, subprocess.Popen] = {}

    def start(self, timeout=20.0) -> "LocalCluster":
        for n in self.config.nodes:
            self.procs[n.name] = subprocess.Popen(
                [sys.executable, "-m", "haocl", "node", "--config", str(self.config_path),
                 "--name", n.name],
                stdout=subprocess.DEVNULL if self.quiet else None,
                stderr=subprocess.DEVNULL if self.quiet else None,
            )
        deadline = time.monotonic() + timeout
        for n in self.config.nodes:
            while True:
                if self.procs[n.name].poll() is not None:
                    self.stop()
                    raise HaoclError(f"daemon {n.name} exited during startup")
                try:
                    connect(n.endpoint, retries=0).close()
                    break
                except HaoclError:
                    if time.monotonic() > deadline:
                        self.stop()
                        raise
                    time.sleep(0.05)
        return self

    def kill(self, name):
        self.procs[name].kill()
        self.procs[name].wait()

    def stop(self, timeout=10.0):
        for n in self.config.nodes:
            p = self.procs.get(n.name)
            if p is None or p.poll() is not None:
                continue
            try:
                connect(n.endpoint, retries=0, handshake_timeout=2.0).shutdown(timeout=timeout)
            except HaoclError:
                p.terminate()
        for p in self.procs.values():
            try:
                p.wait(timeout)
            except subprocess.TimeoutExpired:
                p.kill()
                p.wait()
        if self._tmp is not None:
            self._tmp.cleanup()
            self._tmp = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


# -- phase timing ----------------------------------------------------------------

class PhaseClock:
    """Attributes consecutive wall-clock intervals to the four run phases."""

    def __init__(self):
        self.timing = TimingBreakdown()
        self.started = None
        self.ended = None

    @contextmanager
    def phase(self, name):
        t0 = time.perf_counter()
        if self.started is None:
            self.started = t0
        try:
            yield
        finally:
            t1 = time.perf_counter()
            self.ended = t1
            field_name = f"{name}_ms"
            setattr(self.timing, field_name, getattr(self.timing, field_name) + (t1 - t0) * 1000)

    @property
    def end_to_end_ms(self):
        return (self.ended - self.started) * 1000


def parallel(fns):
    """Run callables on one thread each; re-raise the first failure after joining."""
    results = [None] * len(fns)
    errors = []

    def run(i, fn):
        try:
            results[i] = fn()
        except BaseException as exc:
            errors.append(exc)

    threads = [threading.Thread(target=run, args=(i, fn)) for i, fn in enumerate(fns)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return results


# -- workloads ---------------------------------------------------------------------

def random_csr(rows, cols, density, rng):
    """Uniform random sparse matrix as (row_ptr, col_idx, values), no duplicates."""
    target = max(1, int(round(rows * cols * density)))
    flat = np.unique(rng.integers(0, rows * cols, size=target, dtype=np.int64))
    r, c = np.divmod(flat, cols)
    row_ptr = np.zeros(rows + 1, dtype=np.int64)
    np.add.at(row_ptr, r + 1, 1)
    row_ptr = np.cumsum(row_ptr)
    return row_ptr, c.astype(np.int64), rng.standard_normal(flat.size)


def random_graph(vertices, edges, rng):
    """Undirected G(n, m) multigraph without self loops, as CSR adjacency."""
    u = rng.integers(0, vertices, size=edges, dtype=np.int64)
    v = rng.integers(0, vertices, size=edges, dtype=np.int64)
    keep = u != v
    src = np.concatenate([u[keep], v[keep]])
    dst = np.concatenate([v[keep], u[keep]])
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    row_ptr = np.zeros(vertices + 1, dtype=np.int64)
    np.add.at(row_ptr, src + 1, 1)
    return np.cumsum(row_ptr), dst


def make_inputs(benchmark, size, seed):
    rng = np.random.default_rng(seed)
    if benchmark == "matmul":
        return {"a": rng.standard_normal((size["m"], size["k"])),
                "b": rng.standard_normal((size["k"], size["n"]))}
    if benchmark == "spmv":
        rp, ci, vals = random_csr(size["rows"], size["cols"], size["density"], rng)
        return {"hdr": np.array([size["rows"], size["cols"]], dtype=np.int64),
                "row_ptr": rp, "col_idx": ci, "values": vals,
                "x": rng.standard_normal(size["cols"])}
    if benchmark == "bfs":
        rp, ci = random_graph(size["vertices"], size["edges"], rng)
        return {"row_ptr": rp, "col_idx": ci}
    if benchmark == "knn":
        return {"ref": rng.standard_normal((size["refs"], size["dim"])),
                "query": rng.standard_normal((size["queries"], size["dim"]))}
    if benchmark == "vecadd":
        return {"a": rng.standard_normal(size["n"]), "b": rng.standard_normal(size["n"])}
    raise ValueError(f"unknown benchmark {benchmark!r}; choose from {BENCHMARKS}")


def verify(benchmark, inputs, size, result) -> bool:
    """Check a result against an in-process oracle that avoids the kernel code path."""
    if benchmark == "matmul":
        ref = inputs["a"] @ inputs["b"]
        return bool(np.allclose(result.reshape(ref.shape), ref, rtol=1e-9,
                                atol=1e-9 * math.sqrt(size["k"])))
    if benchmark == "spmv":
        rp = inputs["row_ptr"]
        rows = np.repeat(np.arange(size["rows"]), np.diff(rp))
        y = np.zeros(size["rows"])
        np.add.at(y, rows, inputs["values"] * inputs["x"][inputs["col_idx"]])
        return bool(np.allclose(result, y, rtol=1e-12, atol=1e-12))
    if benchmark == "bfs":
        ref = kernels.reference_bfs(inputs["row_ptr"].tolist(), inputs["col_idx"].tolist(), 0)
        return bool(np.array_equal(result, np.asarray(ref)))
    if benchmark == "knn":
        idx, dist = result
        k = size["k"]
        ref, q = inputs["ref"], inputs["query"]
        for lo in range(0, q.shape[0], 64):
            d = ((q[lo:lo + 64, None, :] - ref[None, :, :]) ** 2).sum(-1)
            for row in range(d.shape[0]):
                order = np.lexsort((np.arange(d.shape[1]), d[row]))[:k]
                if not np.array_equal(order, idx[lo + row]):
                    return False
                if not np.allclose(d[row, order], dist[lo + row], rtol=1e-12, atol=1e-12):
                    return False
        return True
    if benchmark == "vecadd":
        return bool(np.array_equal(result, inputs["a"] + inputs["b"]))
    raise ValueError(benchmark)


def size_key(benchmark, size, seed):
    return f"{benchmark}|{json.dumps(size, sort_keys=True)}|{seed}"


# -- runs ------------------------------------------------------------------------

@dataclass
class RunReport:
    benchmark: str
    size: dict
    seed: int
    partitions: int
    policy: str
    devices: list
    placement: list
    timing: TimingBreakdown
    verify: str
    end_to_end_ms: float = 0.0
    worker_compute_ms: list = field(default_factory=list)
    speedup: float | None = None
    notes: list = field(default_factory=list)

    def to_dict(self):
        d = {
            "benchmark": self.benchmark,
            "size": self.size,
            "seed": self.seed,
            "partitions": self.partitions,
            "policy": self.policy,
            "devices": self.devices,
            "placement": self.placement,
            "timing": self.timing.to_dict(),
            "end_to_end_ms": self.end_to_end_ms,
            "worker_compute_ms": self.worker_compute_ms,
            "verify": self.verify,
        }
        if self.speedup is not None:
            d["speedup"] = self.speedup
        if self.notes:
            d["notes"] = self.notes
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


class _Run:
    """One benchmark execution against a connected cluster."""

    def __init__(self, ctx: HostContext, clock: PhaseClock, policy: str, partitions: int):
        self.ctx = ctx
        self.clock = clock
        self.policy = policy
        self.partitions = partitions
        self.placement = []
        self.worker_ms = []
        self.modeled_ms = []

    def place(self, kernel_name, args, index):
        """Pick a device for one task; user_directed maps part p to device p."""
        if self.policy == "user_directed":
            placement = Explicit(index)
        else:
            placement = Auto(self.policy)
        task = KernelTask(kernel_name, args, (1,), self.ctx.user_id, self.ctx.shared, placement)
        est = self.ctx.estimate(task) if self.policy == "cost_model" else None
        gid = self.ctx.scheduler.schedule(task, est)
        self.placement.append({"task": f"{kernel_name}[{index}]", "device": gid})
        return gid, task

    def buffer(self, array):
        return self.ctx.create_buffer(np.asarray(array).nbytes)

    def write(self, gid, buf, array):
        q = self.ctx.default_queue(gid)
        self.ctx.enqueue_write_buffer(q, buf, np.ascontiguousarray(array).tobytes())

    def read(self, gid, buf, dtype):
        q = self.ctx.default_queue(gid)
        return np.frombuffer(self.ctx.enqueue_read_buffer(q, buf), dtype=dtype)

    def launch(self, gid, task):
        return self.ctx.run_task(gid, task)

    def compute_stage(self, jobs):
        """Run (gid, task) pairs with one worker thread per device."""
        by_dev: dict[int, list] = {}
        for gid, task in jobs:
            by_dev.setdefault(gid, []).append(task)

        def worker(gid, tasks):
            t0 = time.perf_counter()
            modeled = 0.0
            for t in tasks:
                modeled += self.launch(gid, t).modeled_ms
            return (time.perf_counter() - t0) * 1000, modeled

        with self.clock.phase("compute"):
            out = parallel([lambda g=g, ts=ts: worker(g, ts) for g, ts in by_dev.items()])
        self.worker_ms.extend(w for w, _ in out)
        self.modeled_ms.append(max(m for _, m in out))


def _split(n, parts):
    bounds = np.linspace(0, n, parts + 1).round().astype(int)
    return [(int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:])]


def _run_matmul(run: _Run, inp, size):
    m, k, n = size["m"], size["k"], size["n"]
    a, b = inp["a"], inp["b"]
    parts = _split(m, run.partitions)
    jobs, bufs = [], []
    for p, (lo, hi) in enumerate(parts):
        ba, bb = run.buffer(a[lo:hi]), run.buffer(b)
        bc = run.ctx.create_buffer((hi - lo) * n * 8)
        gid, task = run.place("matmul", [ba, bb, bc, hi - lo, k, n], p)
        jobs.append((gid, task))
        bufs.append((gid, ba, bb, bc, lo, hi))
    with run.clock.phase("transfer"):
        parallel([lambda g=g, ba=ba, bb=bb, lo=lo, hi=hi: (run.write(g, ba, a[lo:hi]), run.write(g, bb, b))
                  for g, ba, bb, _, lo, hi in bufs])
    run.compute_stage(jobs)
    with run.clock.phase("transfer"):
        blocks = parallel([lambda g=g, bc=bc: run.read(g, bc, np.float64) for g, _, _, bc, _, _ in bufs])
    return np.concatenate(blocks).reshape(m, n)


def _run_vecadd(run: _Run, inp, size):
    a, b = inp["a"], inp["b"]
    jobs, bufs = [], []
    for p, (lo, hi) in enumerate(_split(size["n"], run.partitions)):
        ba, bb, bc = run.buffer(a[lo:hi]), run.buffer(b[lo:hi]), run.buffer(a[lo:hi])
        gid, task = run.place("vecadd", [ba, bb, bc], p)
        jobs.append((gid, task))
        bufs.append((gid, ba, bb, bc, lo, hi))
    with run.clock.phase("transfer"):
        parallel([lambda g=g, ba=ba, bb=bb, lo=lo, hi=hi: (run.write(g, ba, a[lo:hi]), run.write(g, bb, b[lo:hi]))
                  for g, ba, bb, _, lo, hi in bufs])
    run.compute_stage(jobs)
    with run.clock.phase("transfer"):
        blocks = parallel([lambda g=g, bc=bc: run.read(g, bc, np.float64) for g, _, _, bc, _, _ in bufs])
    return np.concatenate(blocks)


def _run_spmv(run: _Run, inp, size):
    names = ("hdr", "row_ptr", "col_idx", "values")
    csr = {nm: run.buffer(inp[nm]) for nm in names}
    bx = run.buffer(inp["x"])
    franges = run.ctx.create_buffer((run.partitions + 1) * 8)
    pgid, ptask = run.place("spmv_partition", [*csr.values(), run.partitions, franges], 0)
    # compute placements need the ranges; decide devices now, bind ranges later
    compute_gids = []
    for p in range(run.partitions):
        ys = run.ctx.create_buffer(8)
        gid, _ = run.place("spmv_compute", [*csr.values(), bx, 0, 1, ys], p)
        compute_gids.append(gid)
    needs = {pgid: list(names)}
    for g in compute_gids:
        needs.setdefault(g, list(names))
        if "x" not in needs[g]:
            needs[g].append("x")
    bufs = dict(csr, x=bx)
    with run.clock.phase("transfer"):
        parallel([lambda g=g, nm=nm: [run.write(g, bufs[x], inp[x]) for x in nm] for g, nm in needs.items()])
    run.compute_stage([(pgid, ptask)])
    with run.clock.phase("transfer"):
        ranges = run.read(pgid, franges, np.int64)
    jobs, outs = [], []
    for p, g in enumerate(compute_gids):
        lo, hi = int(ranges[p]), int(ranges[p + 1])
        ys = run.ctx.create_buffer((hi - lo) * 8)
        jobs.append((g, KernelTask("spmv_compute", [*csr.values(), bx, lo, hi, ys], (max(hi - lo, 1),),
                                   run.ctx.user_id, run.ctx.shared, Explicit(g))))
        outs.append((g, ys))
    run.compute_stage(jobs)
    with run.clock.phase("transfer"):
        blocks = parallel([lambda g=g, ys=ys: run.read(g, ys, np.float64) for g, ys in outs])
    return np.concatenate(blocks)


def _run_bfs(run: _Run, inp, size):
    rp, ci = run.buffer(inp["row_ptr"]), run.buffer(inp["col_idx"])
    levels = run.ctx.create_buffer(size["vertices"] * 8)
    gid, task = run.place("bfs", [rp, ci, 0, levels], 0)
    with run.clock.phase("transfer"):
        run.write(gid, rp, inp["row_ptr"])
        run.write(gid, ci, inp["col_idx"])
    run.compute_stage([(gid, task)])
    with run.clock.phase("transfer"):
        return run.read(gid, levels, np.int64)


def _run_knn(run: _Run, inp, size):
    ref, q = inp["ref"], inp["query"]
    dim, k, nq = size["dim"], size["k"], size["queries"]
    jobs, bufs = [], []
    for p, (lo, hi) in enumerate(_split(size["refs"], run.partitions)):
        kk = min(k, hi - lo)
        br, bq = run.buffer(ref[lo:hi]), run.buffer(q)
        bi, bd = run.ctx.create_buffer(nq * kk * 8), run.ctx.create_buffer(nq * kk * 8)
        gid, task = run.place("knn", [br, bq, dim, kk, bi, bd], p)
        jobs.append((gid, task))
        bufs.append((gid, br, bq, bi, bd, lo, hi, kk))
    with run.clock.phase("transfer"):
        parallel([lambda g=g, br=br, bq=bq, lo=lo, hi=hi: (run.write(g, br, ref[lo:hi]), run.write(g, bq, q))
                  for g, br, bq, _, _, lo, hi, _ in bufs])
    run.compute_stage(jobs)
    with run.clock.phase("transfer"):
        parts = parallel([
            lambda g=g, bi=bi, bd=bd, lo=lo, kk=kk: (
                run.read(g, bi, np.int64).reshape(nq, kk) + lo,
                run.read(g, bd, np.float64).reshape(nq, kk),
            )
            for g, _, _, bi, bd, lo, _, kk in bufs
        ])
    return kernels.merge_topk_batch(parts, k)


_RUNNERS = {"matmul": _run_matmul, "spmv": _run_spmv, "bfs": _run_bfs,
            "knn": _run_knn, "vecadd": _run_vecadd}


def run_benchmark(config: ClusterConfig, benchmark: str, size=None, policy="user_directed",
                  partitions=1, seed=0, user_id="bench", baseline_file=None):
    """Execute one benchmark end to end. Returns ``(RunReport, result)``."""
    if benchmark not in _RUNNERS:
        raise ValueError(f"unknown benchmark {benchmark!r}; choose from {BENCHMARKS}")
    size = {**DEFAULT_SIZES[benchmark], **(size or {})}
    notes = []
    if partitions < 1:
        raise ValueError("partition count must be >= 1")
    if partitions > config.device_count:
        raise ConfigError(f"{partitions} partitions but the cluster has {config.device_count} devices")
    if benchmark == "bfs" and partitions > 1:
        notes.append("bfs runs whole on one device; partition count ignored")
        partitions = 1
    clock = PhaseClock()
    with clock.phase("init"):
        ctx = init_cluster(config, user_id=user_id)
    try:
        with clock.phase("init"):
            ctx.create_program("core")
            for e in ctx.device_map:
                ctx.default_queue(e.global_id)
        with clock.phase("data_creation"):
            inputs = make_inputs(benchmark, size, seed)
        run = _Run(ctx, clock, policy, partitions)
        result = _RUNNERS[benchmark](run, inputs, size)
    finally:
        ctx.close()
    timing = clock.timing
    timing.modeled_compute_ms = sum(run.modeled_ms)
    ok = verify(benchmark, inputs, size, result)
    devices = [
        {"global_id": e.global_id, "node": e.node_name, "endpoint": str(e.endpoint),
         "type": str(e.device_type), "relative_throughput": e.model.relative_throughput}
        for e in ctx.device_map
    ]
    report = RunReport(benchmark, size, seed, partitions, policy, devices, run.placement, timing,
                       "pass" if ok else "fail", clock.end_to_end_ms, run.worker_ms, notes=notes)
    if baseline_file is not None:
        attach_speedup(report, baseline_file)
    return report, result


# -- baselines and breakdowns ----------------------------------------------------

def _load_json(path):
    path = Path(path)
    if not path.exists():
        return {}
    return json.loads(path.read_text())


def record_baseline(report: RunReport, path):
    data = _load_json(path)
    data[size_key(report.benchmark, report.size, report.seed)] = {
        "benchmark": report.benchmark,
        "size": report.size,
        "seed": report.seed,
        "timing": report.timing.to_dict(),
        "total_ms": report.timing.total_ms,
    }
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True))


def attach_speedup(report: RunReport, path):
    """Set ``report.speedup`` from a matching baseline, else leave a note."""
    data = _load_json(path)
    entry = data.get(size_key(report.benchmark, report.size, report.seed))
    if entry is not None:
        report.speedup = entry["total_ms"] / report.timing.total_ms
        return
    others = [e for e in data.values() if e["benchmark"] == report.benchmark]
    if others:
        report.notes.append(
            f"baseline for {report.benchmark} exists only for size/seed "
            f"{[(e['size'], e['seed']) for e in others]}; speedup omitted"
        )
    else:
        warnings.warn(f"no baseline recorded for {report.benchmark}; speedup omitted", stacklevel=2)
        report.notes.append(f"no baseline for {report.benchmark}; speedup omitted")


def load_report(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
        timing = data["timing"]
        for ph in PHASES:
            if not isinstance(timing[ph], (int, float)) or timing[ph] < 0:
                raise ValueError(f"bad {ph}")
        return data
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ValueError(f"cannot parse report {path}: {exc}") from None


BREAKDOWN_COLUMNS = (
    ["file", "benchmark", "partitions"]
    + list(PHASES)
    + [p.replace("_ms", "_pct") for p in PHASES]
    + ["total_ms", "transfer_pct_delta", "init_flag"]
)


def breakdown_rows(paths):
    """Per-report phase times and shares, ordered by partition count.

    ``transfer_pct_delta`` is the change in transfer share from the previous
    row; ``init_flag`` marks runs whose init phase exceeds 5% of the total.
    """
    reports = [(str(p), load_report(p)) for p in paths]
    reports.sort(key=lambda r: (r[1]["benchmark"], r[1].get("partitions", 1)))
    rows, prev = [], None
    for path, rep in reports:
        t = rep["timing"]
        total = sum(t[p] for p in PHASES)
        pct = {p: (100.0 * t[p] / total if total else 0.0) for p in PHASES}
        row = {"file": path, "benchmark": rep["benchmark"], "partitions": rep.get("partitions", 1)}
        row.update({p: t[p] for p in PHASES})
        row.update({p.replace("_ms", "_pct"): pct[p] for p in PHASES})
        row["total_ms"] = total
        same = prev is not None and prev["benchmark"] == rep["benchmark"]
        row["transfer_pct_delta"] = pct["transfer_ms"] - prev["transfer_pct"] if same else 0.0
        row["init_flag"] = pct["init_ms"] > INIT_FLAG_PCT
        rows.append(row)
        prev = row
    return rows


def default_baseline_file():
    return os.environ.get("HAOCL_BASELINE_FILE", "haocl_baseline.json")


__all__ = [
    "BENCHMARKS", "DEFAULT_SIZES", "LocalCluster", "PhaseClock", "RunReport", "breakdown_rows",
    "load_config", "local_config", "make_inputs", "parse_config", "record_baseline", "run_benchmark",
    "verify",
]
