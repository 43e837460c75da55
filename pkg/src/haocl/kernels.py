"""Built-in compute kernels and their registry.

Kernels are pure functions over numpy arrays. Buffers travel as raw bytes:
float64 arrays row-major, every integer array int64 (big-endian on the wire
is only for frame headers; buffer payloads are little-endian ``<f8``/``<i8``
so that they can be viewed without copying).

A CSR matrix is four buffers: ``hdr = [rows, cols]``, ``row_ptr``,
``col_idx``, ``values``.
"""

from __future__ import annotations

import heapq
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError, KernelArgumentError, UnknownNameError
from .wire import Direction

F64 = np.dtype("<f8")
I64 = np.dtype("<i8")


@dataclass(frozen=True)
class ArgSpec:
    name: str
    kind: str  # "buffer" or a scalar tag: "i64", "f64"
    direction: Direction | None = None
    dtype: np.dtype | None = None

    @property
    def is_buffer(self):
        return self.kind == "buffer"


def _in(name, dtype=F64):
    return ArgSpec(name, "buffer", Direction.IN, np.dtype(dtype))


def _out(name, dtype=F64):
    return ArgSpec(name, "buffer", Direction.OUT, np.dtype(dtype))


def _scalar(name, kind="i64"):
    return ArgSpec(name, kind)


@dataclass(frozen=True)
class KernelSignature:
    name: str
    args: tuple
    work: str  # identifier of the work-unit formula
    fn: Callable

    @property
    def arity(self):
        return len(self.args)


# -- matmul -------------------------------------------------------------------

def matmul(a, b, m, k, n):
    """``C = A @ B`` with each entry summed over k in ascending order.

    Row-block partitions are bit-exact against the full product because every
    entry is accumulated independently in the same order.
    """
    if min(m, k, n) < 1:
        raise KernelArgumentError("matmul dimensions must be >= 1")
    if a.size != m * k or b.size != k * n:
        raise KernelArgumentError(
            f"matmul buffers hold {a.size} and {b.size} values, expected {m * k} and {k * n}"
        )
    a = a.reshape(m, k)
    b = b.reshape(k, n)
    c = np.zeros((m, n), dtype=np.float64)
    tmp = np.empty((m, n), dtype=np.float64)
    for kk in range(k):
        np.multiply(a[:, kk, None], b[kk], out=tmp)
        np.add(c, tmp, out=c)
    return c.reshape(-1)


# -- sparse -------------------------------------------------------------------

def check_csr(hdr, row_ptr, col_idx, values):
    if hdr.size != 2:
        raise KernelArgumentError("CSR header must hold [rows, cols]")
    rows, cols = int(hdr[0]), int(hdr[1])
    if rows < 0 or cols < 0 or row_ptr.size != rows + 1:
        raise KernelArgumentError(f"row_ptr has {row_ptr.size} entries, expected {rows + 1}")
    nnz = int(row_ptr[-1]) if rows >= 0 else 0
    if row_ptr[0] != 0 or np.any(np.diff(row_ptr) < 0):
        raise KernelArgumentError("row_ptr must start at 0 and be nondecreasing")
    if col_idx.size != nnz or values.size != nnz:
        raise KernelArgumentError("col_idx/values length must equal row_ptr[rows]")
    if nnz and (col_idx.min() < 0 or col_idx.max() >= cols):
        raise KernelArgumentError("col_idx entry out of range")
    return rows, cols


def spmv_partition(hdr, row_ptr, col_idx, values, parts):
    """Split rows into ``parts`` contiguous ranges with roughly equal nnz.

    Greedy sweep: part p keeps taking rows while its nnz is below
    ceil(nnz / parts), but always leaves at least one row for every
    remaining part. Returns ``parts + 1`` boundaries.
    """
    rows, _ = check_csr(hdr, row_ptr, col_idx, values)
    if parts < 1 or parts > rows:
        raise KernelArgumentError(f"part count {parts} must be in [1, {rows}]")
    nnz = int(row_ptr[rows])
    target = -(-nnz // parts)
    ranges = [0]
    row = 0
    for p in range(parts - 1):
        start = row
        row += 1  # each part owns at least one row
        limit = rows - (parts - p - 1)
        while row < limit and row_ptr[row] - row_ptr[start] < target:
            row += 1
        ranges.append(row)
    ranges.append(rows)
    return np.asarray(ranges, dtype=np.int64)


def spmv_compute(hdr, row_ptr, col_idx, values, x, lo, hi):
    """``y[lo:hi]`` of ``A @ x``, each row summed in storage order."""
    rows, cols = check_csr(hdr, row_ptr, col_idx, values)
    if not 0 <= lo <= hi <= rows:
        raise KernelArgumentError(f"row range [{lo}, {hi}) outside [0, {rows}]")
    if x.size != cols:
        raise KernelArgumentError(f"x has {x.size} entries, expected {cols}")
    n = hi - lo
    y = np.zeros(n, dtype=np.float64)
    if n == 0:
        return y
    start, stop = int(row_ptr[lo]), int(row_ptr[hi])
    prods = values[start:stop] * x[col_idx[start:stop]]
    lens = np.diff(row_ptr[lo:hi + 1])
    # column-wise sweep over the j-th entry of every row keeps per-row order
    offs = row_ptr[lo:hi] - start
    for j in range(int(lens.max()) if n else 0):
        live = lens > j
        y[live] += prods[offs[live] + j]
    return y


# -- graph --------------------------------------------------------------------

def bfs(row_ptr, col_idx, source):
    """Level-synchronous BFS; unreachable vertices get -1."""
    nv = row_ptr.size - 1
    if not 0 <= source < nv:
        raise KernelArgumentError(f"source {source} outside [0, {nv})")
    levels = np.full(nv, -1, dtype=np.int64)
    levels[source] = 0
    frontier = np.array([source], dtype=np.int64)
    depth = 0
    while frontier.size:
        depth += 1
        starts, stops = row_ptr[frontier], row_ptr[frontier + 1]
        counts = stops - starts
        if counts.sum() == 0:
            break
        # gather all neighbours of the frontier in one shot
        idx = np.repeat(starts - np.cumsum(counts) + counts, counts) + np.arange(counts.sum())
        nbrs = col_idx[idx]
        nbrs = np.unique(nbrs[levels[nbrs] < 0])
        levels[nbrs] = depth
        frontier = nbrs
    return levels


def reference_bfs(row_ptr, col_idx, source):
    """Queue-based BFS used as an oracle."""
    nv = len(row_ptr) - 1
    levels = [-1] * nv
    levels[source] = 0
    q = deque([source])
    while q:
        u = q.popleft()
        for e in range(row_ptr[u], row_ptr[u + 1]):
            v = col_idx[e]
            if levels[v] < 0:
                levels[v] = levels[u] + 1
                q.append(v)
    return levels


# -- kNN ----------------------------------------------------------------------

def knn(ref, query, dim, k):
    """k nearest references per query by squared Euclidean distance.

    Ordered by (distance, reference index). Returns ``(idx, dist)`` as flat
    Q*k arrays.
    """
    if dim < 1 or ref.size % dim or query.size % dim:
        raise KernelArgumentError(f"buffer sizes are not multiples of dim={dim}")
    ref = ref.reshape(-1, dim)
    query = query.reshape(-1, dim)
    r = ref.shape[0]
    if not 1 <= k <= r:
        raise KernelArgumentError(f"k={k} must be in [1, {r}]")
    q = query.shape[0]
    out_idx = np.empty((q, k), dtype=np.int64)
    out_dist = np.empty((q, k), dtype=np.float64)
    block = max(1, (1 << 22) // r)
    for lo in range(0, q, block):
        hi = min(q, lo + block)
        # explicit difference keeps distances exact for identical points
        d = np.zeros((hi - lo, r), dtype=np.float64)
        for j in range(dim):
            diff = query[lo:hi, j, None] - ref[None, :, j]
            d += diff * diff
        kth = np.partition(d, k - 1, axis=1)[:, k - 1]
        for row in range(hi - lo):
            # every tie with the k-th distance is a candidate
            cand = np.flatnonzero(d[row] <= kth[row])
            order = cand[np.argsort(d[row, cand], kind="stable")[:k]]
            out_idx[lo + row] = order
            out_dist[lo + row] = d[row, order]
    return out_idx.reshape(-1), out_dist.reshape(-1)


def merge_topk(partials, k):
    """Merge per-partition top-k lists for one query into the global top-k.

    ``partials`` is a list of ``(idx, dist)`` sequences, each sorted by
    (dist, idx) with globally valid indices.
    """
    for idx, dist in partials:
        keys = list(zip(dist, idx))
        if keys != sorted(keys):
            raise ContractError("partial top-k list is not sorted by (distance, index)")
    streams = [zip(dist, idx) for idx, dist in partials]
    merged = list(heapq.merge(*streams))[:k]
    return [int(i) for _, i in merged], [float(d) for d, _ in merged]


def merge_topk_batch(partials, k):
    """Vectorised :func:`merge_topk` over all queries.

    ``partials`` holds ``(idx, dist)`` pairs of shape (Q, k_p) per partition.
    """
    idx = np.concatenate([np.asarray(p[0]).reshape(len(p[0]), -1) for p in partials], axis=1)
    dist = np.concatenate([np.asarray(p[1]).reshape(len(p[1]), -1) for p in partials], axis=1)
    order = np.lexsort((idx, dist), axis=-1)[:, :k]
    return np.take_along_axis(idx, order, 1), np.take_along_axis(dist, order, 1)


# -- misc ---------------------------------------------------------------------

def vecadd(a, b):
    if a.size != b.size:
        raise KernelArgumentError(f"vecadd lengths differ: {a.size} vs {b.size}")
    return a + b


def sleep_kernel(ms):
    time.sleep(ms / 1000.0)
    return np.zeros(1, dtype=np.int64)


# -- registry -----------------------------------------------------------------

CSR_ARGS = (_in("hdr", I64), _in("row_ptr", I64), _in("col_idx", I64), _in("values"))

_SIGNATURES = [
    KernelSignature(
        "matmul",
        (_in("a"), _in("b"), _out("c"), _scalar("m"), _scalar("k"), _scalar("n")),
        "2mnk",
        lambda a, b, m, k, n: (matmul(a, b, m, k, n),),
    ),
    KernelSignature(
        "spmv_partition",
        CSR_ARGS + (_scalar("parts"), _out("ranges", I64)),
        "partition",
        lambda hdr, rp, ci, v, parts: (spmv_partition(hdr, rp, ci, v, parts),),
    ),
    KernelSignature(
        "spmv_compute",
        CSR_ARGS + (_in("x"), _scalar("lo"), _scalar("hi"), _out("y")),
        "2nnz",
        lambda hdr, rp, ci, v, x, lo, hi: (spmv_compute(hdr, rp, ci, v, x, lo, hi),),
    ),
    KernelSignature(
        "bfs",
        (_in("row_ptr", I64), _in("col_idx", I64), _scalar("source"), _out("levels", I64)),
        "edges",
        lambda rp, ci, src: (bfs(rp, ci, src),),
    ),
    KernelSignature(
        "knn",
        (_in("ref"), _in("query"), _scalar("dim"), _scalar("k"), _out("idx", I64), _out("dist")),
        "dqr",
        lambda ref, q, dim, k: knn(ref, q, dim, k),
    ),
    KernelSignature(
        "vecadd",
        (_in("a"), _in("b"), _out("c")),
        "n",
        lambda a, b: (vecadd(a, b),),
    ),
]

_DIAG = [
    KernelSignature("sleep", (_scalar("ms"), _out("done", I64)), "ms", lambda ms: (sleep_kernel(ms),)),
]

BUNDLES = {
    "core": {s.name: s for s in _SIGNATURES},
    "diag": {s.name: s for s in _DIAG},
}


def bundle_kernels(bundle: str) -> list[str]:
    try:
        return sorted(BUNDLES[bundle])
    except KeyError:
        raise UnknownNameError(
            f"unknown program bundle {bundle!r}; available: {sorted(BUNDLES)}", sorted(BUNDLES)
        ) from None


def lookup(bundle: str, name: str) -> KernelSignature:
    names = bundle_kernels(bundle)
    try:
        return BUNDLES[bundle][name]
    except KeyError:
        raise UnknownNameError(
            f"unknown kernel {name!r} in bundle {bundle!r}; available: {names}", names
        ) from None


def find(name: str) -> KernelSignature:
    for kernels in BUNDLES.values():
        if name in kernels:
            return kernels[name]
    raise UnknownNameError(f"unknown kernel {name!r}")


def work_units(sig: KernelSignature, inputs: dict, scalars: dict) -> float:
    """Work estimate for one execution (floating-point operations or edges)."""
    w = sig.work
    if w == "2mnk":
        return 2.0 * scalars["m"] * scalars["n"] * scalars["k"]
    if w == "2nnz":
        rp = inputs["row_ptr"]
        return 2.0 * float(rp[scalars["hi"]] - rp[scalars["lo"]])
    if w == "partition":
        return float(inputs["row_ptr"].size)
    if w == "edges":
        return float(inputs["col_idx"].size)
    if w == "dqr":
        dim = scalars["dim"]
        return float(dim * (inputs["ref"].size // dim) * (inputs["query"].size // dim))
    if w == "n":
        return float(inputs["a"].size)
    if w == "ms":
        return float(scalars["ms"])
    raise ContractError(f"unknown work formula {w!r}")


def run(sig: KernelSignature, inputs: dict, scalars: dict) -> tuple[dict, float]:
    """Execute a kernel given named input arrays and scalar values.

    Returns ``(outputs by arg name, work_units)``.
    """
    call_args = []
    for a in sig.args:
        if a.is_buffer:
            if a.direction != Direction.OUT:
                call_args.append(inputs[a.name])
        else:
            call_args.append(scalars[a.name])
    results = sig.fn(*call_args)
    outs = [a for a in sig.args if a.is_buffer and a.direction == Direction.OUT]
    outputs = {a.name: np.ascontiguousarray(r, dtype=a.dtype) for a, r in zip(outs, results)}
    return outputs, work_units(sig, inputs, scalars)
