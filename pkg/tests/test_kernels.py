import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from haocl import kernels
from haocl.errors import ContractError, KernelArgumentError, UnknownNameError
from oracles import csr_to_dense, full_sort_knn, gnm_graph, naive_matmul, queue_bfs, random_csr


def hdr(rows, cols):
    return np.array([rows, cols], dtype=np.int64)


# -- matmul -------------------------------------------------------------------

def test_matmul_identity():
    b = np.array([1.5, -2.0, 3.25, 4.0])
    assert np.array_equal(kernels.matmul(np.eye(2).ravel(), b, 2, 2, 2), b)


def test_matmul_scalar():
    assert kernels.matmul(np.array([2.0]), np.array([3.0]), 1, 1, 1).tolist() == [6.0]


@pytest.mark.parametrize("seed", range(3))
def test_matmul_equals_naive_bitwise(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((16, 16)), rng.standard_normal((16, 16))
    got = kernels.matmul(a.ravel(), b.ravel(), 16, 16, 16).reshape(16, 16)
    assert np.array_equal(got, naive_matmul(a.tolist(), b.tolist()))


def test_matmul_row_blocks_bit_exact():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((37, 23)), rng.standard_normal((23, 11))
    full = kernels.matmul(a.ravel(), b.ravel(), 37, 23, 11)
    parts = [kernels.matmul(a[lo:hi].ravel(), b.ravel(), hi - lo, 23, 11)
             for lo, hi in [(0, 5), (5, 20), (20, 37)]]
    assert np.array_equal(np.concatenate(parts), full)


def test_matmul_size_mismatch():
    with pytest.raises(KernelArgumentError):
        kernels.matmul(np.zeros(3), np.zeros(4), 2, 2, 2)


# -- spmv ---------------------------------------------------------------------

def test_partition_single_part():
    rp = np.array([0, 1, 3, 3], dtype=np.int64)
    out = kernels.spmv_partition(hdr(3, 3), rp, np.zeros(3, np.int64), np.ones(3), 1)
    assert out.tolist() == [0, 3]


def test_partition_uniform():
    rp = np.arange(0, 18, 2, dtype=np.int64)
    out = kernels.spmv_partition(hdr(8, 8), rp, np.zeros(16, np.int64), np.ones(16), 4)
    assert out.tolist() == [0, 2, 4, 6, 8]


def test_partition_too_many_parts():
    rp = np.array([0, 1, 2], dtype=np.int64)
    with pytest.raises(KernelArgumentError):
        kernels.spmv_partition(hdr(2, 2), rp, np.zeros(2, np.int64), np.ones(2), 3)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 12), min_size=1, max_size=40), st.data())
def test_partition_greedy_bound(row_nnz, data):
    rows = len(row_nnz)
    parts = data.draw(st.integers(1, rows))
    rp = np.concatenate([[0], np.cumsum(row_nnz)]).astype(np.int64)
    nnz = int(rp[-1])
    out = kernels.spmv_partition(hdr(rows, 1), rp, np.zeros(nnz, np.int64), np.ones(nnz), parts)
    assert out[0] == 0 and out[-1] == rows and len(out) == parts + 1
    assert all(hi > lo for lo, hi in zip(out[:-1], out[1:]))
    per_part = [int(rp[hi] - rp[lo]) for lo, hi in zip(out[:-1], out[1:])]
    assert max(per_part) <= -(-nnz // parts) + max(row_nnz)


def test_spmv_identity():
    n = 6
    rp = np.arange(n + 1, dtype=np.int64)
    x = np.arange(n, dtype=float) * 1.5
    y = kernels.spmv_compute(hdr(n, n), rp, np.arange(n, dtype=np.int64), np.ones(n), x, 0, n)
    assert np.array_equal(y, x)


def test_spmv_matches_dense():
    rng = np.random.default_rng(1)
    rp, ci, vals = random_csr(rng, 100, 100, 0.1)
    x = rng.standard_normal(100)
    y = kernels.spmv_compute(hdr(100, 100), rp, ci, vals, x, 0, 100)
    ref = csr_to_dense(100, 100, rp, ci, vals) @ x
    assert np.max(np.abs(y - ref) / np.maximum(np.abs(ref), 1e-300)) <= 1e-12


def test_spmv_empty_range():
    rp = np.array([0, 1, 2], dtype=np.int64)
    args = (hdr(2, 2), rp, np.array([0, 1]), np.ones(2), np.ones(2), 1, 1)
    assert kernels.spmv_compute(*args).size == 0
    sig = kernels.find("spmv_compute")
    inputs = dict(zip(["hdr", "row_ptr", "col_idx", "values", "x"], args[:5]))
    assert kernels.work_units(sig, inputs, {"lo": 1, "hi": 1}) == 0


def test_spmv_partition_slices_bit_exact():
    rng = np.random.default_rng(2)
    rp, ci, vals = random_csr(rng, 300, 200, 0.05)
    x = rng.standard_normal(200)
    h = hdr(300, 200)
    full = kernels.spmv_compute(h, rp, ci, vals, x, 0, 300)
    ranges = kernels.spmv_partition(h, rp, ci, vals, 7)
    parts = [kernels.spmv_compute(h, rp, ci, vals, x, int(lo), int(hi))
             for lo, hi in zip(ranges[:-1], ranges[1:])]
    assert np.array_equal(np.concatenate(parts), full)


def test_spmv_bad_range():
    rp = np.array([0, 1], dtype=np.int64)
    with pytest.raises(KernelArgumentError):
        kernels.spmv_compute(hdr(1, 1), rp, np.zeros(1, np.int64), np.ones(1), np.ones(1), 0, 2)


# -- bfs ----------------------------------------------------------------------

def test_bfs_path():
    rp = np.array([0, 1, 3, 4], dtype=np.int64)
    ci = np.array([1, 0, 2, 1], dtype=np.int64)
    assert kernels.bfs(rp, ci, 0).tolist() == [0, 1, 2]


def test_bfs_two_components():
    rp = np.array([0, 1, 2, 3, 4], dtype=np.int64)
    ci = np.array([1, 0, 3, 2], dtype=np.int64)
    assert kernels.bfs(rp, ci, 0).tolist() == [0, 1, -1, -1]


@pytest.mark.parametrize("source", [0, 17, 999])
def test_bfs_random_graph(source):
    adj, rp, ci = gnm_graph(np.random.default_rng(3), 1000, 10_000)
    assert kernels.bfs(rp, ci, source).tolist() == queue_bfs(adj, source)


def test_bfs_bad_source():
    with pytest.raises(KernelArgumentError):
        kernels.bfs(np.array([0, 0], dtype=np.int64), np.zeros(0, np.int64), 1)


# -- knn ----------------------------------------------------------------------

def test_knn_exact_match():
    rng = np.random.default_rng(4)
    ref = rng.standard_normal((10, 3))
    idx, dist = kernels.knn(ref.ravel(), ref[3].copy(), 3, 1)
    assert idx.tolist() == [3] and dist.tolist() == [0.0]


def test_knn_tie_smaller_index_first():
    ref = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
    idx, _ = kernels.knn(ref.ravel(), np.zeros(2), 2, 2)
    assert idx.tolist() == [0, 1]


def test_knn_full_sort_oracle():
    rng = np.random.default_rng(6)
    ref, q = rng.standard_normal((200, 8)), rng.standard_normal((20, 8))
    idx, dist = kernels.knn(ref.ravel(), q.ravel(), 8, 5)
    oi, od = full_sort_knn(ref.tolist(), q.tolist(), 5)
    assert np.array_equal(idx.reshape(20, 5), oi)
    assert np.array_equal(dist.reshape(20, 5), od)


def test_knn_k_too_large():
    with pytest.raises(KernelArgumentError):
        kernels.knn(np.zeros(4), np.zeros(2), 2, 3)


def test_merge_single_partial_truncates():
    assert kernels.merge_topk([([4, 2, 9], [0.1, 0.2, 0.3])], 2) == ([4, 2], [0.1, 0.2])


def test_merge_unsorted_partial():
    with pytest.raises(ContractError):
        kernels.merge_topk([([1, 2], [0.5, 0.1])], 2)


def _partitioned_knn(ref, q, dim, k, bounds):
    nq = q.shape[0]
    parts = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        kk = min(k, hi - lo)
        i, d = kernels.knn(ref[lo:hi].ravel(), q.ravel(), dim, kk)
        parts.append((i.reshape(nq, kk) + lo, d.reshape(nq, kk)))
    return parts


def test_merge_two_partitions_equals_union():
    rng = np.random.default_rng(7)
    ref, q = rng.standard_normal((150, 4)), rng.standard_normal((12, 4))
    full_i, full_d = kernels.knn(ref.ravel(), q.ravel(), 4, 6)
    parts = _partitioned_knn(ref, q, 4, 6, [0, 70, 150])
    for row in range(12):
        got = kernels.merge_topk([(p[0][row], p[1][row]) for p in parts], 6)
        assert got[0] == full_i.reshape(12, 6)[row].tolist()
        assert got[1] == full_d.reshape(12, 6)[row].tolist()
    mi, md = kernels.merge_topk_batch(parts, 6)
    assert np.array_equal(mi, full_i.reshape(12, 6)) and np.array_equal(md, full_d.reshape(12, 6))


def test_merge_ties_across_partitions():
    # integer grid with many equal distances that straddle the partition cut
    ref = np.array([[x, y] for x in range(-3, 4) for y in range(-3, 4)], dtype=float)
    ref = np.concatenate([ref[::-1], ref])  # duplicates in both halves
    q = np.array([[0.0, 0.0], [0.5, 0.5]])
    oi, od = full_sort_knn(ref.tolist(), q.tolist(), 9)
    parts = _partitioned_knn(ref, q, 2, 9, [0, 49, 98])
    mi, md = kernels.merge_topk_batch(parts, 9)
    assert np.array_equal(mi, oi) and np.array_equal(md, od)


# -- vecadd and registry --------------------------------------------------------

def test_vecadd():
    assert kernels.vecadd(np.array([1.0, 2.0]), np.array([3.0, 4.0])).tolist() == [4.0, 6.0]
    assert not kernels.vecadd(np.zeros(5), np.zeros(5)).any()
    rng = np.random.default_rng(8)
    a, b = rng.standard_normal(100_000), rng.standard_normal(100_000)
    c = kernels.vecadd(a, b)
    assert all(c[i] == a[i] + b[i] for i in range(0, 100_000, 997))
    with pytest.raises(KernelArgumentError):
        kernels.vecadd(np.zeros(2), np.zeros(3))


def test_core_bundle_lists_kernel_set():
    assert set(kernels.bundle_kernels("core")) == {
        "matmul", "spmv_partition", "spmv_compute", "bfs", "knn", "vecadd"}
    with pytest.raises(UnknownNameError):
        kernels.bundle_kernels("nope")


def test_work_units():
    sig = kernels.find("matmul")
    outs, work = kernels.run(sig, {"a": np.ones(6), "b": np.ones(12)}, {"m": 2, "k": 3, "n": 4})
    assert work == 2 * 2 * 3 * 4
    assert outs["c"].tolist() == [3.0] * 8
    sig = kernels.find("knn")
    _, work = kernels.run(sig, {"ref": np.zeros(30), "query": np.zeros(6)}, {"dim": 3, "k": 2})
    assert work == 3 * 10 * 2
