from collections import Counter

import numpy as np
import pytest

from haocl.errors import (
    ArgumentError,
    BusyError,
    ConfigError,
    InitError,
    PolicyError,
    ReleasedHandleError,
    SizeError,
    UnknownNameError,
)
from haocl.host import init_cluster
from haocl.scheduler import Auto, KernelTask
from haocl.wire import Kind
from oracles import naive_matmul


@pytest.fixture
def ctx4(inproc_cluster):
    """cpu, gpu, gpu, fpga across four nodes."""
    config, _ = inproc_cluster([[("cpu", 1.0)], [("gpu", 8.0)], [("gpu", 8.0)], [("fpga", 4.0)]])
    ctx = init_cluster(config)
    yield ctx
    ctx.close()


def node_of(ctx, gid):
    return ctx.device_map[gid].node_name


def test_device_ids_and_filters(ctx4):
    assert ctx4.get_device_ids() == [0, 1, 2, 3]
    assert ctx4.get_device_ids("gpu") == [1, 2]
    assert ctx4.get_device_ids("fpga") == [3]
    assert ctx4.timing.init_ms > 0


def test_filter_absent_type(inproc_cluster):
    config, _ = inproc_cluster([[("gpu", 8.0)]])
    with init_cluster(config) as ctx:
        assert ctx.get_device_ids("fpga") == []


def test_multi_device_node_ids(inproc_cluster):
    config, _ = inproc_cluster([[("gpu", 8.0), ("gpu", 8.0)], [("cpu", 1.0)]])
    with init_cluster(config) as ctx:
        assert [(e.global_id, e.node_name, e.local_index) for e in ctx.device_map] == [
            (0, "n0", 0), (1, "n0", 1), (2, "n1", 0)]


def test_init_names_down_node(inproc_cluster):
    config, daemons = inproc_cluster([[("cpu", 1.0)], [("cpu", 1.0)], [("cpu", 1.0)]])
    daemons[1].stop()
    with pytest.raises(InitError) as err:
        init_cluster(config)
    assert err.value.node == "n1"
    assert "n1" in str(err.value)


def test_init_device_mismatch(inproc_cluster):
    config, daemons = inproc_cluster([[("cpu", 1.0)]])
    from dataclasses import replace

    from haocl.config import DeviceModel
    from haocl.wire import DeviceType
    wrong = replace(config, nodes=(replace(config.nodes[0], devices=(DeviceModel(DeviceType.GPU),)),))
    with pytest.raises(ConfigError):
        init_cluster(wrong)


def test_lazy_allocation_once(ctx4):
    buf = ctx4.create_buffer(16)
    assert ctx4.calls() == []
    q = ctx4.create_queue(2)
    ctx4.enqueue_write_buffer(q, buf, bytes(range(16)))
    ctx4.enqueue_write_buffer(q, buf, bytes(16))
    allocs = ctx4.calls("create_buffer")
    assert len(allocs) == 1 and allocs[0].node == node_of(ctx4, 2)


def test_write_read_identity(ctx4):
    q = ctx4.create_queue(0)
    buf = ctx4.create_buffer(10)
    ctx4.enqueue_write_buffer(q, buf, b"0123456789")
    assert ctx4.enqueue_read_buffer(q, buf) == b"0123456789"


def test_oversize_write_sends_nothing(ctx4):
    q = ctx4.create_queue(0)
    before = len(ctx4.trace)
    with pytest.raises(SizeError):
        ctx4.enqueue_write_buffer(q, ctx4.create_buffer(10), bytes(11))
    assert len(ctx4.trace) == before


def test_zero_size_buffer(ctx4):
    q = ctx4.create_queue(1)
    buf = ctx4.create_buffer(0)
    ctx4.enqueue_write_buffer(q, buf, b"")
    assert ctx4.enqueue_read_buffer(q, buf) == b""


def test_unwritten_buffer_reads_zero(ctx4):
    q = ctx4.create_queue(0)
    assert ctx4.enqueue_read_buffer(q, ctx4.create_buffer(8)) == bytes(8)


def test_migration_read_then_write(ctx4):
    qa, qb = ctx4.create_queue(0), ctx4.create_queue(1)
    a, b, c = (ctx4.create_buffer(16) for _ in range(3))
    ctx4.enqueue_write_buffer(qa, a, np.array([1.0, 2.0]).tobytes())
    ctx4.enqueue_write_buffer(qb, b, np.array([10.0, 20.0]).tobytes())
    prog = ctx4.create_program("core")
    k = ctx4.create_kernel(prog, "vecadd")
    for i, v in enumerate((a, b, c)):
        ctx4.set_kernel_arg(k, i, v)
    mark = len(ctx4.trace)
    ctx4.enqueue_ndrange_kernel(qb, k, (2,))
    moves = [(t.node, t.function or t.kind.name) for t in ctx4.trace[mark:]
             if a.id in t.buffer_ids]
    n0, n1 = node_of(ctx4, 0), node_of(ctx4, 1)
    assert moves[0] == (n0, "enqueue_read_buffer")
    assert (n1, "enqueue_write_buffer") in moves
    assert moves.index((n1, "enqueue_write_buffer")) > 0
    assert np.frombuffer(ctx4.enqueue_read_buffer(qa, c)).tolist() == [11.0, 22.0]


def test_launch_forwarded_exactly_once(ctx4):
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 5))
    q = ctx4.create_queue(0)
    ba, bb, bc = ctx4.create_buffer(96), ctx4.create_buffer(120), ctx4.create_buffer(160)
    ctx4.enqueue_write_buffer(q, ba, a.tobytes())
    ctx4.enqueue_write_buffer(q, bb, b.tobytes())
    k = ctx4.create_kernel(ctx4.create_program("core"), "matmul")
    for i, v in enumerate((ba, bb, bc, 4, 3, 5)):
        ctx4.set_kernel_arg(k, i, v)
    ctx4.enqueue_ndrange_kernel(q, k, (4, 5))
    launches = ctx4.calls("enqueue_ndrange_kernel")
    assert [t.node for t in launches] == [node_of(ctx4, 0)]
    got = np.frombuffer(ctx4.enqueue_read_buffer(q, bc)).reshape(4, 5)
    assert np.array_equal(got, naive_matmul(a.tolist(), b.tolist()))


def test_registry_names(ctx4):
    prog = ctx4.create_program("core")
    assert ctx4.create_kernel(prog, "matmul").name == "matmul"
    with pytest.raises(UnknownNameError) as err:
        ctx4.create_kernel(prog, "cfd")
    assert "matmul" in err.value.available
    with pytest.raises(UnknownNameError):
        ctx4.create_program("nope")


def test_argument_errors_send_nothing(ctx4):
    q = ctx4.create_queue(0)
    k = ctx4.create_kernel(ctx4.create_program("core"), "vecadd")
    ctx4.set_kernel_arg(k, 0, ctx4.create_buffer(8))
    ctx4.set_kernel_arg(k, 1, ctx4.create_buffer(8))
    before = len(ctx4.calls())
    with pytest.raises(ArgumentError):
        ctx4.enqueue_ndrange_kernel(q, k)
    ctx4.set_kernel_arg(k, 99, 1)
    with pytest.raises(ArgumentError):
        ctx4.enqueue_ndrange_kernel(q, k)
    assert len(ctx4.calls()) == before


def test_released_handles(ctx4):
    q = ctx4.create_queue(0)
    buf = ctx4.create_buffer(8)
    ctx4.enqueue_write_buffer(q, buf, bytes(8))
    ctx4.release(buf)
    assert len(ctx4.calls("release_buffer")) == 1
    with pytest.raises(ReleasedHandleError):
        ctx4.enqueue_read_buffer(q, buf)
    with pytest.raises(ReleasedHandleError):
        ctx4.release(buf)
    k = ctx4.create_kernel(ctx4.create_program("core"), "vecadd")
    ctx4.release(k)
    with pytest.raises(ReleasedHandleError):
        ctx4.enqueue_ndrange_kernel(q, k)


def test_submit_round_robin_balance(ctx4):
    chosen = []
    for _ in range(12):
        bufs = [ctx4.create_buffer(8) for _ in range(3)]
        gid, _ = ctx4.submit_task(KernelTask("vecadd", bufs, (1,), "u", True, Auto("round_robin")))
        chosen.append(gid)
    assert Counter(chosen) == {0: 3, 1: 3, 2: 3, 3: 3}


def test_submit_user_directed_needs_explicit(ctx4):
    bufs = [ctx4.create_buffer(8) for _ in range(3)]
    with pytest.raises(PolicyError):
        ctx4.submit_task(KernelTask("vecadd", bufs, (1,), "u", True, Auto("user_directed")))
    with pytest.raises(PolicyError):
        ctx4.submit_task(KernelTask("vecadd", bufs, (1,), "u", True, Auto("fastest")))


def test_submit_cost_model_prefers_gpu(inproc_cluster):
    config, _ = inproc_cluster([[("cpu", 1.0)], [("gpu", 8.0)]])
    with init_cluster(config) as ctx:
        n = 256
        bufs = [ctx.create_buffer(n * n * 8) for _ in range(3)]
        gid, _ = ctx.submit_task(KernelTask("matmul", bufs + [n, n, n], (n, n), "u", True,
                                            Auto("cost_model")))
        assert gid == 1


def test_finish_fragment(ctx4):
    q = ctx4.create_queue(0)
    assert ctx4.finish(q).total_ms == 0
    bufs = [ctx4.create_buffer(8 * 1000) for _ in range(3)]
    for b in bufs:
        ctx4.enqueue_write_buffer(q, b, np.ones(1000).tobytes())
    k = ctx4.create_kernel(ctx4.create_program("core"), "vecadd")
    for i, b in enumerate(bufs):
        ctx4.set_kernel_arg(k, i, b)
    ctx4.enqueue_ndrange_kernel(q, k)
    frag = ctx4.finish(q)
    assert frag.transfer_ms > 0 and frag.compute_ms > 0
    assert ctx4.finish(q).total_ms == 0


def test_buffer_coherence_matches_single_device(inproc_cluster):
    """A write/launch/migrate sequence over 3 nodes reads back like one device."""
    def program(ctx, gids):
        rng = np.random.default_rng(9)
        x, y = rng.standard_normal(50), rng.standard_normal(50)
        qs = [ctx.create_queue(g) for g in gids]
        bx, by, bz, bw = (ctx.create_buffer(400) for _ in range(4))
        ctx.enqueue_write_buffer(qs[0], bx, x.tobytes())
        ctx.enqueue_write_buffer(qs[1], by, y.tobytes())
        prog = ctx.create_program("core")
        k = ctx.create_kernel(prog, "vecadd")
        for i, b in enumerate((bx, by, bz)):
            ctx.set_kernel_arg(k, i, b)
        ctx.enqueue_ndrange_kernel(qs[2], k)
        for i, b in enumerate((bz, bx, bw)):
            ctx.set_kernel_arg(k, i, b)
        ctx.enqueue_ndrange_kernel(qs[0], k)
        ctx.enqueue_write_buffer(qs[1], bx, np.zeros(10).tobytes())  # partial overwrite
        return [ctx.enqueue_read_buffer(qs[1], b) for b in (bx, bz, bw)]

    config, _ = inproc_cluster([[("cpu", 1.0)], [("cpu", 1.0)], [("cpu", 1.0)]])
    with init_cluster(config) as ctx:
        spread = program(ctx, [0, 1, 2])
    config1, _ = inproc_cluster([[("cpu", 1.0)]])
    with init_cluster(config1) as ctx:
        single = program(ctx, [0, 0, 0])
    assert spread == single


def test_busy_error_for_exclusive_device(inproc_cluster):
    config, _ = inproc_cluster([[("gpu", 8.0)]])
    alice = init_cluster(config, user_id="alice", shared=False)
    bob = init_cluster(config, user_id="bob", shared=True)
    try:
        args = lambda c: [c.create_buffer(8) for _ in range(3)]  # noqa: E731
        qa = alice.create_queue(0)
        k = alice.create_kernel(alice.create_program("core"), "vecadd")
        for i, b in enumerate(args(alice)):
            alice.set_kernel_arg(k, i, b)
        alice.enqueue_ndrange_kernel(qa, k)
        qb = bob.create_queue(0)
        kb = bob.create_kernel(bob.create_program("core"), "vecadd")
        for i, b in enumerate(args(bob)):
            bob.set_kernel_arg(kb, i, b)
        with pytest.raises(BusyError):
            bob.enqueue_ndrange_kernel(qb, kb)
        alice.release(qa)
        bob.enqueue_ndrange_kernel(qb, kb)
    finally:
        alice.close()
        bob.close()


def test_trace_records_kinds(ctx4):
    q = ctx4.create_queue(3)
    ctx4.enqueue_write_buffer(q, ctx4.create_buffer(4), b"abcd")
    kinds = [t.kind for t in ctx4.trace]
    assert Kind.DATA_TRANSFER in kinds and Kind.API_CALL_REQUEST in kinds
