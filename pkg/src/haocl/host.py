"""Host-side OpenCL-like API.

Every operation that touches a device is packaged as an ApiCallRequest and
forwarded to the node owning that device. Platform and device queries are
answered from the device map built at :func:`init_cluster`.

Buffers are placed lazily: a buffer is allocated on a node the first time a
queue on that node touches it. When a kernel on one node needs a buffer whose
current contents live on another node, the host reads it back from the owner
and writes it to the new node.
"""

from __future__ import annotations

import itertools
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional

from . import kernels
from .comm import Channel, Endpoint, broadcast, connect
from .config import ClusterConfig, DeviceModel
from .errors import (
    AggregateError,
    ArgumentError,
    ConfigError,
    HaoclError,
    InitError,
    PolicyError,
    ReleasedHandleError,
    RemoteError,
    SizeError,
    UnknownNameError,
)
from .scheduler import Auto, ClusterState, Explicit, KernelTask, Scheduler, TaskEstimate
from .wire import (
    DEFAULT_CHUNK_SIZE,
    DeviceType,
    Direction,
    Kind,
    Message,
    TypedValue,
    api_call,
    chunk_buffer,
    pack_global_size,
)

# Operations the wrapper forwards to nodes. The node's dispatch table must
# cover exactly this set.
FORWARDABLE_CALLS = frozenset({
    "query_registry",
    "create_buffer",
    "enqueue_write_buffer",
    "enqueue_read_buffer",
    "enqueue_ndrange_kernel",
    "release_buffer",
    "release_device",
})

PHASES = ("init_ms", "data_creation_ms", "transfer_ms", "compute_ms")


@dataclass
class TimingBreakdown:
    init_ms: float = 0.0
    data_creation_ms: float = 0.0
    transfer_ms: float = 0.0
    compute_ms: float = 0.0
    modeled_compute_ms: float = 0.0
    transfer_bytes: int = 0

    @property
    def total_ms(self):
        return self.init_ms + self.data_creation_ms + self.transfer_ms + self.compute_ms

    def to_dict(self):
        return {
            "init_ms": self.init_ms,
            "data_creation_ms": self.data_creation_ms,
            "transfer_ms": self.transfer_ms,
            "compute_ms": self.compute_ms,
            "modeled_compute_ms": self.modeled_compute_ms,
        }

    def __iadd__(self, other):
        for f in PHASES + ("modeled_compute_ms", "transfer_bytes"):
            setattr(self, f, getattr(self, f) + getattr(other, f))
        return self


@dataclass(frozen=True)
class DeviceEntry:
    global_id: int
    node_name: str
    endpoint: Endpoint
    local_index: int
    model: DeviceModel

    @property
    def device_type(self):
        return self.model.device_type


class GlobalDeviceMap:
    """Dense global ids over every node's devices, in config order."""

    def __init__(self, entries):
        self.entries = tuple(entries)
        ids = [e.global_id for e in self.entries]
        if ids != list(range(len(ids))):
            raise ValueError("global ids must be dense and ordered")
        pairs = {(e.node_name, e.local_index) for e in self.entries}
        if len(pairs) != len(self.entries):
            raise ValueError("(node, local index) pairs must be unique")

    @classmethod
    def from_config(cls, config: ClusterConfig):
        gid = itertools.count()
        return cls(
            DeviceEntry(next(gid), n.name, n.endpoint, i, d)
            for n in config.nodes
            for i, d in enumerate(n.devices)
        )

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, gid) -> DeviceEntry:
        if not 0 <= gid < len(self.entries):
            raise ArgumentError(f"no device with global id {gid}")
        return self.entries[gid]

    def __eq__(self, other):
        return isinstance(other, GlobalDeviceMap) and self.entries == other.entries

    def ids(self, type_filter=None):
        if type_filter is not None and not isinstance(type_filter, DeviceType):
            type_filter = DeviceType.parse(str(type_filter))
        return [e.global_id for e in self.entries
                if type_filter is None or e.device_type == type_filter]


@dataclass(frozen=True)
class TraceEntry:
    node: str
    kind: Kind
    function: Optional[str] = None
    buffer_ids: tuple = ()


# -- handles -------------------------------------------------------------------

_ids = itertools.count(1)


@dataclass(eq=False)
class Handle:
    kind: str
    id: int = field(default_factory=lambda: next(_ids))
    owner_device: Optional[int] = None
    released: bool = False

    def check(self):
        if self.released:
            raise ReleasedHandleError(f"{self.kind} {self.id} has been released")
        return self


@dataclass(eq=False)
class Buffer(Handle):
    size: int = 0
    allocated_on: set = field(default_factory=set)  # node names
    valid_on: set = field(default_factory=set)  # nodes holding current contents
    owner_node: Optional[str] = None
    invalid: bool = False


@dataclass(eq=False)
class Queue(Handle):
    device: Optional[DeviceEntry] = None
    channel: Optional[Channel] = None
    shared: bool = True
    fragment: TimingBreakdown = field(default_factory=TimingBreakdown)
    lock: threading.RLock = field(default_factory=threading.RLock)


@dataclass(eq=False)
class Program(Handle):
    bundle: str = ""
    kernel_names: tuple = ()


@dataclass(eq=False)
class Kernel(Handle):
    program: Optional[Program] = None
    name: str = ""
    signature: Optional[kernels.KernelSignature] = None
    bound: dict = field(default_factory=dict)


@dataclass(eq=False)
class Event(Handle):
    compute_ms: float = 0.0
    modeled_ms: float = 0.0
    transfer_ms: float = 0.0
    work_units: float = 0.0


def _ms(t0):
    return (time.perf_counter() - t0) * 1000.0


class HostContext:
    """A connected session with every node of a cluster."""

    def __init__(self, config: ClusterConfig, channels: dict, device_map: GlobalDeviceMap,
                 user_id="default", shared=True, chunk_size=DEFAULT_CHUNK_SIZE):
        self.config = config
        self.device_map = device_map
        self.user_id = user_id
        self.shared = shared
        self.chunk_size = chunk_size
        self._channels = channels  # node name -> control channel
        self._node_by_endpoint = {n.endpoint: n.name for n in config.nodes}
        self.scheduler = Scheduler(ClusterState.from_device_map(device_map), config.static_map)
        self.timing = TimingBreakdown()
        self.trace: list[TraceEntry] = []
        self._trace_lock = threading.Lock()
        self._lock = threading.RLock()
        self._queues: list[Queue] = []
        self._default_queues: dict[int, Queue] = {}
        self.context = Handle("context")
        for chan in channels.values():
            chan.tracer = self._record

    # -- tracing ----------------------------------------------------------

    def _record(self, peer: Endpoint, msg: Message):
        node = self._node_by_endpoint.get(peer, str(peer))
        fn, bids = None, ()
        if msg.kind in (Kind.API_CALL_REQUEST,):
            fn = msg.body.function_name
            bids = tuple(b for b, _ in msg.body.buffer_refs)
        elif msg.kind == Kind.DATA_TRANSFER:
            bids = (msg.body.buffer_id,)
        with self._trace_lock:
            self.trace.append(TraceEntry(node, msg.kind, fn, bids))

    def calls(self, function=None):
        """Forwarded ApiCallRequests in send order, optionally filtered by name."""
        with self._trace_lock:
            return [t for t in self.trace if t.kind == Kind.API_CALL_REQUEST
                    and (function is None or t.function == function)]

    @contextmanager
    def phase(self, name):
        """Accumulate the wall time of a block into one timing phase."""
        t0 = time.perf_counter()
        try:
            yield
        finally:
            setattr(self.timing, name, getattr(self.timing, name) + _ms(t0))

    # -- queries ----------------------------------------------------------

    def get_device_ids(self, type_filter=None) -> list[int]:
        return self.device_map.ids(type_filter)

    def _control(self, node_name) -> Channel:
        return self._channels[node_name]

    def _call(self, chan: Channel, name, args=(), refs=()):
        reply = chan.request(api_call(name, args, refs))
        return reply.body.args

    # -- queues -----------------------------------------------------------

    def create_queue(self, global_id, shared=None) -> Queue:
        """In-order queue bound to one device, with its own channel pair."""
        entry = self.device_map[global_id]
        chan = connect(entry.endpoint, tracer=self._record)
        q = Queue("queue", owner_device=global_id, device=entry, channel=chan,
                  shared=self.shared if shared is None else shared)
        with self._lock:
            self._queues.append(q)
        return q

    def default_queue(self, global_id) -> Queue:
        with self._lock:
            q = self._default_queues.get(global_id)
            if q is None or q.released:
                q = self.create_queue(global_id)
                self._default_queues[global_id] = q
            return q

    # -- buffers ----------------------------------------------------------

    def create_buffer(self, size: int) -> Buffer:
        if size < 0:
            raise SizeError("buffer size must be >= 0")
        return Buffer("buffer", size=size)

    def _ensure_allocated(self, chan: Channel, node: str, buf: Buffer):
        if node in buf.allocated_on:
            return
        self._call(chan, "create_buffer", [TypedValue.i64(buf.size)], [(buf.id, Direction.OUT)])
        buf.allocated_on.add(node)

    def _push(self, chan: Channel, node: str, buf: Buffer, data: bytes):
        """Allocate if needed, send the bytes, then commit them on the node."""
        self._ensure_allocated(chan, node, buf)
        chan.send_data(chunk_buffer(buf.id, data, self.chunk_size))
        self._call(chan, "enqueue_write_buffer", [TypedValue.i64(len(data))], [(buf.id, Direction.OUT)])

    def _pull(self, chan: Channel, buf: Buffer) -> bytes:
        (val,) = self._call(chan, "enqueue_read_buffer", (), [(buf.id, Direction.IN)])
        return val.value

    def _migrate(self, queue: Queue, buf: Buffer):
        """Copy the current contents of ``buf`` from its owner to the queue's node."""
        data = self._pull(self._control(buf.owner_node), buf)
        node = queue.device.node_name
        self._push(queue.channel, node, buf, data)
        buf.valid_on.add(node)
        return len(data)

    def _live(self, *handles):
        for h in handles:
            h.check()
        self.context.check()

    def enqueue_write_buffer(self, queue: Queue, buf: Buffer, data) -> Event:
        self._live(queue, buf)
        data = bytes(data)
        if len(data) > buf.size:
            raise SizeError(f"write of {len(data)} bytes into a {buf.size}-byte buffer")
        node = queue.device.node_name
        t0 = time.perf_counter()
        with queue.lock:
            try:
                if len(data) < buf.size and buf.valid_on and node not in buf.valid_on:
                    # partial overwrite must keep the untouched tail
                    self._migrate(queue, buf)
                self._push(queue.channel, node, buf, data)
            except HaoclError:
                buf.invalid = True
                raise
        with self._lock:
            buf.valid_on = {node}
            buf.owner_node = node
            buf.owner_device = queue.device.global_id
            buf.invalid = False
        return self._transfer_event(queue, t0, len(data))

    def _transfer_event(self, queue, t0, nbytes):
        ms = _ms(t0)
        with self._lock:
            self.timing.transfer_ms += ms
            self.timing.transfer_bytes += nbytes
        queue.fragment.transfer_ms += ms
        queue.fragment.transfer_bytes += nbytes
        return Event("event", owner_device=queue.device.global_id, transfer_ms=ms)

    def enqueue_read_buffer(self, queue: Queue, buf: Buffer) -> bytes:
        """Current contents of ``buf``; zero bytes if nothing ever wrote it."""
        self._live(queue, buf)
        if buf.invalid:
            raise HaoclError(f"buffer {buf.id} was invalidated by a failed transfer")
        if not buf.valid_on:
            return bytes(buf.size)
        node = queue.device.node_name
        t0 = time.perf_counter()
        with queue.lock:
            if node in buf.valid_on:
                data = self._pull(queue.channel, buf)
            else:
                data = self._pull(self._control(buf.owner_node), buf)
        self._transfer_event(queue, t0, len(data))
        return data

    # -- programs and kernels ---------------------------------------------

    def create_program(self, bundle_name: str) -> Program:
        chan = self._control(self.config.nodes[0].name)
        try:
            names = self._call(chan, "query_registry", [TypedValue.string(bundle_name)])
        except RemoteError as exc:
            if exc.code == "name":
                raise UnknownNameError(exc.remote_message, sorted(kernels.BUNDLES)) from None
            raise
        return Program("program", bundle=bundle_name, kernel_names=tuple(v.value for v in names))

    def create_kernel(self, program: Program, kernel_name: str) -> Kernel:
        self._live(program)
        if kernel_name not in program.kernel_names:
            raise UnknownNameError(
                f"unknown kernel {kernel_name!r} in {program.bundle!r}; "
                f"available: {list(program.kernel_names)}",
                program.kernel_names,
            )
        sig = kernels.lookup(program.bundle, kernel_name)
        return Kernel("kernel", program=program, name=kernel_name, signature=sig)

    def set_kernel_arg(self, kernel: Kernel, index: int, value) -> None:
        """Bind a scalar or a buffer handle. Arity is checked at launch."""
        self._live(kernel)
        if index < 0:
            raise ArgumentError("argument index must be >= 0")
        kernel.bound[index] = value

    def _bindings(self, sig, bound: dict):
        extra = [i for i in bound if i >= sig.arity]
        if extra:
            raise ArgumentError(f"{sig.name} takes {sig.arity} arguments; index {extra} out of range")
        missing = [i for i in range(sig.arity) if i not in bound]
        if missing:
            raise ArgumentError(f"{sig.name}: arguments {missing} are not bound")
        out = []
        for i, spec in enumerate(sig.args):
            v = bound[i]
            if spec.is_buffer:
                if not isinstance(v, Buffer):
                    raise ArgumentError(f"{sig.name} argument {i} ({spec.name}) needs a buffer")
                v.check()
            elif isinstance(v, Handle):
                raise ArgumentError(f"{sig.name} argument {i} ({spec.name}) is a scalar")
            out.append(v)
        return out

    def enqueue_ndrange_kernel(self, queue: Queue, kernel: Kernel, global_size=(1,)) -> Event:
        self._live(queue, kernel)
        args = self._bindings(kernel.signature, kernel.bound)
        task = KernelTask(kernel.name, args, global_size, self.user_id, queue.shared,
                          Explicit(queue.device.global_id))
        return self._launch(queue, kernel.signature, task)

    def _launch(self, queue: Queue, sig, task: KernelTask) -> Event:
        node = queue.device.node_name
        gid = queue.device.global_id
        refs: dict[int, Direction] = {}
        values = []
        with queue.lock:
            t_move = time.perf_counter()
            moved = 0
            for spec, v in zip(sig.args, task.args):
                if not spec.is_buffer:
                    values.append(TypedValue.from_python(v))
                    continue
                values.append(TypedValue.handle(v.id))
                prev = refs.get(v.id)
                refs[v.id] = spec.direction if prev in (None, spec.direction) else Direction.INOUT
                if spec.direction != Direction.OUT and node not in v.valid_on and v.valid_on:
                    moved += self._migrate(queue, v)
                else:
                    self._ensure_allocated(queue.channel, node, v)
            if moved:
                self._transfer_event(queue, t_move, moved)
            meta = [
                TypedValue.string(task.kernel_name),
                TypedValue.i32(queue.device.local_index),
                TypedValue.string(task.user_id),
                TypedValue.i32(int(task.shared_flag)),
                TypedValue.bytes_(pack_global_size(task.global_size)),
            ]
            self.scheduler.state.begin(gid)
            try:
                compute_s, modeled_s, work = (
                    v.value for v in self._call(queue.channel, "enqueue_ndrange_kernel",
                                                meta + values, refs.items())
                )
            finally:
                self.scheduler.state.end(gid)
        with self._lock:
            for spec, v in zip(sig.args, task.args):
                if spec.is_buffer and spec.direction != Direction.IN:
                    v.valid_on = {node}
                    v.owner_node = node
                    v.owner_device = gid
            self.timing.compute_ms += compute_s * 1000
            self.timing.modeled_compute_ms += modeled_s * 1000
        queue.fragment.compute_ms += compute_s * 1000
        queue.fragment.modeled_compute_ms += modeled_s * 1000
        if compute_s > 0:
            self.scheduler.record_profile(gid, task.kernel_name, work, compute_s)
        return Event("event", owner_device=gid, compute_ms=compute_s * 1000,
                     modeled_ms=modeled_s * 1000, work_units=work)

    def estimate(self, task: KernelTask) -> TaskEstimate:
        """Work and data-movement estimate used by the cost model."""
        sig = kernels.find(task.kernel_name)
        scalars, sizes = {}, {}
        for spec, v in zip(sig.args, task.args):
            if spec.is_buffer:
                sizes[spec.name] = v.size // spec.dtype.itemsize
            else:
                scalars[spec.name] = v
        w = sig.work
        if w == "2mnk":
            work = 2.0 * scalars["m"] * scalars["n"] * scalars["k"]
        elif w == "2nnz":
            work = 2.0 * sizes["values"]
        elif w == "edges":
            work = float(sizes["col_idx"])
        elif w == "dqr":
            work = float(sizes["ref"] * sizes["query"])
        elif w == "partition":
            work = float(sizes["row_ptr"])
        else:
            work = float(max(sizes.values(), default=1))
        bufs = [(s, v) for s, v in zip(sig.args, task.args) if s.is_buffer]
        in_bytes = sum(v.size for s, v in bufs if s.direction != Direction.OUT)
        out_bytes = sum(v.size for s, v in bufs if s.direction != Direction.IN)
        inputs = [v for s, v in bufs if s.direction != Direction.OUT]
        nodes = set.intersection(*(v.valid_on for v in inputs)) if inputs else set()
        resident = frozenset(e.global_id for e in self.device_map if e.node_name in nodes)
        return TaskEstimate(max(work, 1.0), in_bytes, out_bytes, resident)

    def submit_task(self, task: KernelTask, estimate: Optional[TaskEstimate] = None):
        """Place a task through the scheduler and launch it on the chosen device.

        Returns ``(global_id, event)``.
        """
        self.context.check()
        if isinstance(task.placement, Auto) and task.placement.policy not in self.scheduler.policies:
            raise PolicyError(f"unknown policy {task.placement.policy!r}")
        sig = kernels.find(task.kernel_name)
        task.args = self._bindings(sig, dict(enumerate(task.args)))
        if estimate is None and isinstance(task.placement, Auto) and task.placement.policy == "cost_model":
            estimate = self.estimate(task)
        gid = self.scheduler.schedule(task, estimate)
        return gid, self.run_task(gid, task)

    def run_task(self, global_id: int, task: KernelTask) -> Event:
        """Launch an already placed task on the default queue of ``global_id``."""
        self.context.check()
        if not 0 <= global_id < len(self.device_map):
            raise HaoclError(f"device {global_id} is outside the device map")
        sig = kernels.find(task.kernel_name)
        task.args = self._bindings(sig, dict(enumerate(task.args)))
        return self._launch(self.default_queue(global_id), sig, task)

    # -- lifecycle --------------------------------------------------------

    def finish(self, queue: Queue) -> TimingBreakdown:
        """Wait for the queue to drain and return the timing accrued since the last finish.

        Calls are synchronous, so the queue is always drained by the time the
        host regains control.
        """
        self._live(queue)
        with queue.lock:
            frag, queue.fragment = queue.fragment, TimingBreakdown()
        return frag

    def release(self, handle: Handle) -> None:
        handle.check()
        handle.released = True
        if isinstance(handle, Buffer):
            for node in sorted(handle.allocated_on):
                self._call(self._control(node), "release_buffer", (), [(handle.id, Direction.INOUT)])
            handle.allocated_on.clear()
            handle.valid_on.clear()
        elif isinstance(handle, Queue):
            try:
                if not handle.shared:
                    self._call(handle.channel, "release_device", [
                        TypedValue.i32(handle.device.local_index),
                        TypedValue.string(self.user_id),
                    ])
            finally:
                handle.channel.close()

    def close(self):
        if self.context.released:
            return
        for q in self._queues:
            if not q.released:
                try:
                    self.release(q)
                except HaoclError:
                    q.channel.close()
        self.context.released = True
        for chan in self._channels.values():
            chan.close()

    def shutdown_cluster(self):
        """Ask every node to drain and exit, then close the session."""
        self.close()
        for n in self.config.nodes:
            try:
                chan = connect(n.endpoint, retries=0)
                chan.shutdown()
            except HaoclError:
                pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def init_cluster(config: ClusterConfig, user_id="default", shared=True, **kw) -> HostContext:
    """Connect to every node, exchange device ids and build the global device map."""
    t0 = time.perf_counter()
    channels: dict[str, Channel] = {}
    try:
        for n in config.nodes:
            try:
                channels[n.name] = connect(n.endpoint)
            except HaoclError as exc:
                raise InitError(f"node {n.name} at {n.endpoint} is unreachable: {exc}", n.name) from exc
        try:
            replies = broadcast(list(channels.values()), Message(Kind.DEVICE_ID_REQUEST))
        except AggregateError as exc:
            bad = [n.name for n in config.nodes if n.endpoint in exc.endpoints]
            raise InitError(f"device id request failed for {bad}", bad[0]) from exc
        for n, reply in zip(config.nodes, replies):
            got = [d.device_type for d in reply.body.devices]
            want = [d.device_type for d in n.devices]
            if got != want or [d.local_index for d in reply.body.devices] != list(range(len(got))):
                raise ConfigError(
                    f"node {n.name} reports devices {[str(t) for t in got]}, "
                    f"config lists {[str(t) for t in want]}"
                )
        device_map = GlobalDeviceMap.from_config(config)
    except BaseException:
        for chan in channels.values():
            chan.close()
        raise
    ctx = HostContext(config, channels, device_map, user_id=user_id, shared=shared, **kw)
    ctx.timing.init_ms += _ms(t0)
    return ctx
