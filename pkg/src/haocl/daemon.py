"""Node management process: owns local devices and executes forwarded calls."""

from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .comm import Endpoint, Listener, serve
from .errors import (
    ArgumentError,
    HaoclError,
    KernelArgumentError,
    PreconditionError,
    UnknownNameError,
)
from .host import FORWARDABLE_CALLS
from .scheduler import BASE_RATE
from .wire import (
    ApiCallBody,
    DataAck,
    DataPackage,
    DeviceDescriptor,
    DeviceList,
    Direction,
    Kind,
    Message,
    Tag,
    TypedValue,
    api_response,
    unpack_global_size,
)

log = logging.getLogger("haocl.node")
# one line per dispatched call: call_id function device status elapsed_ms
call_log = logging.getLogger("haocl.calls")


class ReassemblyConflict(HaoclError):
    code = "reassembly-conflict"


class Busy(HaoclError):
    code = "busy"


class UnknownCall(HaoclError):
    code = "unknown-call"


def error_code(exc: BaseException) -> str:
    if isinstance(exc, UnknownNameError):
        return "name"
    if isinstance(exc, ArgumentError):
        return "argument"
    return getattr(exc, "code", "internal")


@dataclass
class _Transfer:
    total_len: int
    data: bytearray
    received: list = field(default_factory=list)  # merged, sorted [start, end) spans
    final_call_id: int | None = None
    final_offset: int = 0
    complete: bool = False
    consumed: bool = False

    def covered(self, lo, hi):
        """Received sub-spans of [lo, hi)."""
        return [(max(lo, s), min(hi, e)) for s, e in self.received if s < hi and e > lo]

    def add(self, lo, hi):
        spans = sorted(self.received + [(lo, hi)])
        merged = []
        for s, e in spans:
            if merged and s <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(merged[-1][1], e))
            else:
                merged.append((s, e))
        self.received = merged
        self.complete = self.total_len == 0 or merged == [(0, self.total_len)]


class BufferStore:
    """Reassembly of inbound data packages plus the node's allocated buffers."""

    def __init__(self):
        self._transfers: dict[int, _Transfer] = {}
        self._buffers: dict[int, bytearray] = {}
        self._lock = threading.RLock()

    def receive(self, pkg: DataPackage, call_id: int = 0):
        """Store one chunk. Returns a DataAck message when it completes the buffer."""
        lo, hi = pkg.offset, pkg.offset + len(pkg.payload)
        with self._lock:
            t = self._transfers.get(pkg.buffer_id)
            if t is None or t.consumed or t.total_len != pkg.total_len:
                t = _Transfer(pkg.total_len, bytearray(pkg.total_len))
                self._transfers[pkg.buffer_id] = t
            for s, e in t.covered(lo, hi):
                if t.data[s:e] != pkg.payload[s - lo:e - lo]:
                    raise ReassemblyConflict(
                        f"buffer {pkg.buffer_id}: chunk at {lo} conflicts with bytes [{s}, {e})"
                    )
            was_complete = t.complete
            t.data[lo:hi] = pkg.payload
            if hi == pkg.total_len:
                t.final_call_id = call_id
                t.final_offset = lo
            t.add(lo, hi)
            if t.complete and not was_complete:
                return Message(
                    Kind.DATA_ACK,
                    t.final_call_id if t.final_call_id is not None else call_id,
                    DataAck(pkg.buffer_id, t.final_offset, t.total_len),
                )
        return None

    def transfer_complete(self, buffer_id) -> bool:
        with self._lock:
            t = self._transfers.get(buffer_id)
            return bool(t and t.complete)

    def take_transfer(self, buffer_id) -> bytes:
        with self._lock:
            t = self._transfers.get(buffer_id)
            if t is None or t.consumed:
                raise PreconditionError(f"no pending data for buffer {buffer_id}")
            if not t.complete:
                raise PreconditionError(f"data for buffer {buffer_id} is incomplete: {t.received}")
            t.consumed = True
            return bytes(t.data)

    def allocate(self, buffer_id, size):
        with self._lock:
            buf = self._buffers.get(buffer_id)
            if buf is None or len(buf) != size:
                self._buffers[buffer_id] = bytearray(size)

    def write(self, buffer_id, data, offset=0):
        with self._lock:
            buf = self._get(buffer_id)
            if offset + len(data) > len(buf):
                raise ArgumentError(
                    f"{len(data)} bytes at offset {offset} overflow buffer {buffer_id} of {len(buf)}"
                )
            buf[offset:offset + len(data)] = data

    def read(self, buffer_id) -> bytes:
        with self._lock:
            return bytes(self._get(buffer_id))

    def size(self, buffer_id) -> int:
        with self._lock:
            return len(self._get(buffer_id))

    def release(self, buffer_id):
        with self._lock:
            self._buffers.pop(buffer_id, None)
            self._transfers.pop(buffer_id, None)

    def __contains__(self, buffer_id):
        with self._lock:
            return buffer_id in self._buffers

    def _get(self, buffer_id):
        try:
            return self._buffers[buffer_id]
        except KeyError:
            raise PreconditionError(f"buffer {buffer_id} is not allocated on this node") from None


class DeviceLease:
    """Who may run on one local device.

    A non-shared task takes the device for its user until that user releases
    it; shared tasks from several users may interleave freely.
    """

    def __init__(self):
        self.current_user = None  # holder of a non-shared lease
        self.shared = True
        self.active: dict[str, int] = {}
        self._lock = threading.Lock()

    def acquire(self, user, shared):
        with self._lock:
            if self.current_user is not None and self.current_user != user:
                raise Busy(f"device leased exclusively to user {self.current_user!r}")
            if not shared:
                others = [u for u, n in self.active.items() if n and u != user]
                if others:
                    raise Busy(f"device in use by {others}; cannot take an exclusive lease")
                self.current_user = user
                self.shared = False
            self.active[user] = self.active.get(user, 0) + 1

    def done(self, user):
        with self._lock:
            self.active[user] -= 1

    def release(self, user):
        with self._lock:
            if self.current_user == user:
                self.current_user = None
                self.shared = True

    def running_users(self):
        with self._lock:
            return {u for u, n in self.active.items() if n}


class NodeDaemon:
    def __init__(self, endpoint: Endpoint, devices, name: str = "node"):
        self.endpoint = endpoint
        self.devices = list(devices)
        self.name = name
        self.store = BufferStore()
        self.leases = [DeviceLease() for _ in self.devices]
        self._executors = [
            ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"haocl-dev{i}")
            for i in range(len(self.devices))
        ]
        self.dispatch = {
            "query_registry": self._query_registry,
            "create_buffer": self._create_buffer,
            "enqueue_write_buffer": self._write_buffer,
            "enqueue_read_buffer": self._read_buffer,
            "enqueue_ndrange_kernel": self._launch,
            "release_buffer": self._release_buffer,
            "release_device": self._release_device,
        }
        self.listener: Listener | None = None
        self.self_test()

    def self_test(self):
        missing = FORWARDABLE_CALLS - set(self.dispatch)
        extra = set(self.dispatch) - FORWARDABLE_CALLS
        if missing or extra:
            raise RuntimeError(f"dispatch table mismatch: missing {missing}, extra {extra}")

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> "NodeDaemon":
        self.listener = serve(self.endpoint, self.handle, on_stop=self._drain_devices)
        log.info("node %s serving %s with %d device(s)", self.name, self.endpoint, len(self.devices))
        return self

    def _drain_devices(self):
        for ex in self._executors:
            ex.shutdown(wait=True)

    def stop(self):
        if self.listener is not None:
            self.listener.stop()

    def wait(self, timeout=None):
        return self.listener.wait(timeout)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    # -- frame handling -----------------------------------------------------

    def handle(self, msg: Message):
        if msg.kind == Kind.PING:
            return msg.reply(Kind.PONG)
        if msg.kind == Kind.DEVICE_ID_REQUEST:
            return msg.reply(Kind.DEVICE_ID_RESPONSE, DeviceList(
                DeviceDescriptor(i, d.device_type, d.relative_throughput)
                for i, d in enumerate(self.devices)
            ))
        if msg.kind == Kind.DATA_TRANSFER:
            try:
                return self.store.receive(msg.body, msg.call_id)
            except ReassemblyConflict as exc:
                return msg.error(exc.code, str(exc))
        if msg.kind == Kind.API_CALL_REQUEST:
            return self.handle_call(msg)
        return msg.error("malformed", f"{msg.kind.name} is not a request a node answers")

    def handle_call(self, msg: Message):
        body: ApiCallBody = msg.body
        start = time.perf_counter()
        device = "-"
        status = "ok"
        try:
            fn = self.dispatch.get(body.function_name)
            if fn is None:
                raise UnknownCall(f"unknown call {body.function_name!r}")
            if body.function_name == "enqueue_ndrange_kernel" and len(body.args) > 1:
                device = body.args[1].value
            return api_response(msg, fn(body))
        except Exception as exc:
            status = error_code(exc)
            if status == "internal":
                log.exception("call %s failed", body.function_name)
            return msg.error(status, str(exc))
        finally:
            elapsed = (time.perf_counter() - start) * 1000
            call_log.info("%d %s %s %s %.3f", msg.call_id, body.function_name, device, status, elapsed)

    # -- dispatched calls ---------------------------------------------------

    def _query_registry(self, body):
        bundle = body.args[0].value
        return [TypedValue.string(n) for n in kernels.bundle_kernels(bundle)]

    def _create_buffer(self, body):
        (bid, _), = body.buffer_refs
        self.store.allocate(bid, body.args[0].value)
        return []

    def _write_buffer(self, body):
        (bid, _), = body.buffer_refs
        nbytes = body.args[0].value
        data = self.store.take_transfer(bid)
        if len(data) != nbytes:
            raise PreconditionError(f"received {len(data)} bytes for buffer {bid}, expected {nbytes}")
        self.store.write(bid, data)
        return []

    def _read_buffer(self, body):
        (bid, _), = body.buffer_refs
        return [TypedValue.bytes_(self.store.read(bid))]

    def _release_buffer(self, body):
        for bid, _ in body.buffer_refs:
            self.store.release(bid)
        return []

    def _release_device(self, body):
        local, user = body.args[0].value, body.args[1].value
        self._device(local)
        self.leases[local].release(user)
        return []

    def _device(self, local):
        if not 0 <= local < len(self.devices):
            raise ArgumentError(f"no local device {local}; node has {len(self.devices)}")
        return self.devices[local]

    def _launch(self, body):
        if len(body.args) < 5:
            raise ArgumentError("kernel launch needs name, device, user, shared flag and size")
        name, local, user, shared, gsize = (a.value for a in body.args[:5])
        task = dict(
            kernel_name=name,
            args=list(body.args[5:]),
            global_size=unpack_global_size(gsize),
            user_id=user,
            shared_flag=bool(shared),
        )
        compute_s, modeled_s, work = self.execute_task(task, local)
        return [TypedValue.f64(compute_s), TypedValue.f64(modeled_s), TypedValue.f64(work)]

    def execute_task(self, task: dict, local_device: int):
        """Run a kernel on one local device; outputs land in the buffer store.

        Returns ``(compute_seconds, modeled_seconds, work_units)``.
        """
        model = self._device(local_device)
        sig = kernels.find(task["kernel_name"])
        args = task["args"]
        if len(args) != sig.arity:
            raise KernelArgumentError(
                f"{sig.name} takes {sig.arity} arguments, got {len(args)}"
            )
        lease = self.leases[local_device]
        lease.acquire(task["user_id"], task["shared_flag"])
        try:
            fut = self._executors[local_device].submit(self._run_kernel, sig, args)
            outputs, work, seconds = fut.result()
        finally:
            lease.done(task["user_id"])
        modeled = work / (model.relative_throughput * BASE_RATE)
        return seconds, modeled, work

    def _run_kernel(self, sig, args):
        inputs, scalars, out_ids = {}, {}, {}
        for spec, val in zip(sig.args, args):
            if spec.is_buffer:
                if val.tag != Tag.HANDLE:
                    raise KernelArgumentError(f"argument {spec.name} of {sig.name} must be a buffer")
                bid = val.value
                if spec.direction == Direction.OUT:
                    out_ids[spec.name] = bid
                    self.store.size(bid)
                    continue
                raw = self.store.read(bid)
                if len(raw) % spec.dtype.itemsize:
                    raise KernelArgumentError(f"buffer {spec.name} is not a whole number of {spec.dtype}")
                inputs[spec.name] = np.frombuffer(raw, dtype=spec.dtype)
            else:
                if val.tag not in (Tag.I64, Tag.I32, Tag.F64, Tag.F32):
                    raise KernelArgumentError(f"argument {spec.name} of {sig.name} must be a scalar")
                scalars[spec.name] = val.value
        t0 = time.perf_counter()
        outputs, work = kernels.run(sig, inputs, scalars)
        seconds = time.perf_counter() - t0
        for name, arr in outputs.items():
            bid = out_ids[name]
            raw = arr.tobytes()
            if len(raw) != self.store.size(bid):
                raise KernelArgumentError(
                    f"output {name} of {sig.name} is {len(raw)} bytes but buffer holds {self.store.size(bid)}"
                )
            self.store.write(bid, raw)
        return outputs, work, seconds


def run_daemon(endpoint: Endpoint, devices, name="node") -> None:
    """Serve until a Shutdown message (or :meth:`NodeDaemon.stop`) arrives."""
    daemon = NodeDaemon(endpoint, devices, name).start()
    daemon.wait()
