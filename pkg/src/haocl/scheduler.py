"""Placement policies mapping kernel tasks to global device ids."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import (
    MappingError,
    PolicyError,
    PreconditionError,
    RegistrationError,
    UnknownDeviceError,
)

BASE_RATE = 1e9  # work units per second of a relative_throughput=1.0 device
NET_BANDWIDTH = 1e8  # bytes per second
EMA_ALPHA = 0.3


@dataclass(frozen=True)
class Explicit:
    global_id: int


@dataclass(frozen=True)
class Auto:
    policy: str


@dataclass
class KernelTask:
    kernel_name: str
    args: list = field(default_factory=list)
    global_size: tuple = (1,)
    user_id: str = "default"
    shared_flag: bool = True
    placement: object = field(default_factory=lambda: Auto("user_directed"))

    def __post_init__(self):
        self.global_size = tuple(int(g) for g in self.global_size)
        if not 1 <= len(self.global_size) <= 3 or min(self.global_size) < 1:
            raise ValueError(f"bad global size {self.global_size}")


@dataclass(frozen=True)
class TaskEstimate:
    work_units: float
    in_bytes: float = 0.0
    out_bytes: float = 0.0
    # devices on which the task's buffers already live; movement is free there
    resident_on: frozenset = frozenset()

    def __post_init__(self):
        if self.work_units <= 0 or self.in_bytes < 0 or self.out_bytes < 0:
            raise ValueError("work_units must be > 0 and byte counts >= 0")


@dataclass
class DeviceState:
    global_id: int
    relative_throughput: float
    device_type: str = "cpu"
    outstanding_tasks: int = 0
    profile: dict = field(default_factory=dict)  # kernel name -> work units per second


class ClusterState:
    """Per-device load and profiled rates, safe for concurrent use."""

    def __init__(self, devices, base_rate=BASE_RATE, bandwidth=NET_BANDWIDTH, alpha=EMA_ALPHA):
        self.devices = {d.global_id: d for d in devices}
        self.base_rate = base_rate
        self.bandwidth = bandwidth
        self.alpha = alpha
        self.lock = threading.RLock()

    @classmethod
    def from_device_map(cls, device_map, **kw):
        return cls(
            [DeviceState(e.global_id, e.model.relative_throughput, str(e.model.device_type))
             for e in device_map],
            **kw,
        )

    def __len__(self):
        return len(self.devices)

    def ids(self):
        return sorted(self.devices)

    def device(self, gid) -> DeviceState:
        try:
            return self.devices[gid]
        except KeyError:
            raise UnknownDeviceError(f"device {gid} is not in the cluster") from None

    def rate(self, gid, kernel_name) -> float:
        d = self.device(gid)
        with self.lock:
            r = d.profile.get(kernel_name)
        return r if r is not None else d.relative_throughput * self.base_rate

    def record_profile(self, gid, kernel_name, work_units, seconds):
        """Fold one observed execution into the device's rate estimate (EMA)."""
        if seconds <= 0:
            raise PreconditionError("observed compute time must be > 0")
        d = self.device(gid)
        sample = work_units / seconds
        with self.lock:
            old = d.profile.get(kernel_name)
            d.profile[kernel_name] = sample if old is None else (
                self.alpha * sample + (1 - self.alpha) * old
            )

    def begin(self, gid):
        with self.lock:
            self.device(gid).outstanding_tasks += 1

    def end(self, gid):
        with self.lock:
            d = self.device(gid)
            d.outstanding_tasks = max(0, d.outstanding_tasks - 1)


def modeled_cost(state: ClusterState, gid, task: KernelTask, est: TaskEstimate) -> float:
    """Seconds to run ``task`` on ``gid``: compute plus non-resident data movement."""
    cost = est.work_units / state.rate(gid, task.kernel_name)
    if gid not in est.resident_on:
        cost += (est.in_bytes + est.out_bytes) / state.bandwidth
    return cost


Policy = Callable[[KernelTask, ClusterState, Optional[TaskEstimate]], int]


def user_directed(task, state, est=None):
    if not isinstance(task.placement, Explicit):
        raise PolicyError("user_directed placement needs an explicit device id")
    state.device(task.placement.global_id)
    return task.placement.global_id


class RoundRobin:
    """Cycle through ids in ascending order, starting at the smallest."""

    def __init__(self):
        self._next = 0
        self._lock = threading.Lock()

    def __call__(self, task, state, est=None):
        ids = state.ids()
        with self._lock:
            gid = ids[self._next % len(ids)]
            self._next += 1
        return gid


class StaticMap:
    def __init__(self, table=None):
        self.table = dict(table or {})

    def __call__(self, task, state, est=None):
        try:
            gid = self.table[task.kernel_name]
        except KeyError:
            raise MappingError(f"static map has no entry for kernel {task.kernel_name!r}") from None
        state.device(gid)
        return gid


def cost_model(task, state, est):
    if est is None:
        raise PolicyError("cost_model needs a task estimate")
    # min over (cost, id) gives the smallest id on ties
    return min((modeled_cost(state, gid, task, est), gid) for gid in state.ids())[1]


class Scheduler:
    """Policy registry plus the cluster state they consult."""

    BUILTINS = ("user_directed", "round_robin", "static_map", "cost_model")

    def __init__(self, state: ClusterState, static_map=None):
        self.state = state
        self._policies: dict[str, Policy] = {}
        self._lock = threading.Lock()
        self.register_policy("user_directed", user_directed)
        self.register_policy("round_robin", RoundRobin())
        self.register_policy("static_map", StaticMap(static_map))
        self.register_policy("cost_model", cost_model)

    @property
    def policies(self):
        return sorted(self._policies)

    def register_policy(self, name: str, policy: Policy) -> None:
        with self._lock:
            if name in self._policies:
                raise RegistrationError(f"policy {name!r} is already registered")
            self._policies[name] = policy

    def schedule(self, task: KernelTask, estimate: Optional[TaskEstimate] = None) -> int:
        if not len(self.state):
            raise PreconditionError("cluster state is empty")
        p = task.placement
        if isinstance(p, Explicit):
            name = "user_directed"
        elif isinstance(p, Auto):
            name = p.policy
        else:
            raise PolicyError(f"unknown placement {p!r}")
        try:
            policy = self._policies[name]
        except KeyError:
            raise PolicyError(f"unknown policy {name!r}; registered: {self.policies}") from None
        gid = policy(task, self.state, estimate)
        if gid not in self.state.devices:
            raise UnknownDeviceError(f"policy {name!r} chose device {gid}, which does not exist")
        return gid

    def record_profile(self, gid, kernel_name, work_units, seconds):
        self.state.record_profile(gid, kernel_name, work_units, seconds)
