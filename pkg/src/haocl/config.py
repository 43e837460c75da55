"""Cluster configuration file.

Line-oriented, ``#`` comments and blank lines ignored::

    host 127.0.0.1:7000
    node n0 127.0.0.1:7001 cpu 1.0
    node n1 127.0.0.1:7003 gpu 8.0
    node n1 127.0.0.1:7003 fpga 4.0     # repeated name appends a device
    map spmv_partition 1                # optional static_map entries
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

from .comm import Endpoint
from .errors import ConfigError
from .wire import DeviceType


@dataclass(frozen=True)
class DeviceModel:
    device_type: DeviceType
    relative_throughput: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "device_type", DeviceType(self.device_type))
        if not (self.relative_throughput > 0 and math.isfinite(self.relative_throughput)):
            raise ValueError("relative_throughput must be a positive finite number")


@dataclass(frozen=True)
class NodeConfig:
    name: str
    endpoint: Endpoint
    devices: tuple


@dataclass(frozen=True)
class ClusterConfig:
    host: Endpoint
    nodes: tuple
    static_map: dict = field(default_factory=dict)

    def __post_init__(self):
        names = [n.name for n in self.nodes]
        if not names:
            raise ConfigError("cluster config lists no nodes")
        if len(set(names)) != len(names):
            raise ConfigError("node names must be unique")
        for n in self.nodes:
            if not n.devices:
                raise ConfigError(f"node {n.name} has no devices")

    def node(self, name: str) -> NodeConfig:
        for n in self.nodes:
            if n.name == name:
                return n
        raise ConfigError(f"no node named {name!r}; config has {[n.name for n in self.nodes]}")

    @property
    def device_count(self):
        return sum(len(n.devices) for n in self.nodes)

    def port_clashes(self):
        """``(node_a, node_b, "host:port")`` for every port two nodes would both bind."""
        taken, out = {}, []
        for n in self.nodes:
            ep = n.endpoint
            for port in (ep.message_port, ep.data_port):
                key = (ep.host, port)
                if key in taken:
                    out.append((taken[key], n.name, f"{ep.host}:{port}"))
                else:
                    taken[key] = n.name
        return out

    def to_text(self) -> str:
        lines = [f"host {self.host}"]
        for n in self.nodes:
            for d in n.devices:
                lines.append(f"node {n.name} {n.endpoint} {d.device_type} {d.relative_throughput!r}")
        for kernel, gid in self.static_map.items():
            lines.append(f"map {kernel} {gid}")
        return "\n".join(lines) + "\n"


def parse_config(text: str, source: str = "<config>") -> ClusterConfig:
    host = None
    order: list[str] = []
    endpoints: dict[str, Endpoint] = {}
    devices: dict[str, list[DeviceModel]] = {}
    static_map: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        parts = line.split()
        try:
            if parts[0] == "host" and len(parts) == 2:
                if host is not None:
                    raise ConfigError(f"{where}: more than one host line")
                host = Endpoint.parse(parts[1])
            elif parts[0] == "node" and len(parts) == 5:
                name, ep, dtype, thr = parts[1:]
                ep = Endpoint.parse(ep)
                if name in endpoints and endpoints[name] != ep:
                    raise ConfigError(f"{where}: node {name} redeclared with endpoint {ep}")
                if name not in endpoints:
                    order.append(name)
                    endpoints[name] = ep
                    devices[name] = []
                devices[name].append(DeviceModel(DeviceType.parse(dtype), float(thr)))
            elif parts[0] == "map" and len(parts) == 3:
                static_map[parts[1]] = int(parts[2])
            else:
                raise ConfigError(f"{where}: cannot parse {raw.strip()!r}")
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    if host is None:
        raise ConfigError(f"{source}: missing host line")
    nodes = tuple(NodeConfig(n, endpoints[n], tuple(devices[n])) for n in order)
    config = ClusterConfig(host, nodes, static_map)
    for a, b, port in config.port_clashes():
        # only fatal if both daemons really run on that host; binding will say so
        warnings.warn(f"{source}: nodes {a} and {b} both use {port}", stacklevel=2)
    return config


def load_config(path) -> ClusterConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))
