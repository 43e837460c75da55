"""Distributed kernel offload: a host runtime that forwards an OpenCL-style API to node daemons."""

from .config import ClusterConfig, load_config, parse_config
from .host import HostContext, init_cluster
from .scheduler import Auto, Explicit, KernelTask

__version__ = "0.1.0"

__all__ = [
    "Auto", "ClusterConfig", "Explicit", "HostContext", "KernelTask", "init_cluster",
    "load_config", "parse_config",
]
