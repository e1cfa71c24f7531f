"""Running peers: configuration, transports, the node, clusters, overhead reports."""

from .cluster import InProcessCluster
from .config import NodeConfig
from .node import Node, SubmitOutcome, TaskDeadlineExceeded, start_node
from .overhead import OverheadBreakdown, ReportError, overhead_report
from .transport import InMemoryNetwork, StartupError, TcpTransport

__all__ = [
    "InMemoryNetwork",
    "InProcessCluster",
    "Node",
    "NodeConfig",
    "OverheadBreakdown",
    "ReportError",
    "StartupError",
    "SubmitOutcome",
    "TaskDeadlineExceeded",
    "TcpTransport",
    "overhead_report",
    "start_node",
]
