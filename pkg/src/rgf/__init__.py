"""Road-graph generation as a sequential decision process, solved with a
MuZero-style learned model and tree search."""

from .graph import SpatialGraph, build_graph, read_graph, write_graph
from .metrics import MetricConfig, MetricReport, combined_score, evaluate

__all__ = [
    "SpatialGraph",
    "build_graph",
    "read_graph",
    "write_graph",
    "MetricConfig",
    "MetricReport",
    "combined_score",
    "evaluate",
]
__version__ = "0.1.0"
