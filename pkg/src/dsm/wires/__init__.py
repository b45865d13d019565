"""Declarative dataflow runtime for the edge gateway.

A graph document wires stages (subscriber, window, feature, join, score,
threshold, emitter, logger) into a DAG. Stages run as independent workers
connected by bounded FIFO queues; the engine keeps exact conservation
counters (consumed = emitted + join drops + dead letters).
"""

from .graph import GraphSpec, GraphValidationError, load_graph, validate_graph
from .records import WireRecord, record_from_message
from .runtime import Pipeline, PipelineContext, StartupFailure

__all__ = [
    "GraphSpec",
    "GraphValidationError",
    "load_graph",
    "validate_graph",
    "WireRecord",
    "record_from_message",
    "Pipeline",
    "PipelineContext",
    "StartupFailure",
]
