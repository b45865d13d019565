"""Desk-scale distributed smart measurement stack.

Simulated smart-transducer nodes with on-node pre-processing, an edge
gateway (embedded pub/sub broker, declarative dataflow, on-edge risk
scoring, cloud uplink), a mock enterprise sink, and the trimming-quality
use case closing the loop through an operator panel.
"""

__version__ = "0.1.0"
