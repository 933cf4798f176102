"""embed_bridge: batch patch encoder emitting EMB1 embedding files.

A format-bounded shim: it reads ROI patch rasters, applies the standard
preprocessing recipe, runs a user-supplied frozen tile encoder, and writes
1536-d embeddings in the EMB1 container consumed by the navigation
artifact's evaluation heads. It never selects regions or computes metrics.
"""

__version__ = "0.1.0"

from embed_bridge.job import BridgeJob, encode_batch

__all__ = ["BridgeJob", "encode_batch", "__version__"]
