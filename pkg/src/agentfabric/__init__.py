"""Deterministic simulation of an agent-centric data fabric.

The fabric sits between scripted reasoning agents and a set of simulated
backend engines (relational, vector, stream, inference). It routes queries
by attention weight, suppresses semantically duplicate probes, caches and
prefetches results by embedding similarity, serves partial answers once a
confidence quorum is met, and tunes its own policies from KPI feedback.

Everything runs on a logical clock with seeded randomness, so a scenario
run is a pure function of (config, seed).
"""

__version__ = "0.1.0"

from agentfabric.embedding import DEFAULT_DIM, cosine, embed_text

__all__ = ["DEFAULT_DIM", "cosine", "embed_text", "__version__"]
