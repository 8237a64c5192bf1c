"""Exception types raised across the fabric."""


class FabricError(Exception):
    """Base class for all fabric-level errors."""


class DimensionMismatchError(FabricError):
    """Embeddings of different dimensions met; global dim config is inconsistent."""


class RoutingError(FabricError):
    """The router could not produce a viable plan (e.g. every source pruned)."""


class UnsupportedOpError(FabricError):
    """A plan node was compiled for an engine that cannot execute its kind."""

    def __init__(self, kind: str, engine_id: str):
        super().__init__(f"engine {engine_id!r} does not support node kind {kind!r}")
        self.kind = kind
        self.engine_id = engine_id


class EngineError(FabricError):
    """Execution-time failure inside a simulated engine (unknown table, bad input)."""


class PredicateError(FabricError):
    """A scan predicate string could not be parsed."""


class ConfigError(FabricError):
    """Scenario or CLI configuration is invalid (unknown flag, missing fixture)."""
