"""Exception types shared across the package.

Everything derives from ValueError or RuntimeError so callers that do not
care about the fine-grained kind can still catch the usual built-ins.
"""


class ShapeError(ValueError):
    """Operands have incompatible or malformed shapes."""


class RankError(ValueError):
    """Adapter rank is out of range for the given dimensions."""


class DomainError(ValueError):
    """Scalar argument outside its documented domain."""


class ConfigError(ValueError):
    """Malformed configuration file or inconsistent option set."""


class BatchError(ValueError):
    """Malformed forward batch (offsets, phases, or token spans)."""


class StateError(RuntimeError):
    """Operation invoked in a state that does not permit it."""


class SyncError(ValueError):
    """Weight synchronisation payload is inconsistent with the catalogue."""


class InfeasibleBatchError(ValueError):
    """A single step would need more distinct adapters than fit on device."""
