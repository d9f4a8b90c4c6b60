"""Exception hierarchy shared by every stage of the toolchain."""


class EdgeSplitError(Exception):
    """Base class for all toolchain errors."""


class ValidationError(EdgeSplitError):
    """An input is well-formed but violates a structural rule."""


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class WeightMismatch(ValidationError):
    pass


class CycleError(ValidationError):
    pass


class ShapeError(ValidationError):
    def __init__(self, layer, message):
        self.layer = layer
        super().__init__(f"{layer}: {message}")


class UnsupportedOp(ValidationError):
    pass


class DuplicateDevice(ValidationError):
    pass


class InconsistentMapping(ValidationError):
    """Base for mapping/model/platform disagreements."""


class UnknownLayer(InconsistentMapping):
    pass


class UnknownResource(InconsistentMapping):
    pass


class UnassignedLayer(InconsistentMapping):
    pass


class DuplicateAssignment(InconsistentMapping):
    pass


class PlanError(ValidationError):
    pass


class MissingProfileEntry(ValidationError):
    pass


class RuntimeFailure(EdgeSplitError):
    """Base for failures while executing plans."""


class PeerUnreachable(RuntimeFailure):
    pass


class ProtocolError(RuntimeFailure):
    pass


class Timeout(RuntimeFailure):
    pass


class SpawnError(RuntimeFailure):
    pass


class LaunchError(RuntimeFailure):
    """Aggregates per-rank failures of a multi-process launch."""

    def __init__(self, rank_errors):
        self.rank_errors = dict(rank_errors)
        lines = [f"rank {r}: {msg}" for r, msg in sorted(self.rank_errors.items())]
        super().__init__("; ".join(lines))
