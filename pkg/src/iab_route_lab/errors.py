"""Exception types raised across the package."""


class IabError(Exception):
    pass


class InfeasibleTopology(IabError):
    pass


class UnknownNode(IabError):
    pass


class IndexOutOfRange(IabError):
    pass


class NotFailable(IabError):
    pass


class AlreadyFailed(IabError):
    pass


class NotFailed(IabError):
    pass


class PolicyReturnedInvalidHop(IabError):
    pass


class AuditMismatch(IabError):
    pass


class EmptyMask(IabError):
    pass


class ShapeMismatch(IabError):
    pass


class InvalidAction(IabError):
    pass


class ZeroUpdates(IabError):
    pass


class MissingNeighborEstimate(IabError):
    pass


class NoPath(IabError):
    pass


class BadWindow(IabError):
    pass


class ConfigError(IabError):
    """Bad experiment configuration; ``line`` and ``field`` locate the problem."""

    def __init__(self, message, *, line=None, field=None):
        parts = []
        if line is not None:
            parts.append(f"line {line}")
        if field is not None:
            parts.append(f"field '{field}'")
        prefix = ", ".join(parts)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.line = line
        self.field = field


class NotAtBaseStation(IabError):
    pass
