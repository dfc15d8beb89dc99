"""Exception types raised across the package.

Every error derives from :class:`TraceGNNError` so callers (notably the CLI)
can catch domain failures without swallowing programming errors.
"""


class TraceGNNError(Exception):
    """Base class for all package errors."""


# scenario construction
class InvalidScenario(TraceGNNError, ValueError):
    """A scenario component violates one of its type invariants."""


class DanglingReference(InvalidScenario):
    pass


class DuplicatePortInPath(InvalidScenario):
    pass


class EmptyPath(InvalidScenario):
    pass


class NonPositiveLabel(InvalidScenario):
    pass


class UnknownLinkPort(TraceGNNError, KeyError):
    pass


class UnknownDevice(TraceGNNError, KeyError):
    pass


class UnknownFlow(TraceGNNError, KeyError):
    pass


# trace pipeline
class NegativeTimestamp(TraceGNNError, ValueError):
    pass


class EmptyDataset(TraceGNNError, ValueError):
    pass


class UnknownFeature(TraceGNNError, KeyError):
    pass


class ParseError(TraceGNNError, ValueError):
    """Malformed scenario or manifest file.

    ``location`` carries the line number (for syntax errors) or the dotted
    field path (for schema errors).
    """

    def __init__(self, message, *, path=None, location=None):
        self.path = path
        self.location = location
        prefix = str(path) if path is not None else "<input>"
        if location is not None:
            prefix = f"{prefix}:{location}"
        super().__init__(f"{prefix}: {message}")


class IoError(TraceGNNError, OSError):
    pass


# neural core
class ShapeMismatch(TraceGNNError, ValueError):
    pass


class EmptySequence(TraceGNNError, ValueError):
    pass


class GraphNotScalar(TraceGNNError, ValueError):
    pass


class InvalidConfig(TraceGNNError, ValueError):
    pass


# training / evaluation
class MissingLabels(TraceGNNError, ValueError):
    pass


class NumericalError(TraceGNNError, ArithmeticError):
    """Non-finite loss or gradient; carries the offending scenario name."""

    def __init__(self, message, scenario=None):
        self.scenario = scenario
        super().__init__(f"{message} (scenario {scenario!r})" if scenario else message)


# synthetic testbed
class InvalidSize(TraceGNNError, ValueError):
    pass


class NoDeliveredPackets(TraceGNNError, RuntimeError):
    pass
