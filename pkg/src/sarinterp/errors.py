"""Exception types shared across the package."""


class SarError(Exception):
    pass


class InvalidInputError(SarError, ValueError):
    pass


class EmptyGraphError(InvalidInputError):
    pass


class InvalidMaskError(InvalidInputError):
    pass


class CycleError(SarError):
    def __init__(self, report):
        self.report = report
        super().__init__(f"dependency graph has a cycle: {report.cycle}")


class ConsistencyError(SarError, AssertionError):
    pass


class StateError(SarError, RuntimeError):
    pass


class FormatError(SarError, ValueError):
    """Malformed motion, skeleton, schedule, or checkpoint file."""


class UndefinedMetricError(SarError, ValueError):
    pass
