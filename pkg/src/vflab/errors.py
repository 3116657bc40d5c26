"""Exception hierarchy shared by every vflab module."""

from __future__ import annotations


class VfLabError(Exception):
    """Base class for all errors raised by vflab."""


class InvalidConfig(VfLabError, ValueError):
    pass


class OutOfRange(VfLabError, ValueError):
    def __init__(self, value):
        super().__init__(f"Out of range VF ID: {value}")
        self.value = value


class DuplicateId(VfLabError):
    pass


class CapacityExceeded(VfLabError):
    pass


class AllocationFailure(VfLabError):
    """Raised when no free block of the requested order (or larger) exists.

    ``report`` carries the allocator state at the moment of failure.
    """

    def __init__(self, report):
        super().__init__(
            f"allocation failure, order:{report.requested_order} "
            f"({report.free_bytes_at_failure} bytes still free, "
            f"largest free order {report.largest_free_order_at_failure})"
        )
        self.report = report


class DoubleFree(VfLabError):
    pass


class UnknownBlock(VfLabError):
    pass


class NotActive(VfLabError):
    pass


class PreconditionViolated(VfLabError):
    pass


class DeadlockDetected(VfLabError):
    pass


class GraceTimeout(VfLabError):
    pass


class ParseError(VfLabError):
    def __init__(self, line_number: int, line: str):
        super().__init__(f"line {line_number}: unrecognised timing record: {line!r}")
        self.line_number = line_number
        self.line = line


class NoSamples(VfLabError):
    pass


class NoBaseline(VfLabError):
    pass


class InsufficientData(VfLabError):
    pass


class NotColliding(VfLabError):
    pass
