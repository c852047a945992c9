"""Exception types shared across modules."""
from __future__ import annotations


class MeshParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class NonManifoldError(ValueError):
    """A face is shared by more than two tetrahedra."""


class DecompositionError(ValueError):
    pass


class AssignmentError(RuntimeError):
    pass


class RepairError(RuntimeError):
    pass


class PayloadCorruptionError(ValueError):
    """A packed subdomain or its side data is malformed; ``section`` names the culprit."""

    def __init__(self, section: str, message: str):
        super().__init__(f"{section}: {message}")
        self.section = section


class CapacityError(OverflowError):
    pass


class FrozenInterfaceViolation(RuntimeError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, subdomain, message: str):
        super().__init__(f"subdomain {subdomain}: {message}")
        self.subdomain = subdomain
