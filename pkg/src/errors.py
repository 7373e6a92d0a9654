"""
Exception hierarchy shared by every module.
"""

from typing import Optional


class DGformError(Exception):
    pass


class ShapeError(DGformError, ValueError):
    pass


class DomainError(DGformError, ValueError):
    pass


class ContractError(DGformError, ValueError):
    pass


class ConfigError(DGformError, ValueError):
    pass


class ActionError(DGformError, ValueError):
    pass


class EmptySegmentation(DGformError, ValueError):
    pass


class ParseError(DGformError, ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CheckpointVersionError(DGformError, ValueError):
    def __init__(self, found: str, expected: str):
        self.found = found
        self.expected = expected
        super().__init__(f"Checkpoint version {found!r} does not match supported version {expected!r}")


class NumericalError(DGformError, RuntimeError):
    pass


class TrainingError(DGformError, RuntimeError):
    def __init__(self, component: str, message: str = "non-finite value"):
        self.component = component
        super().__init__(f"{component}: {message}")
