"""
Errors

Exception hierarchy shared by every core module and mapped to CLI exit codes
in focal_bench.py (input problems exit 1, contract violations exit 2).
"""


class FocalBenchError(Exception):
    """Base class for all errors raised by the bench."""


class ContractViolation(FocalBenchError, ValueError):
    """A pre-condition or dimension contract of an operation was broken."""


class NonFiniteEvaluation(ContractViolation):
    """A function evaluated by the finite-difference oracle returned a non-finite value."""

    def __init__(self, coordinate, value):
        self.coordinate = coordinate
        self.value = value
        super().__init__(f"non-finite evaluation {value!r} at coordinate {coordinate}")


class ConfigurationError(FocalBenchError, ValueError):
    """A configuration value or mode string is not recognized or out of range."""


class InputError(FocalBenchError):
    """A file the bench was asked to read is missing or malformed."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}"
            if line is not None:
                location += f":{line}"
            location += ": "
        super().__init__(f"{location}{message}")


class SceneGenerationError(FocalBenchError):
    """A scene configuration could not be realized within the placement budget."""
