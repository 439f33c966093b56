"""Exception types shared across ontobn modules."""


class OntobnError(Exception):
    """Base class for all library errors."""


class ParseError(OntobnError, ValueError):
    """Malformed input text. ``lineno`` is 1-based when known."""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class CycleError(OntobnError, ValueError):
    """The label graph contains a directed cycle."""

    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__("cycle detected: " + " -> ".join(self.cycle + self.cycle[:1]))


class UnknownLabelError(OntobnError, KeyError):
    def __str__(self):
        return f"unknown label: {self.args[0]!r}"


class UnknownFeatureError(OntobnError, KeyError):
    def __str__(self):
        return f"unknown feature id: {self.args[0]!r}"


class ValidationError(OntobnError, ValueError):
    """Inputs are well-formed but inconsistent with each other."""


class DivergenceError(OntobnError, FloatingPointError):
    """A non-finite value appeared during training or differentiation."""


class UnstableStatisticError(OntobnError, RuntimeError):
    """A bootstrap statistic was undefined on too many resamples."""
