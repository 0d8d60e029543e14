"""Exception types raised across the package."""


class GPromptError(Exception):
    pass


class ShapeError(GPromptError, ValueError):
    pass


class InvalidGraphError(GPromptError, ValueError):
    pass


class ParseError(GPromptError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(GPromptError, ValueError):
    pass


class LabelError(GPromptError, ValueError):
    pass


class NumericError(GPromptError, ArithmeticError):
    pass


class FrozenModelError(GPromptError, RuntimeError):
    pass


class SamplingError(GPromptError, ValueError):
    pass


class EmptyGraphError(GPromptError, ValueError):
    pass


class DegenerateDensityError(GPromptError, ValueError):
    pass
