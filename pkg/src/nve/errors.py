"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """Misuse of the differentiation graph (e.g. backward on a non-scalar)."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown identifier."""


class FormatError(ValueError):
    """A file does not conform to its declared binary/text format."""


class DataError(ValueError):
    """Dataset-level contract violation (empty dataset, bad label, ...)."""


class NonFiniteGradientError(RuntimeError):
    """A parameter gradient went NaN/Inf; carries the parameter name."""

    def __init__(self, param_name, detail=""):
        self.param_name = param_name
        msg = f"non-finite gradient for parameter '{param_name}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
