"""Exception types shared across the package.

The CLI maps these onto stable exit codes: bad input -> 2, degenerate
geometry -> 3, training failure -> 4.
"""


class FormatError(ValueError):
    """A binary or JSON artifact does not match its documented layout."""


class EmptyModelError(FormatError):
    """A model file parsed correctly but contains zero primitives."""


class ConfigError(ValueError):
    """A knob is outside its valid range (e.g. too few cells or neighbors)."""


class DegenerateGeometryError(RuntimeError):
    """Geometry too ill-conditioned to solve (near-parallel rays, flat scenes).

    ``condition`` carries the offending condition number when available.
    """

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class InsufficientBundleError(DegenerateGeometryError):
    """Fewer than two distinct source ellipsoids survived ray selection."""


class TrainingError(RuntimeError):
    """Optimization produced a non-finite loss; ``iteration`` is where."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
