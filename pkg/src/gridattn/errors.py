"""Exception types shared across the package."""


class GridAttnError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(GridAttnError, ValueError):
    """Tensor or matrix dimensions violate an operation's contract."""


class ConfigError(GridAttnError, ValueError):
    """A GpaConfig is invalid for the shapes it is applied to."""


class FormatError(GridAttnError, ValueError):
    """A tensor file is malformed or uses an unsupported encoding."""


class OracleInfeasibleError(GridAttnError, ValueError):
    """The full-attention oracle cannot be run at the requested size."""
