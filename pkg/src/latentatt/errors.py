"""Exception types shared across the package."""


class LatentAttError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(LatentAttError, ValueError):
    """Operand shapes are incompatible."""


class BoundsError(LatentAttError, IndexError):
    """An index lies outside the valid range."""


class ContractError(LatentAttError, ValueError):
    """A precondition of an operation was violated."""


class NonFiniteError(LatentAttError, FloatingPointError):
    """A tensor or loss contains NaN or Inf."""


class EmptySupportError(LatentAttError, ValueError):
    """No admissible position remains for the latent variable."""


class InfeasibleError(LatentAttError, ValueError):
    """No monotone alignment exists for a label sequence."""


class EmptyBeamError(LatentAttError, RuntimeError):
    """Every hypothesis in the beam died during search."""


class FormatError(LatentAttError, ValueError):
    """A file could not be parsed.

    ``line`` is 1-based when known.
    """

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
        self.path = path
        self.line = line


class UnsupportedVersionError(FormatError):
    """The file declares a format version this code cannot read."""


class ConfigError(LatentAttError, ValueError):
    """Invalid or unknown configuration key or value."""
