"""Exception types shared across the package."""


class TopoFLError(Exception):
    """Base class for all errors raised by this package."""


class InputError(TopoFLError, ValueError):
    """Malformed data passed to an operation (shape, non-finite values, empty)."""


class ConfigError(TopoFLError, ValueError):
    """Invalid configuration or parameter combination."""


class GenerationError(TopoFLError, RuntimeError):
    """A synthetic scenario could not be generated as requested."""
