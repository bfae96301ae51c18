"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, DivergenceError -> 4.
"""


class KronRnnError(Exception):
    """Base class for all library errors."""


class ShapeMismatchError(KronRnnError, ValueError):
    """Operand shapes are incompatible; the message names both shapes."""


class FieldMismatchError(KronRnnError, ValueError):
    """Real and complex operands were mixed where a single field is required."""


class SizeGuardError(KronRnnError, ValueError):
    """A dense materialization would exceed the configured memory guard."""


class CacheMismatchError(KronRnnError, ValueError):
    """A backward pass received a cache that does not match its inputs."""


class ConfigError(KronRnnError, ValueError):
    """Run configuration is malformed or violates an invariant."""


class DataError(KronRnnError, ValueError):
    """Input data file is missing, malformed, or inconsistent."""


class DivergenceError(KronRnnError, RuntimeError):
    """Training produced a non-finite loss.

    Carries a ``diagnostics`` dict (step, loss, gradient norms) that the
    CLI dumps before exiting with code 4.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointError(KronRnnError, ValueError):
    """Checkpoint payload is inconsistent or does not match the config."""
