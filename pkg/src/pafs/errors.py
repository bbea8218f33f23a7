"""Exception hierarchy shared across the package."""


class PafsError(Exception):
    """Base class for all package errors."""


class EmptyInputError(PafsError, ValueError):
    pass


class ContractError(PafsError, ValueError):
    """A precondition on the arguments of an operation was violated."""


class CacheFormatError(PafsError):
    """Bad magic bytes or unsupported version in a binary file."""


class CacheCorruptionError(PafsError):
    """Truncated file, or header counts disagreeing with the payload."""


class ManifestError(PafsError, ValueError):
    pass


class ConfigError(PafsError, ValueError):
    pass


class SamplingError(PafsError, ValueError):
    pass


class TrainingError(PafsError, RuntimeError):
    pass
