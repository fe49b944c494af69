class EnviroInfillError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(EnviroInfillError, ValueError):
    pass


class ShapeError(EnviroInfillError, ValueError):
    pass


class InputTooShortError(EnviroInfillError, ValueError):
    pass


class UndefinedSnrError(EnviroInfillError, ValueError):
    """Raised when an SNR or a gain that depends on one has no finite value."""


class TextOverflowError(EnviroInfillError, ValueError):
    pass


class DomainError(EnviroInfillError, ValueError):
    pass


class DivergenceError(EnviroInfillError, FloatingPointError):
    pass


class SampleRateError(EnviroInfillError, ValueError):
    pass
