"""Exception taxonomy shared across the engine."""


class LogitFuseError(Exception):
    """Base class for all engine errors."""


class ShapeMismatchError(LogitFuseError, ValueError):
    """Logit vectors of unequal length were combined."""


class NumericError(LogitFuseError, ValueError):
    """NaN/Inf encountered where finite values are required."""


class SamplingError(LogitFuseError, ValueError):
    """Degenerate (all-zero) distribution handed to the sampler."""


class VocabMismatchError(LogitFuseError, ValueError):
    """Providers disagree on vocabulary size, content hash, or eos id."""


class UnknownSessionError(LogitFuseError, KeyError):
    """Session id not known to the provider."""


class TransportError(LogitFuseError, RuntimeError):
    """Remote provider unreachable or returned a malformed response."""


class ConfigError(LogitFuseError, ValueError):
    """Invalid run configuration; message carries the dotted field path."""
