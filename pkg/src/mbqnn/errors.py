"""Exception hierarchy. Everything derives from :class:`MbqnnError` and ``ValueError``."""


class MbqnnError(ValueError):
    pass


class InvalidSignError(MbqnnError):
    """An element that should be -1 or +1 was something else."""


class CorruptionError(MbqnnError):
    """Packed data violates its canonical form (e.g. nonzero padding bits)."""


class DimensionError(MbqnnError):
    """Operand lengths or shapes do not agree."""


class PrecisionError(MbqnnError):
    """A bit count is outside the supported 1..8 range."""


class RangeError(MbqnnError):
    pass


class DomainError(MbqnnError):
    """Non-finite input where a finite real is required."""


class ConfigError(MbqnnError):
    pass


class IntegrityError(MbqnnError):
    """Stored quantized values are not valid odd levels."""


class FormatError(MbqnnError):
    """Model or tensor file is malformed (magic, version, truncation)."""


class ChecksumError(FormatError):
    pass
