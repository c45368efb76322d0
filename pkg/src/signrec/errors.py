"""Exception types shared across the toolkit."""


class SignRecError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(SignRecError):
    """Invalid configuration: bad widths, overlapping splits, unknown keys, ..."""


class FormatError(SignRecError):
    """A file is not in the expected format (bad magic, unsupported version)."""


class CorruptRecordError(FormatError):
    """A record file whose payload is missing, truncated, or inconsistent."""


class DegenerateInputError(SignRecError):
    """An input is structurally valid but degenerate (all-masked batch, zero-norm embedding)."""


class TrainingDivergenceError(SignRecError):
    """Training produced non-finite losses or gradients."""


class InvalidChromosomeError(SignRecError):
    """A 9-gene chromosome violates the layer-count/width layout rules."""


class SelectionError(SignRecError):
    """Parent selection is impossible (e.g. no positive fitness mass)."""
