"""Exception types shared across the toolkit."""


class DereverbError(Exception):
    """Base class for all toolkit errors."""


# --- audio I/O ---
class UnsupportedFormat(DereverbError):
    """WAV encoding we do not handle (compressed, 24-bit, ...)."""


class CorruptHeader(DereverbError):
    """File is not a parseable RIFF/WAVE container."""


class EmptyAudio(DereverbError):
    """Audio file contains no samples."""


class IoFailure(DereverbError):
    """Underlying read/write failed."""


# --- signal processing ---
class NonColaParams(DereverbError):
    """STFT parameters do not satisfy the overlap-add inversion condition."""


class AllZeroRir(DereverbError):
    """Impulse response has no energy; onset undefined."""


# --- corpus ---
class NoFilesFound(DereverbError):
    """Ingestion directory contains no WAV files."""


class InsufficientData(DereverbError):
    """Not enough retained impulse responses to fill the requested splits."""


class EmptySplit(DereverbError):
    """Requested split contains no records."""


class EmptyAfterTrim(DereverbError):
    """Signal is entirely silent after alignment and trimming."""


class VersionMismatch(DereverbError):
    """Persisted file carries an unsupported format version."""


class ParseError(DereverbError):
    """Persisted file is malformed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


# --- tensors / models ---
class ShapeMismatch(DereverbError):
    """Operand shapes do not conform."""


class NotScalarLoss(DereverbError):
    """Backward pass requires a scalar root node."""


class WrongFrameCount(DereverbError):
    """Model input does not have the frame count its layer stack closes over."""


# --- training ---
class KindMismatch(DereverbError):
    """Checkpoint was produced by a different model kind."""


class NonFiniteLoss(DereverbError):
    """A loss component became NaN or infinite."""


# --- evaluation ---
class ZeroEnergy(DereverbError):
    """Decay curve undefined for an all-zero impulse response."""


class InsufficientDecay(DereverbError):
    """Decay curve never falls far enough to fit a slope."""
