"""Exception types shared across the package."""


class WoundcareError(Exception):
    """Base class for all package-specific errors."""


# --- imaging ---------------------------------------------------------------

class MalformedImage(WoundcareError):
    """Payload could not be decoded as an image."""


class UnsupportedFormat(WoundcareError):
    """Decodable image in a format other than JPEG or PNG."""


class EmptyImage(WoundcareError):
    """Image with a zero dimension."""


class ImageTooSmall(WoundcareError):
    """Image too small for the requested tile grid."""


class ShapeMismatch(WoundcareError):
    """Array shape does not match the expected input shape."""


# --- dataset ---------------------------------------------------------------

class ManifestParseError(WoundcareError):
    """Manifest file violates the CSV schema.

    Carries the 1-based line number of the offending row.
    """

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DuplicatePath(WoundcareError):
    """The same image path appears twice in one manifest."""


class InvalidRatio(WoundcareError):
    """Split ratio outside (0, 1)."""


# --- model -----------------------------------------------------------------

class WeightsUnavailable(WoundcareError):
    """Pretrained backbone weights could not be loaded."""


class CorruptBundle(WoundcareError):
    """Model bundle file is truncated or otherwise unreadable."""


# --- training --------------------------------------------------------------

class NonFiniteLoss(WoundcareError):
    """Training loss became NaN or infinite.

    Identifies the batch on which the loss diverged.
    """

    def __init__(self, phase: int, epoch: int, batch: int):
        super().__init__(
            f"non-finite loss in phase {phase}, epoch {epoch}, batch {batch}"
        )
        self.phase = phase
        self.epoch = epoch
        self.batch = batch


# --- ensemble --------------------------------------------------------------

class WrongArity(WoundcareError):
    """A 3-member vote received a different number of votes."""


# --- metrics ---------------------------------------------------------------

class LengthMismatch(WoundcareError):
    """Paired sequences of different lengths."""


class EmptySample(WoundcareError):
    """Metrics requested over zero samples."""


class DegenerateTruth(WoundcareError):
    """ROC analysis requires at least one positive and one negative."""
