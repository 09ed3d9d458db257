"""Exception types raised across the package.

Every failure mode that callers are expected to handle gets its own class;
all of them derive from ModmaeError so coarse-grained handling stays easy.
"""


class ModmaeError(Exception):
    """Base class for all package-specific errors."""


class IoError(ModmaeError, OSError):
    """A file could not be read or written."""


class FormatError(ModmaeError):
    """A file does not conform to its expected on-disk format."""


class VersionError(FormatError):
    """A checkpoint was written by an incompatible format version."""


class UnsupportedShapeError(ModmaeError):
    """A volume is not three-dimensional."""


class UnsupportedDatatypeError(ModmaeError):
    """A volume uses a datatype code this reader does not handle."""


class DuplicateModalityError(ModmaeError):
    """Two files in one session normalize to the same modality name."""

    def __init__(self, case_id: str, modality: str):
        super().__init__(f"case {case_id!r}: duplicate modality {modality!r}")
        self.case_id = case_id
        self.modality = modality


class NotFoundError(ModmaeError, KeyError):
    """A requested case id is absent from the manifest."""


class InvalidNameError(ModmaeError, ValueError):
    """A modality name is empty after normalization."""


class UnknownModalityError(ModmaeError, KeyError):
    """Table-mode embedding lookup failed and fallback is disabled."""


class DimensionMismatchError(ModmaeError):
    """Vectors in an embedding table do not share one dimension."""


class ShapeError(ModmaeError, ValueError):
    """Array shapes are inconsistent with the operation's contract."""


class RangeError(ModmaeError, ValueError):
    """A scalar argument lies outside its documented domain."""


class EmptyBatchError(ModmaeError):
    """A batch was assembled from zero sessions."""


class EmptySessionError(ModmaeError):
    """A session has no visible tokens to encode."""


class DegenerateLossError(ModmaeError):
    """The reconstruction loss has no valid hidden voxels to average."""


class InsufficientBatchError(ModmaeError):
    """Variance/covariance terms need at least two pooled rows."""


class NonFiniteLossError(ModmaeError):
    """A loss component evaluated to NaN or infinity."""


class NonFiniteGradientError(ModmaeError):
    """A gradient tensor contains NaN or infinity; the step was aborted."""


class ConfigError(ModmaeError):
    """A run configuration is internally inconsistent or mismatched."""


class EmptyMaskError(ModmaeError):
    """A surface-distance metric was asked to measure an empty mask."""
