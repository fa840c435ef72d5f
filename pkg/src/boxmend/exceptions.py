"""Exception hierarchy for the boxmend toolkit."""


class BoxmendError(Exception):
    """Base class for every error raised by this package."""


# -- geometry ---------------------------------------------------------------

class EmptyMask(BoxmendError):
    """A mask with no set pixels cannot be converted to a box."""


class RleLengthMismatch(BoxmendError):
    """RLE counts do not sum to width*height (or sizes disagree)."""


class GammaOutOfRange(BoxmendError):
    """Mixing value outside [0, 1]."""


# -- dataset I/O ------------------------------------------------------------

class ParseError(BoxmendError):
    """File is not valid JSON."""


class SchemaError(BoxmendError):
    """JSON parsed but does not follow the COCO schema."""


class DanglingReference(BoxmendError):
    """Annotation points at a missing image or category."""


class InvalidBox(BoxmendError):
    """Annotation bbox has non-positive width or height."""


class IoError(BoxmendError):
    """Reading or writing a dataset file failed."""


class CorrespondenceError(BoxmendError):
    """Two datasets that must share annotation ids do not."""


# -- noise ------------------------------------------------------------------

class LevelOutOfRange(BoxmendError):
    """Noise level outside [0, 1]."""


# -- synthetic data ---------------------------------------------------------

class PlacementFailure(BoxmendError):
    """Could not place the requested number of objects in the frame."""


class UnknownClass(BoxmendError):
    """Class name not present in the scene taxonomy."""


# -- provider protocol ------------------------------------------------------

class ProtocolError(BoxmendError):
    """Malformed wire message, id mismatch, or wrong list arity."""


class ArityMismatch(ProtocolError):
    """Response carries the wrong number of results or scores."""


class ProviderError(BoxmendError):
    """The provider answered with an error line."""


class ProviderTimeout(ProviderError):
    """No response within the per-request timeout."""


class ChannelClosed(ProviderError):
    """Worker process exited or closed its pipes."""


# -- FMC pipeline -----------------------------------------------------------

class EmptyCandidateSet(BoxmendError):
    """No candidate left to select from (all masks empty or dropped)."""


# -- interpolation ----------------------------------------------------------

class NonFiniteInput(BoxmendError):
    """Feature vector contains NaN or infinity."""


class InsufficientData(BoxmendError):
    """Not enough training pairs to fit the mixing-value predictor."""


# -- evaluation -------------------------------------------------------------

class NoEvaluableClasses(BoxmendError):
    """mAP requested but no class has any ground-truth instance."""


class EmptyLevels(BoxmendError):
    """Robustness profile needs at least one (level, performance) pair."""
