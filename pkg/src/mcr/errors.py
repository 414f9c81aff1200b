"""Exception hierarchy shared by every mcr module."""


class MCRError(Exception):
    """Base class for all mcr errors."""


class InputError(MCRError, ValueError):
    """Malformed argument: wrong shape, dimension or empty input."""


class FormatError(MCRError):
    """On-disk data is missing a required file or cannot be parsed."""


class IntegrityError(MCRError):
    """On-disk data is parseable but internally inconsistent."""


class BoundsError(MCRError, IndexError):
    """A timestep lies outside the valid window."""


class SpecError(MCRError, ValueError):
    """A configuration object violates its own invariants."""


class InsufficientLengthError(MCRError, ValueError):
    """Trajectory too short for the requested sampling."""


class DatasetError(MCRError):
    """No trajectory in the dataset can serve the request."""


class ConfigError(MCRError):
    """Run configuration is invalid (unknown keys, bad values, missing paths)."""


class UndefinedCorrelationError(MCRError, ValueError):
    """Pearson correlation is undefined for constant input."""


class EpisodeFinishedError(MCRError, RuntimeError):
    """step() was called on an episode that already ended."""


class UnsupportedBackboneError(MCRError, TypeError):
    """The encoder does not expose a convolutional feature map."""
