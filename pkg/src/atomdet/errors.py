"""Exception types shared across the readout pipeline."""


class AtomdetError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(AtomdetError):
    """A configuration file or parameter set is invalid; message names the field."""


class WindowOutOfBounds(AtomdetError):
    """A site's kernel window falls partly outside the image (never clamped)."""


class GridDetectFailed(AtomdetError):
    """Grid geometry could not be recovered from the mean image."""

    def __init__(self, message, component_count=None, residual_rms=None):
        super().__init__(message)
        self.component_count = component_count
        self.residual_rms = residual_rms


class NoBackgroundPixels(AtomdetError):
    """The site windows tile the whole frame, leaving no background sample."""


class InsufficientBrightFrames(AtomdetError):
    """Fewer than two frames passed the occupancy prefilter for a site."""

    def __init__(self, message, site=None):
        super().__init__(message)
        self.site = site


class DegeneratePsf(AtomdetError):
    """PSF has zero energy; no projector exists."""


class NotBimodal(AtomdetError):
    """Emission samples fail the bimodality check for threshold calibration."""

    def __init__(self, message, variance_ratio=None):
        super().__init__(message)
        self.variance_ratio = variance_ratio


class SingularDesign(AtomdetError):
    """Global least-squares design matrix is rank deficient."""


class ZeroMatrixSum(AtomdetError):
    """Projector weights sum to zero; normalized emission is undefined."""


class DegenerateFit(AtomdetError):
    """Latency fit needs at least two distinct site counts."""
