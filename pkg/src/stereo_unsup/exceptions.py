"""Exception hierarchy. ``exit_code`` maps onto the CLI's process exit status."""


class StereoError(Exception):
    exit_code = 2


class ImageReadError(StereoError):
    """File missing, truncated or not a PNG/PGM/PFM."""


class UnsupportedBitDepthError(StereoError):
    """Image decoded fine but is not 8- or 16-bit."""


class DimensionMismatchError(StereoError, ValueError):
    pass


class InvalidInputError(StereoError, ValueError):
    pass


class DivergenceError(StereoError, FloatingPointError):
    """Loss became non-finite during refinement."""

    exit_code = 3

    def __init__(self, level, step, value):
        self.level = level
        self.step = step
        self.value = value
        super().__init__(f"loss diverged at level {level}, step {step} (value={value!r})")


class SingleClassError(StereoError, ValueError):
    """Training labels contain only one class, BCE is degenerate."""


class ManifestError(StereoError):
    def __init__(self, message, path=None):
        self.path = path
        super().__init__(message)
