"""Exception types raised across the package."""


class RevftError(Exception):
    """Base class for every error raised by revft."""


class ShapeMismatch(RevftError, ValueError):
    pass


class PrecisionMismatch(RevftError, TypeError):
    pass


class NonFiniteError(RevftError, FloatingPointError):
    """A computation produced NaN or Inf from finite inputs."""


class ScalingDegenerate(RevftError, ValueError):
    """A coupling scale factor is too close to zero to be inverted."""


class ConfigError(RevftError, ValueError):
    pass
