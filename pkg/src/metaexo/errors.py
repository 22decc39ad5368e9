"""Exception hierarchy shared by every metaexo module."""


class MetaExoError(Exception):
    """Base class for all errors raised by metaexo."""


# kinematics
class DegenerateBone(MetaExoError, ValueError):
    pass


class TopologyMismatch(MetaExoError, ValueError):
    pass


class NonConvergence(MetaExoError, RuntimeError):
    """Raised by strict IK solves; ``result`` holds the best iterate."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class InvalidSkeleton(MetaExoError, ValueError):
    pass


# dataset
class TooShort(MetaExoError, ValueError):
    pass


class TooFewTrajectories(MetaExoError, ValueError):
    pass


class BadParams(MetaExoError, ValueError):
    pass


class ZeroScale(MetaExoError, ValueError):
    pass


# autodiff
class ShapeMismatch(MetaExoError, ValueError):
    pass


class NaNDetected(MetaExoError, FloatingPointError):
    pass


class CheckpointError(MetaExoError, ValueError):
    pass


# simcontrol
class Divergence(MetaExoError, RuntimeError):
    pass


class NonPositiveInertia(MetaExoError, ValueError):
    pass


class LyapunovViolation(MetaExoError, AssertionError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


# cli / config
class ConfigError(MetaExoError, ValueError):
    pass
