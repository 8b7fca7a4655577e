"""Exception hierarchy shared by every afd module."""


class AfdError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(AfdError, ValueError):
    pass


class DomainError(AfdError, ValueError):
    """An operation was asked to leave its mathematical domain (sqrt < 0, x / 0, ...)."""


class InvalidAxis(AfdError, ValueError):
    pass


class NotScalar(AfdError, ValueError):
    pass


class DetachedTensor(AfdError, ValueError):
    """backward() was called on a tensor that is not recorded on any tape."""


class EmptyRegion(AfdError, ValueError):
    pass


class BoxOutOfBounds(AfdError, ValueError):
    pass


class IndivisibleShape(AfdError, ValueError):
    pass


class DegenerateBatch(AfdError, ValueError):
    pass


class InvalidBox(AfdError, ValueError):
    pass


class NoSampledAnchors(AfdError, ValueError):
    pass


class NonFiniteComponent(AfdError, ValueError):
    pass


class NoGroundTruth(AfdError, ValueError):
    pass


class ConfigError(AfdError, ValueError):
    pass


class CheckpointMismatch(AfdError, ValueError):
    pass


class GradCheckFailure(AfdError, AssertionError):
    pass
