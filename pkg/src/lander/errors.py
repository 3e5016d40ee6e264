"""Exception types raised across the package."""


class LanderError(Exception):
    """Base class for all package-specific errors."""


# data pipeline
class IndivisibleClassesError(LanderError):
    pass


# LTE pool
class MissingClassNameError(LanderError):
    pass


class EmbedderUnavailableError(LanderError):
    pass


class UnknownLabelError(LanderError):
    pass


class SingleClassError(LanderError):
    pass


# model zoo
class UnknownArchError(LanderError):
    pass


class ShrinkingHeadError(LanderError):
    pass


class BadShapeError(LanderError):
    pass


# losses
class DimMismatchError(LanderError):
    pass


class LayerMismatchError(LanderError):
    pass


class InvalidTaskOneError(LanderError):
    pass


# client trainer
class HeadTooNarrowError(LanderError):
    pass


class MissingAnchorError(LanderError):
    pass


class BothEmptyError(LanderError):
    pass


# generation
class NoPreviousClassesError(LanderError):
    pass


class NonFiniteLossError(LanderError):
    pass


class EmptyMemoryError(LanderError):
    pass


# orchestrator
class ShapeMismatchError(LanderError):
    pass


class AllZeroWeightsError(LanderError):
    pass


class RevokedShardError(LanderError):
    pass


# metrics
class EmptySplitError(LanderError):
    pass


class SingleTaskError(LanderError):
    pass


# config / CLI
class ParseError(LanderError):
    pass


class UnknownKeyError(LanderError):
    pass


class InvalidValueError(LanderError):
    pass
