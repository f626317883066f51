"""Exception types shared across the toolkit."""


class LeafnetError(Exception):
    """Base class for every error raised by leafnet."""


# tensor core
class ShapeMismatch(LeafnetError):
    pass


class InvalidAxis(LeafnetError):
    pass


class NotScalar(LeafnetError):
    pass


class DetachedTape(LeafnetError):
    pass


class NonFinite(LeafnetError):
    pass


# layers
class KernelLargerThanInput(LeafnetError):
    pass


class DegenerateBatch(LeafnetError):
    pass


class LabelOutOfRange(LeafnetError):
    pass


# model assembly
class InputTooSmall(LeafnetError):
    pass


class AlreadyHasHead(LeafnetError):
    pass


class KOutOfRange(LeafnetError):
    pass


# optimizer
class MissingGradient(LeafnetError):
    pass


# training / data
class EmptyDataset(LeafnetError):
    pass


class ClassTooSmall(LeafnetError):
    pass


class NonFiniteLoss(LeafnetError):
    pass


class DuplicateClassName(LeafnetError):
    pass


class DecodeFailure(LeafnetError):
    pass


class UnsupportedFormat(LeafnetError):
    pass


# checkpoint files
class IoFailure(LeafnetError):
    pass


class BadMagic(LeafnetError):
    pass


class VersionMismatch(LeafnetError):
    pass


class ChecksumMismatch(LeafnetError):
    pass


class ShapeMismatchOnLoad(LeafnetError):
    pass


# metrics
class EmptyMatrix(LeafnetError):
    pass


class AllOneClass(LeafnetError):
    pass


class SchemaMismatch(LeafnetError):
    pass
