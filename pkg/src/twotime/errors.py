"""Exception types shared by the twotime modules."""


class TwoTimeError(Exception):
    """Base class for all package errors."""


class PreconditionError(TwoTimeError, ValueError):
    """An input violates a documented precondition."""


class GridTooCoarse(PreconditionError):
    pass


class SupportOverflow(TwoTimeError):
    """Probability mass reaches the periodic boundary of the grid."""


class ResolutionBelowGrid(PreconditionError):
    pass


class OutOfRange(PreconditionError):
    pass


class AlignmentError(PreconditionError):
    """A sample set boundary does not sit on the cell lattice."""


class ZeroWeightOutcome(TwoTimeError):
    """Collapse onto an outcome with numerically zero probability."""


class InternalInconsistency(TwoTimeError):
    """Two independent evaluations of the same quantity disagree."""


class PartitionMismatch(TwoTimeError, ValueError):
    pass


class InsufficientData(TwoTimeError, ValueError):
    pass
