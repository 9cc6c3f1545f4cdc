"""Exception hierarchy shared by every tcleak module."""


class TcleakError(Exception):
    """Base class for all errors raised by tcleak."""


class TargetOutOfRange(TcleakError, IndexError):
    pass


class EmptySet(TcleakError, ValueError):
    pass


class SiteOutOfRange(TcleakError, ValueError):
    pass


class RateMismatch(TcleakError, ValueError):
    pass


class NonpositiveWavelength(TcleakError, ValueError):
    pass


class BadMagic(TcleakError, ValueError):
    pass


class VersionUnsupported(TcleakError, ValueError):
    pass


class TruncatedFile(TcleakError, ValueError):
    pass


class DimMismatch(TcleakError, ValueError):
    pass


class WindowTooLarge(TcleakError, ValueError):
    pass


class EmptyGroup(TcleakError, ValueError):
    pass


class OffsetTooLarge(TcleakError, ValueError):
    pass


class UnknownBaseline(TcleakError, ValueError):
    """An accumulator value the prediction depends on cannot be computed."""


class InsufficientKnowledge(TcleakError, ValueError):
    """Neither the known-weights nor the fixed-s2 precondition holds."""


class BadRange(TcleakError, ValueError):
    pass


class TruthNotInSpace(TcleakError, KeyError):
    pass


class FewerThanTwoSites(TcleakError, ValueError):
    pass


class AllZeroBlock(TcleakError, ValueError):
    pass


class SchemaMismatch(TcleakError, ValueError):
    pass
