"""Exception types raised across the package.

Most are ``ValueError`` subclasses so callers that only care about bad input
can catch that.
"""


class SiFiSingerError(Exception):
    pass


# score parsing / encoding
class MalformedLine(SiFiSingerError, ValueError):
    pass


class LengthMismatch(SiFiSingerError, ValueError):
    pass


class NonPositiveDuration(SiFiSingerError, ValueError):
    pass


class EmptyCorpus(SiFiSingerError, ValueError):
    pass


class UnknownSymbol(SiFiSingerError, KeyError):
    pass


# signal processing
class TooShortSignal(SiFiSingerError, ValueError):
    pass


class UnsupportedRatio(SiFiSingerError, ValueError):
    pass


class WrongSampleRate(SiFiSingerError, ValueError):
    pass


class DegenerateDimension(SiFiSingerError, ValueError):
    pass


class NegativeF0(SiFiSingerError, ValueError):
    pass


class NotNormalized(SiFiSingerError, ValueError):
    pass


# model plumbing
class ShapeMismatch(SiFiSingerError, ValueError):
    pass


class FrameMisalignment(SiFiSingerError, ValueError):
    pass


class NegativeDuration(SiFiSingerError, ValueError):
    pass


class StructureMismatch(SiFiSingerError, ValueError):
    pass


class NonFiniteLoss(SiFiSingerError, FloatingPointError):
    def __init__(self, term, value=None):
        self.term = term
        super().__init__(f"non-finite loss term {term!r}" + ("" if value is None else f" ({value})"))


class CorruptCheckpoint(SiFiSingerError, IOError):
    pass


class VersionMismatch(SiFiSingerError, ValueError):
    pass


# metrics
class NoVoicedOverlap(SiFiSingerError, ValueError):
    pass


class DegenerateVariance(SiFiSingerError, ValueError):
    pass
