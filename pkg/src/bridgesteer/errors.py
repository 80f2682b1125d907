"""Exception hierarchy shared by all bridgesteer modules."""


class BridgeSteerError(Exception):
    """Base class for every error raised by this package."""


class GridTooSmall(BridgeSteerError, ValueError):
    pass


class InvalidGrid(BridgeSteerError, ValueError):
    pass


class InvalidField(BridgeSteerError, ValueError):
    pass


class ZeroAmplitude(BridgeSteerError, ValueError):
    pass


class AmplitudeOverflow(BridgeSteerError, OverflowError):
    pass


class NonpositiveDensity(BridgeSteerError, ValueError):
    pass


class NonpositivePhi(BridgeSteerError, ValueError):
    pass


class DegenerateDenominator(BridgeSteerError, ZeroDivisionError):
    pass


class SchemeInstability(BridgeSteerError, FloatingPointError):
    pass


class NoConvergence(BridgeSteerError, RuntimeError):
    """Fortet iteration exhausted its budget.

    ``history`` holds the per-iteration ``(err_t0, err_t1)`` pairs.
    """

    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)


class InvalidDensity(BridgeSteerError, ValueError):
    pass


class DriftBlowup(BridgeSteerError, FloatingPointError):
    pass


class DomainExit(BridgeSteerError, RuntimeError):
    pass


class SliceNotSaved(BridgeSteerError, KeyError):
    pass


class ConfigError(BridgeSteerError, ValueError):
    pass
