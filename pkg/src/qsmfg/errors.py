"""Exception hierarchy shared by all qsmfg modules."""


class QsmfgError(Exception):
    """Base class for every error raised by the package."""


class InvalidInput(QsmfgError, ValueError):
    pass


class InvalidConfig(QsmfgError, ValueError):
    pass


class UnsupportedFamily(QsmfgError):
    pass


class GradientRadiusExceeded(QsmfgError):
    """Numeric Legendre transform found its maximiser on the |p| boundary."""


class CoercivityFailure(QsmfgError):
    """No finite gradient radius exists: the Hamiltonian is not coercive."""


class WeakKamError(QsmfgError):
    """Base class for failures of the weak KAM computations."""


class ReachabilityError(WeakKamError):
    pass


class NoConvergence(WeakKamError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class BarrierNotCritical(WeakKamError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class EmptyAubrySet(WeakKamError):
    pass


class AssumptionAViolated(WeakKamError):
    pass


class DominationFailure(WeakKamError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class DriftBlowup(QsmfgError):
    pass
