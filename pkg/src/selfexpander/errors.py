"""Exception hierarchy for the selfexpander package.

Numerical failures raise subclasses of :class:`NumericalError`; bad inputs
raise subclasses of :class:`InputError`.  The CLI maps the former to exit
code 1 and the latter to exit code 2.
"""


class SelfExpanderError(Exception):
    """Base class for all package errors."""


class InputError(SelfExpanderError):
    """Invalid argument or configuration."""


class NumericalError(SelfExpanderError):
    """A computation failed or a verified property did not hold."""


# --- geometry
class NonFiniteGeometry(NumericalError):
    pass


class DegenerateSpacing(InputError):
    pass


class OverflowRisk(NumericalError):
    pass


class BadRadii(InputError):
    pass


class ConeMismatch(InputError):
    pass


class Unpaired(NumericalError):
    pass


class NotOrdered(NumericalError):
    pass


class GridTooCoarse(NumericalError):
    pass


# --- shooting / ODE
class BlowUp(NumericalError):
    pass


class AxisCollision(NumericalError):
    pass


class NoBracket(NumericalError):
    pass


class Unresolved(NumericalError):
    pass


class TailTooShort(InputError):
    pass


class Diverged(NumericalError):
    pass


# --- spectrum
class NotStationary(InputError):
    pass


class Indefinite(NumericalError):
    pass


class TailContaminated(NumericalError):
    pass


# --- barriers
class NotStrictlyStable(InputError):
    pass


class SelfIntersection(NumericalError):
    pass


class TooThick(NumericalError):
    pass


class OrderViolation(NumericalError):
    pass


class VerificationFailed(NumericalError):
    def __init__(self, item, message=""):
        self.item = item
        super().__init__(f"domain verification failed at item {item}: {message}")


class FoldedChart(NumericalError):
    def __init__(self, sigma, message=""):
        self.sigma = sigma
        super().__init__(f"chart injectivity failed near sigma={sigma:.6g} {message}")


class NotRepresentable(NumericalError):
    pass


class ProjectionAmbiguous(NumericalError):
    pass


# --- variations
class LeftDomain(NumericalError):
    pass


class OrderFail(NumericalError):
    pass


class NonFinite(NumericalError):
    pass


# --- minmax
class ChartRange(InputError):
    pass


class StepTooLarge(NumericalError):
    pass


class MaxIter(NumericalError):
    pass


class CollapsedToBoundary(NumericalError):
    def __init__(self, which, distance, message=""):
        self.which = which
        self.distance = distance
        super().__init__(
            f"min-max candidate collapsed to {which} (hausdorff {distance:.3e}) {message}"
        )


# --- lowerbound
class FoliationGap(NumericalError):
    pass


class Stalled(NumericalError):
    pass


class NoPositiveWindow(NumericalError):
    pass


# --- cli
class MissingArtifact(InputError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing artifacts: " + ", ".join(self.missing))
