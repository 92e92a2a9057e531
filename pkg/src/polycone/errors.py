"""Exception types raised by the geometry, dynamics, barrier and filter layers."""


class PolyConeError(Exception):
    """Base class for all library errors."""


class InvalidPolygon(PolyConeError, ValueError):
    """Vertex data does not describe a usable polygon."""


class EgoInsidePolygon(PolyConeError):
    """The ego body center is inside (or on the boundary of) an obstacle.

    The cone construction is undefined there; the vehicle has already collided.
    """

    def __init__(self, message="ego center is inside the polygon", obstacle_index=None):
        super().__init__(message)
        self.obstacle_index = obstacle_index


class EgoInsideVolume(EgoInsidePolygon):
    """3-D analog of :class:`EgoInsidePolygon` for extruded obstacles."""


class DegenerateCone(PolyConeError):
    """The two extended tangent vertices coincide."""


class SingularAttitude(PolyConeError):
    """Pitch is too close to +-pi/2 for the Euler-rate map to be inverted."""


class NonFiniteState(PolyConeError, FloatingPointError):
    """Integration produced a NaN or infinite state component."""


class VanishingRelativeVelocity(PolyConeError):
    """||v_rel|| is below the threshold where L_g h is defined."""


class InsideVirtualObstacle(PolyConeError):
    """C3BF baseline: the ego lies inside the circumscribed virtual circle."""

    def __init__(self, message="ego inside virtual obstacle", obstacle_index=None):
        super().__init__(message)
        self.obstacle_index = obstacle_index


class ZeroGradient(PolyConeError):
    """A violated constraint has (numerically) zero L_g h."""


class Infeasible(PolyConeError):
    """The QP constraint set is empty.

    ``most_violated`` is the index of the constraint row with the largest
    violation at the least-violation point.
    """

    def __init__(self, message="QP is infeasible", most_violated=None):
        super().__init__(message)
        self.most_violated = most_violated


class MaxIterations(PolyConeError):
    """The active-set loop did not terminate."""


class ScenarioError(PolyConeError, ValueError):
    """A scenario file could not be parsed or validated."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
