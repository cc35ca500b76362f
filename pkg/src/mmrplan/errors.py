"""Exception types shared across the planning pipeline."""


class PlanningError(Exception):
    """Base class for planner failures that are not caller bugs."""


class NoPathError(PlanningError):
    """Visibility graph is disconnected between start and goal."""


class InfeasibleEndpointError(PlanningError):
    """Start or goal is covered by the dilated obstacle map."""


class CorridorGapError(PlanningError):
    """Consecutive corridors do not overlap along the path."""


class DegenerateFitError(PlanningError):
    """Ellipse minor-axis fit is unsolvable for the given touch point."""


class EmptyResultError(PlanningError):
    """A clipping operation produced an empty region."""


class SolverFailure(PlanningError):
    """NLP solve did not reach feasibility within the iteration budget.

    Carries the best iterate found and a violation report so callers can
    inspect or fall back.
    """

    def __init__(self, message, best=None, violations=None):
        super().__init__(message)
        self.best = best
        self.violations = violations
