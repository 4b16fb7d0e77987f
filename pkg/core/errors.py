class NrolError(Exception):
    """Base class for every failure raised by the lattice simulation."""


class ConfigError(NrolError):
    pass


class InvalidInputError(NrolError, ValueError):
    pass


class ScanResolutionError(NrolError):
    pass


class TrajectoryError(NrolError):
    """A trajectory produced a non-finite phase-space coordinate."""

    def __init__(self, atom_index, message):
        super().__init__(f"atom {atom_index}: {message}")
        self.atom_index = atom_index


class TimeStepRefinement(NrolError):
    """Raised by the stepper when the one-jump-per-step guard is violated.

    Carries the offending multiple-jump probability so the run owner can
    restart the whole ensemble with a smaller step.
    """

    def __init__(self, probability, dt):
        super().__init__(f"multiple-jump probability {probability:.3g} at dt={dt:.4g}")
        self.probability = probability
        self.dt = dt


class DegenerateInputError(NrolError, ValueError):
    pass


class InvalidMeasurementError(NrolError, ValueError):
    pass


class EmptyFieldOfViewError(NrolError):
    pass


class RankDeficientError(NrolError):
    pass


class SnapshotError(NrolError):
    pass


class RunInterrupted(NrolError):
    """Workers were stopped before every chunk was propagated."""
