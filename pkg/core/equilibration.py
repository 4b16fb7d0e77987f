import math
from collections import deque
from dataclasses import dataclass

import numpy as np


class RollingAverage:
    def __init__(self, window_size=5):
        self.window = deque(maxlen=window_size)

    def update(self, value):
        self.window.append(value)
        return np.mean(self.window, axis=0)


@dataclass(frozen=True)
class DriftReport:
    first: float
    second: float
    z_score: float
    drifted: bool


def kinetic_drift(first_half, second_half, threshold=2.0):
    """
    Compare per-atom mean kinetic energies over the two halves of the
    averaging window. The difference is judged against its inter-atom
    standard error; |z| > threshold marks a run that had not reached
    steady state.
    """
    first_half = np.asarray(first_half, dtype=float)
    second_half = np.asarray(second_half, dtype=float)
    diff = second_half - first_half
    n = diff.size
    if n < 2:
        return DriftReport(float(first_half.mean()), float(second_half.mean()), 0.0, False)
    err = np.std(diff, ddof=1) / math.sqrt(n)
    z = float(np.mean(diff) / err) if err > 0 else 0.0
    return DriftReport(
        first=float(first_half.mean()),
        second=float(second_half.mean()),
        z_score=z,
        drifted=abs(z) > threshold,
    )


class EquilibrationMonitor:
    """Smoothed kinetic-energy trace of one chunk, for progress logs."""

    def __init__(self, depth, window_size=5):
        self.depth = depth
        self.trace = RollingAverage(window_size=window_size)
        self.last = None

    def update(self, kinetic):
        self.last = float(self.trace.update(float(kinetic)))
        return self.last

    @property
    def fraction_of_depth(self):
        if self.last is None or self.depth == 0:
            return float("nan")
        return self.last / self.depth
