"""Gradient-amplification fault windows."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class FaultSpec:
    """Multiply the gradient by ``amplification`` for steps in
    ``[onset_step, onset_step + duration)``."""

    onset_step: int = 120
    duration: int = 10
    amplification: float = 300.0

    def __post_init__(self):
        if self.onset_step < 0 or self.duration < 0:
            raise ParameterError("fault onset and duration must be non-negative")

    @property
    def end_step(self) -> int:
        return self.onset_step + self.duration

    def active(self, t: int) -> bool:
        return self.onset_step <= t < self.end_step


def apply_fault(grad: np.ndarray, t: int, fault: FaultSpec | None) -> np.ndarray:
    """Return the gradient the optimizer sees at step ``t``.

    Outside the window the input array itself is returned, unchanged.
    """
    if fault is None or not fault.active(t):
        return grad
    return fault.amplification * grad
