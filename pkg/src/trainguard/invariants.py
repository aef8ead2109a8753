"""Runtime checks of the controller's safety guarantees.

The monitor keeps its own copy of the last accepted state and its own
reference recurrence, and re-evaluates the probe itself, so a bug in the
controller's bookkeeping shows up as a violation instead of being checked
against itself.
"""
from __future__ import annotations

import hashlib

import numpy as np

from .controller import Decision, StabilityController, StepRecord
from .metrics import RunMetrics, Violation
from .optimizers import OptimizerState, serialize_state

REL_SLACK = 1e-12

BOUNDED_DEVIATION = "bounded_deviation"
ONE_STEP_RECOVERY = "one_step_recovery"
SAFETY_ENVELOPE = "safety_envelope"
FREEZE_ON_REJECT = "freeze_on_reject"
REFERENCE_CONVEXITY = "reference_convexity"
PAIRED_PREFIX = "paired_prefix"
PROBE_ACCOUNTING = "probe_accounting"

ALL_INVARIANTS = (BOUNDED_DEVIATION, ONE_STEP_RECOVERY, SAFETY_ENVELOPE, FREEZE_ON_REJECT,
                  REFERENCE_CONVEXITY, PAIRED_PREFIX, PROBE_ACCOUNTING)


def leq(lhs: float, rhs: float) -> bool:
    """``lhs <= rhs`` up to relative rounding slack."""
    return lhs <= rhs + REL_SLACK * max(1.0, abs(rhs))


def digest(params: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(params, dtype="<f8").tobytes()).hexdigest()


class InvariantMonitor:
    def __init__(self, controller: StabilityController, params0: np.ndarray,
                 opt_state0: OptimizerState, seed_index: int = 0):
        self.controller = controller
        self.seed_index = seed_index
        self.epsilon = controller.config.epsilon
        self.alpha = controller.config.alpha
        self.every_step = controller.config.probe_interval == 1
        y0 = float(controller.probe(params0))
        self.y0 = y0
        self.y_hat = y0
        self.safe_params = params0.tobytes()
        self.safe_state = serialize_state(opt_state0)
        self.safe_y = y0
        self.accepted = [y0]
        self.trajectory_max = y0
        self.violations: list[Violation] = []

    def _flag(self, name: str, step: int, detail: str) -> None:
        self.violations.append(Violation(name, self.seed_index, step, detail))

    def observe(self, record: StepRecord, y_hat_before: float, new_params: np.ndarray,
                new_state: OptimizerState) -> None:
        t = record.step
        if record.decision is Decision.SKIPPED:
            return
        y_next = float(self.controller.probe(new_params))

        if record.decision is Decision.ACCEPT:
            if not leq(y_next, self.y_hat + self.epsilon):
                self._flag(BOUNDED_DEVIATION, t, f"y={y_next!r} > y_hat+eps={self.y_hat + self.epsilon!r}")
            self.y_hat = (1.0 - self.alpha) * self.y_hat + self.alpha * y_next
            self.safe_params = new_params.tobytes()
            self.safe_state = serialize_state(new_state)
            self.safe_y = y_next
            self.accepted.append(y_next)
        else:
            if new_params.tobytes() != self.safe_params:
                self._flag(ONE_STEP_RECOVERY, t, "restored params differ from last accepted params")
            elif serialize_state(new_state) != self.safe_state:
                self._flag(ONE_STEP_RECOVERY, t, "restored optimizer state differs from last accepted state")
            elif y_next != self.safe_y:
                self._flag(ONE_STEP_RECOVERY, t, "probe value changed across a rollback")
            if self.controller.y_hat != y_hat_before:
                self._flag(FREEZE_ON_REJECT, t, f"reference moved {y_hat_before!r} -> {self.controller.y_hat!r}")

        y_hat_now = self.controller.y_hat
        if not (leq(min(self.accepted), y_hat_now) and leq(y_hat_now, max(self.accepted))):
            self._flag(REFERENCE_CONVEXITY, t, f"y_hat={y_hat_now!r} outside accepted range")

        if self.every_step:
            if not leq(y_next, self.trajectory_max + self.epsilon):
                self._flag(SAFETY_ENVELOPE, t, f"y={y_next!r} exceeds running max + eps")
            self.trajectory_max = max(self.trajectory_max, y_next)
            if not leq(self.trajectory_max, self.y0 + (t + 1) * self.epsilon):
                self._flag(SAFETY_ENVELOPE, t, f"running max {self.trajectory_max!r} exceeds y0 + (t+1)eps")

    def check_probe_count(self, steps: int) -> None:
        expected = -(-steps // self.controller.config.probe_interval) + 1
        if self.controller.probe_evaluations != expected:
            self._flag(PROBE_ACCOUNTING, steps,
                       f"{self.controller.probe_evaluations} probe evaluations, expected {expected}")


def paired_prefix_violations(baseline: RunMetrics, controlled: RunMetrics) -> list[Violation]:
    """Baseline and controlled parameters must match bit-for-bit up to the
    first step the controller changed anything."""
    if baseline.param_digests is None or controlled.param_digests is None:
        raise ValueError("runs were not recorded with parameter digests")
    first = next((t for t, d in enumerate(controlled.decisions) if d == "Rollback"), controlled.steps)
    out = []
    # digests[0] is the initial state; digests[t + 1] follows step t
    for k in range(first + 1):
        if baseline.param_digests[k] != controlled.param_digests[k]:
            out.append(Violation(PAIRED_PREFIX, controlled.seed_index, k - 1,
                                 "baseline and controlled diverged before any rollback"))
            break
    return out


def envelope_violations(run: RunMetrics, epsilon: float) -> list[Violation]:
    """Re-check the cumulative envelope from a logged probe-loss series."""
    out = []
    running = run.y0
    for t, y in enumerate(run.probe_loss):
        y = float(y)
        if not leq(y, running + epsilon):
            out.append(Violation(SAFETY_ENVELOPE, run.seed_index, t, "one-step envelope"))
        running = max(running, y)
        if not leq(running, run.y0 + (t + 1) * epsilon):
            out.append(Violation(SAFETY_ENVELOPE, run.seed_index, t, "cumulative envelope"))
    return out
