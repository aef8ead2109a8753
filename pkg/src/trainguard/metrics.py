"""Per-run series, summaries, cross-seed aggregation and diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .faults import FaultSpec

RECOVERY_FACTOR = 1.1
PRE_FAULT_WINDOW = 20
SEPARATION_THRESHOLD = 5.0
SERIES = ("probe_loss", "y_hat", "innovation", "param_l2")
SUMMARIES = ("peak_probe_loss", "steps_to_recovery", "rollback_count")


@dataclass
class Violation:
    invariant: str
    seed_index: int
    step: int
    detail: str = ""


@dataclass
class RunMetrics:
    """Everything logged for one arm of one seed.

    ``probe_loss[t]`` is the probe value of the state *after* step ``t``;
    ``innovation[t]`` is the innovation of step ``t``'s proposal.
    Timings are kept apart from the data series because they are not
    reproducible.
    """

    seed_index: int
    arm: str
    probe_loss: np.ndarray
    y_hat: np.ndarray
    innovation: np.ndarray
    param_l2: np.ndarray
    decisions: list[str]
    y0: float
    fault: FaultSpec | None
    onset_step: int
    window_end: int
    probe_external: bool = True
    train_ms: np.ndarray = field(default=None, repr=False)
    probe_ms: np.ndarray = field(default=None, repr=False)
    init_probe_ms: float = 0.0
    probe_evaluations: int = 0
    param_digests: list[str] | None = field(default=None, repr=False)
    violations: list[Violation] = field(default_factory=list)
    final_snapshot: bytes | None = field(default=None, repr=False)
    decision_log: list | None = field(default=None, repr=False)

    @property
    def steps(self) -> int:
        return int(self.probe_loss.size)

    @property
    def rollback_steps(self) -> list[int]:
        return [t for t, d in enumerate(self.decisions) if d == "Rollback"]

    @property
    def rollback_count(self) -> int:
        return len(self.rollback_steps)

    @property
    def pre_fault_mean(self) -> float:
        lo = max(0, self.onset_step - PRE_FAULT_WINDOW)
        return math.fsum(self.probe_loss[lo:self.onset_step].tolist()) / max(1, self.onset_step - lo)

    @property
    def peak_probe_loss(self) -> float:
        tail = self.probe_loss[self.onset_step:] if self.fault is not None else self.probe_loss
        return float(np.max(tail)) if tail.size else math.nan

    @property
    def steps_to_recovery(self) -> float:
        """Steps after the fault window until probe loss is back within 10%
        of its pre-fault level; ``inf`` if that never happens."""
        threshold = RECOVERY_FACTOR * self.pre_fault_mean
        for t in range(self.window_end, self.steps):
            if self.probe_loss[t] <= threshold:
                return float(t - self.window_end)
        return math.inf

    @property
    def final_param_l2(self) -> float:
        return float(self.param_l2[-1])

    def summary(self) -> dict[str, object]:
        return {
            "seed_index": self.seed_index,
            "arm": self.arm,
            "y0": self.y0,
            "pre_fault_mean": self.pre_fault_mean,
            "peak_probe_loss": self.peak_probe_loss,
            "steps_to_recovery": self.steps_to_recovery,
            "rollback_count": self.rollback_count,
            "rollback_steps": self.rollback_steps,
            "final_param_l2": self.final_param_l2,
            "probe_evaluations": self.probe_evaluations,
        }


def mean_std(values) -> tuple[float, float]:
    """Population mean and standard deviation with exactly rounded sums.

    A sample mixing finite and infinite values has infinite spread; an
    all-infinite sample has undefined spread (nan).
    """
    xs = [float(v) for v in values]
    if not xs:
        raise ParameterError("cannot summarize an empty sample")
    n = len(xs)
    if any(math.isnan(x) for x in xs):
        return math.nan, math.nan
    infinite = [x for x in xs if math.isinf(x)]
    if infinite:
        mean = math.fsum(xs) if len(set(infinite)) == 1 else math.nan
        return mean, (math.nan if len(infinite) == n else math.inf)
    mean = math.fsum(xs) / n
    var = math.fsum((x - mean) ** 2 for x in xs) / n
    return mean, math.sqrt(var)


@dataclass
class AggregateStats:
    """Per-step mean/std of each series and mean/std of each summary,
    computed over exactly ``n`` runs of one arm."""

    arm: str
    n: int
    series_mean: dict[str, np.ndarray]
    series_std: dict[str, np.ndarray]
    summary_mean: dict[str, float]
    summary_std: dict[str, float]

    def summary_var(self, key: str) -> float:
        return self.summary_std[key] ** 2

    def to_dict(self) -> dict[str, object]:
        return {
            "arm": self.arm,
            "n": self.n,
            "summary_mean": self.summary_mean,
            "summary_std": self.summary_std,
            "summary_var": {k: self.summary_var(k) for k in self.summary_std},
            "series_mean": {k: v.tolist() for k, v in self.series_mean.items()},
            "series_std": {k: v.tolist() for k, v in self.series_std.items()},
        }


def aggregate(runs: list[RunMetrics], expected: int | None = None) -> AggregateStats:
    if not runs:
        raise ParameterError("no runs to aggregate")
    if expected is not None and len(runs) != expected:
        raise ParameterError(f"expected {expected} runs, got {len(runs)}")
    arms = {r.arm for r in runs}
    if len(arms) != 1:
        raise ParameterError(f"cannot aggregate across arms {sorted(arms)}")
    steps = {r.steps for r in runs}
    if len(steps) != 1:
        raise ParameterError("runs have different lengths")
    (n_steps,) = steps
    series_mean, series_std = {}, {}
    for key in SERIES:
        cols = [mean_std(getattr(r, key)[t] for r in runs) for t in range(n_steps)]
        series_mean[key] = np.array([c[0] for c in cols])
        series_std[key] = np.array([c[1] for c in cols])
    summary_mean, summary_std = {}, {}
    for key in SUMMARIES:
        summary_mean[key], summary_std[key] = mean_std(getattr(r, key) for r in runs)
    return AggregateStats(runs[0].arm, len(runs), series_mean, series_std, summary_mean, summary_std)


@dataclass
class AdmissibilityReport:
    nominal_max_abs: float
    fault_max: float | None
    separation_ratio: float | None
    externality: bool
    nominal_stability: bool
    catastrophic_sensitivity: bool | None

    @property
    def admissible(self) -> bool:
        return bool(self.externality and self.nominal_stability and self.catastrophic_sensitivity)

    def lines(self) -> list[str]:
        out = [
            f"externality: {'ok' if self.externality else 'VIOLATED (probe is the training batch)'}",
            f"nominal max |nu|: {self.nominal_max_abs:.6g}",
        ]
        if self.separation_ratio is None:
            out.append("no fault window: separation ratio undefined")
        else:
            out.append(f"fault-window max nu: {self.fault_max:.6g}")
            out.append(f"separation ratio: {self.separation_ratio:.6g} "
                       f"({'>' if self.catastrophic_sensitivity else '<='} {SEPARATION_THRESHOLD:g})")
        out.append(f"admissible: {'yes' if self.admissible else 'no'}")
        return out

    def __str__(self) -> str:
        return "\n".join(self.lines())


def admissibility_report(run: RunMetrics, fault: FaultSpec | None = None,
                         nominal_start: int = 0) -> AdmissibilityReport:
    """Check the three conditions an innovation signal needs to be useful:
    it is not the training objective, it stays bounded while training is
    healthy, and it jumps well clear of that bound when a fault hits.

    Nominal behaviour is read from steps ``[nominal_start, onset)``; skipping
    the first steps keeps the initial loss drop out of the noise estimate.
    """
    fault = run.fault if fault is None else fault
    onset = fault.onset_step if fault is not None else run.steps
    if nominal_start < 0:
        raise ParameterError("nominal_start must be >= 0")
    if onset - nominal_start < 30:
        raise ParameterError("admissibility needs at least 30 nominal steps")
    nominal = run.innovation[nominal_start:onset]
    nominal = nominal[np.isfinite(nominal)]
    nominal_max = float(np.max(np.abs(nominal))) if nominal.size else math.nan
    nominal_ok = bool(nominal.size) and math.isfinite(nominal_max)
    if fault is None or fault.duration == 0:
        return AdmissibilityReport(nominal_max, None, None, run.probe_external, nominal_ok, None)
    window = run.innovation[fault.onset_step:fault.end_step]
    fault_max = float(np.max(window)) if window.size else math.nan
    if nominal_max > 0:
        ratio = fault_max / nominal_max
    else:
        ratio = math.inf if fault_max > 0 else math.nan
    return AdmissibilityReport(nominal_max, fault_max, ratio, run.probe_external, nominal_ok,
                               bool(ratio > SEPARATION_THRESHOLD))


def overhead_ratio(probe_size: int, batch_size: int) -> float:
    """Probe cost relative to a training step, taking backward as twice forward."""
    if batch_size <= 0:
        raise ParameterError("batch_size must be positive")
    return probe_size / (3 * batch_size)


def measured_overhead(run: RunMetrics) -> float:
    """Wall-clock probe time over wall-clock forward+backward+update time."""
    if run.train_ms is None or run.probe_ms is None:
        raise ParameterError("run has no timing data")
    probe = run.init_probe_ms + math.fsum(run.probe_ms.tolist())
    train = math.fsum(run.train_ms.tolist())
    return probe / train
