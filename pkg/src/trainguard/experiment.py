"""Paired baseline/controlled training runs under an injected fault window."""
from __future__ import annotations

import functools
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .config import ExperimentConfig
from .controller import Decision, StabilityController, innovation
from .errors import RunError, TrainGuardError
from .faults import apply_fault
from .invariants import InvariantMonitor, digest, paired_prefix_violations
from .metrics import AggregateStats, RunMetrics, aggregate, mean_std
from .model import (
    BatchStream,
    Dataset,
    MlpSpec,
    ProbeSet,
    init_params,
    loss_and_grad,
    make_blobs,
    make_char_task,
    probe_loss,
    stratified_split,
)
from .numerics import RngStream, l2_norm
from .optimizers import init_state, propose_update

BASELINE = "baseline"
CONTROLLED = "controlled"
ARMS = (BASELINE, CONTROLLED)

# Stream ids are (purpose << 32) | seed_index, so every purpose and seed gets
# its own independent Philox key under the master seed.
_DATA, _SPLIT, _INIT, _BATCH = 1, 2, 3, 4


def _stream(cfg: ExperimentConfig, purpose: int, seed_index: int = 0) -> RngStream:
    return RngStream(cfg.seed, (purpose << 32) | seed_index)


@dataclass(frozen=True, eq=False)
class Task:
    spec: MlpSpec
    train: Dataset
    probe: ProbeSet


@functools.lru_cache(maxsize=16)
def build_task(cfg: ExperimentConfig) -> Task:
    """Data pool, training/probe split and model shape. Shared by all seeds
    of an experiment; only initialization and batch order vary per seed."""
    if cfg.task == "blobs":
        pool = make_blobs(_stream(cfg, _DATA), cfg.pool_size, cfg.blob_classes, cfg.blob_dim,
                          cfg.blob_separation)
    else:
        pool = make_char_task(cfg.phrase, cfg.window, cfg.repeats)
    train, probe = stratified_split(pool, cfg.probe_size, _stream(cfg, _SPLIT))
    spec = MlpSpec((pool.dim, cfg.hidden, pool.num_classes))
    return Task(spec, train, probe)


class _Probe:
    """``y(params)``: held-out probe loss, or (pathologically) the loss on
    the current training batch."""

    def __init__(self, task: Task, source: str):
        self.task = task
        self.source = source
        self.batch: Dataset | None = None

    def __call__(self, params: np.ndarray) -> float:
        data = self.batch if self.source == "train" else self.task.probe
        return probe_loss(params, data, self.task.spec)


def _setup(cfg: ExperimentConfig, seed_index: int):
    task = build_task(cfg)
    params = init_params(task.spec, _stream(cfg, _INIT, seed_index))
    opt = cfg.optimizer_config()
    stream = BatchStream(task.train, cfg.batch_size, _stream(cfg, _BATCH, seed_index))
    probe = _Probe(task, cfg.probe_source)
    probe.batch = stream.batch(0)
    return task, params, opt, init_state(opt, params.size), stream, probe


def _new_metrics(cfg, seed_index, arm, n, y0) -> RunMetrics:
    return RunMetrics(
        seed_index=seed_index, arm=arm,
        probe_loss=np.empty(n), y_hat=np.empty(n), innovation=np.empty(n), param_l2=np.empty(n),
        decisions=[], y0=y0, fault=cfg.fault_spec(), onset_step=cfg.fault_onset,
        window_end=cfg.fault_onset + cfg.fault_duration, probe_external=cfg.probe_source == "heldout",
        train_ms=np.zeros(n), probe_ms=np.zeros(n),
    )


def run_one(cfg: ExperimentConfig, seed_index: int, controlled: bool, *, epsilon: float | None = None,
            monitor: bool = False, digests: bool | None = None,
            restore_hook: Callable[[np.ndarray], np.ndarray] | None = None,
            background_snapshots: bool = False) -> RunMetrics:
    """Train one seed for ``cfg.total_steps`` steps.

    The baseline applies every proposed update. The controlled arm sends each
    step through a ``StabilityController``; ``monitor`` additionally checks
    the controller's guarantees at every step.
    """
    digests = monitor if digests is None else digests
    if controlled:
        return _run_controlled(cfg, seed_index, epsilon, monitor, digests, restore_hook, background_snapshots)
    return _run_baseline(cfg, seed_index, digests)


def _run_baseline(cfg, seed_index, digests) -> RunMetrics:
    task, params, opt, state, stream, probe = _setup(cfg, seed_index)
    fault = cfg.fault_spec()
    n = cfg.total_steps
    y_hat = probe(params)
    m = _new_metrics(cfg, seed_index, BASELINE, n, y_hat)
    m.param_digests = [digest(params)] if digests else None
    a = cfg.alpha
    for t in range(n):
        batch = stream.batch(t)
        start = time.perf_counter()
        _, grad = loss_and_grad(params, batch, task.spec)
        delta, state = propose_update(state, opt, params, apply_fault(grad, t, fault))
        params = params + delta
        m.train_ms[t] = (time.perf_counter() - start) * 1e3
        probe.batch = batch
        y = probe(params)
        nu = innovation(y, y_hat)
        m.probe_loss[t], m.y_hat[t], m.innovation[t] = y, y_hat, nu
        m.param_l2[t] = l2_norm(params)
        m.decisions.append(Decision.ACCEPT.value)
        if math.isfinite(y):
            y_hat = (1.0 - a) * y_hat + a * y
        if digests:
            m.param_digests.append(digest(params))
    m.probe_evaluations = 0
    return m


def _run_controlled(cfg, seed_index, epsilon, monitor, digests, restore_hook, background) -> RunMetrics:
    task, params, opt, state, stream, probe = _setup(cfg, seed_index)
    fault = cfg.fault_spec()
    n = cfg.total_steps
    ctrl = StabilityController(params, state, probe, cfg.controller_config(epsilon), opt,
                               background_snapshots=background, restore_hook=restore_hook)
    mon = InvariantMonitor(ctrl, params, state, seed_index) if monitor else None
    m = _new_metrics(cfg, seed_index, CONTROLLED, n, ctrl.y0)
    m.init_probe_ms = ctrl.init_probe_ms
    m.param_digests = [digest(params)] if digests else None
    safe_y = ctrl.y0
    try:
        for t in range(n):
            batch = stream.batch(t)
            probe.batch = batch
            start = time.perf_counter()
            _, grad = loss_and_grad(params, batch, task.spec)
            grad_ms = (time.perf_counter() - start) * 1e3
            y_hat_before = ctrl.y_hat
            params, state, rec = ctrl.step(params, state, apply_fault(grad, t, fault))
            m.train_ms[t] = grad_ms + rec.update_ms
            m.probe_ms[t] = rec.probe_ms
            if rec.decision is Decision.ACCEPT:
                safe_y = rec.y_prop
                y = rec.y_prop
            elif rec.decision is Decision.ROLLBACK:
                y = safe_y
            else:
                y = probe(params)
            m.probe_loss[t], m.y_hat[t], m.innovation[t] = y, rec.y_hat, rec.nu
            m.param_l2[t] = rec.param_l2
            m.decisions.append(rec.decision.value)
            if mon is not None:
                mon.observe(rec, y_hat_before, params, state)
            if digests:
                m.param_digests.append(digest(params))
        if mon is not None:
            mon.check_probe_count(n)
            m.violations = mon.violations
        m.probe_evaluations = ctrl.probe_evaluations
        m.final_snapshot = ctrl.snapshots.current().to_bytes()
        m.decision_log = list(ctrl.records)
    finally:
        ctrl.close()
    return m


def calibrate_epsilon(cfg: ExperimentConfig, seed_index: int = 0) -> float:
    """Threshold from a fault-free warmup: ``calibration_factor`` times the
    standard deviation of the innovations over ``calibration_steps`` steps,
    measured after ``calibration_burnin`` steps of unmeasured training."""
    warm = cfg.replace(total_steps=cfg.calibration_burnin + cfg.calibration_steps,
                       fault_enabled=False, epsilon=None)
    run = _run_baseline(warm, seed_index, digests=False)
    _, std = mean_std(run.innovation[cfg.calibration_burnin:])
    eps = cfg.calibration_factor * std
    if not (math.isfinite(eps) and eps > 0):
        raise TrainGuardError(f"calibration produced an unusable epsilon {eps!r}")
    return eps


def resolve(cfg: ExperimentConfig) -> ExperimentConfig:
    """Return ``cfg`` with epsilon filled in by calibration if it was unset."""
    if cfg.epsilon is not None:
        return cfg
    return cfg.replace(epsilon=calibrate_epsilon(cfg))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    runs: dict[str, list[RunMetrics]]
    aggregates: dict[str, AggregateStats]

    @property
    def epsilon(self) -> float:
        return self.config.epsilon

    def violations(self) -> list:
        out = [v for r in self.runs[CONTROLLED] for v in r.violations]
        if all(r.param_digests is not None for arm in ARMS for r in self.runs[arm]):
            for b, c in zip(self.runs[BASELINE], self.runs[CONTROLLED]):
                out.extend(paired_prefix_violations(b, c))
        return out


def _run_pair(cfg: ExperimentConfig, seed_index: int, monitor: bool, digests: bool, restore_hook=None):
    out = []
    for arm in ARMS:
        try:
            out.append(run_one(cfg, seed_index, arm == CONTROLLED, monitor=monitor, digests=digests,
                               restore_hook=restore_hook))
        except TrainGuardError as exc:
            raise RunError(seed_index, arm, str(exc)) from exc
        except (ArithmeticError, ValueError) as exc:
            raise RunError(seed_index, arm, repr(exc)) from exc
    return out


def run_experiment(cfg: ExperimentConfig, *, jobs: int = 1, monitor: bool = False,
                   digests: bool | None = None,
                   restore_hook: Callable[[np.ndarray], np.ndarray] | None = None) -> ExperimentResult:
    """Run ``cfg.num_seeds`` paired seeds and aggregate each arm.

    Seeds may run in worker processes; results are gathered in seed order so
    the output does not depend on scheduling. ``restore_hook`` (which must be
    picklable when ``jobs > 1``) tampers with restored parameters and exists
    only to exercise the invariant monitor.
    """
    cfg = resolve(cfg)
    digests = monitor if digests is None else digests
    seeds = range(cfg.num_seeds)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            pairs = list(pool.map(_run_pair, [cfg] * len(seeds), seeds, [monitor] * len(seeds),
                                  [digests] * len(seeds), [restore_hook] * len(seeds)))
    else:
        pairs = [_run_pair(cfg, i, monitor, digests, restore_hook) for i in seeds]
    runs = {BASELINE: [p[0] for p in pairs], CONTROLLED: [p[1] for p in pairs]}
    aggs = {arm: aggregate(runs[arm], expected=cfg.num_seeds) for arm in ARMS}
    return ExperimentResult(cfg, runs, aggs)
