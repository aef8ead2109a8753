"""Accept/rollback supervision of optimizer updates.

Each step the optimizer proposes ``params + delta``. The proposal is scored
on a held-out probe, and the innovation (probe value minus a smoothed
reference of past accepted probe values) decides whether it is kept. A
rejected proposal is replaced by an exact copy of the last accepted
parameters and optimizer state.
"""
from __future__ import annotations

import csv
import math
import struct
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import DimensionError, FormatError, InitializationError, ParameterError
from .numerics import axpy, l2_norm
from .optimizers import (
    OptimizerConfig,
    OptimizerState,
    _decode_state,
    propose_update,
    serialize_state,
)

ProbeFn = Callable[[np.ndarray], float]

_SNAP_MAGIC = b"SNAP"
_SNAP_VERSION = 1
_SNAP_TAIL = struct.Struct("<dQ")

DECISION_LOG_COLUMNS = ("step", "y_prop", "y_hat", "nu", "decision", "param_l2", "probe_ms")


class Decision(str, Enum):
    ACCEPT = "Accept"
    ROLLBACK = "Rollback"
    SKIPPED = "Skipped"


@dataclass(frozen=True)
class ControllerConfig:
    epsilon: float
    alpha: float = 0.1
    probe_interval: int = 1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0.0 < self.alpha < 1.0:
            raise ParameterError(f"alpha must lie in (0, 1), got {self.alpha}")
        if int(self.probe_interval) != self.probe_interval or self.probe_interval < 1:
            raise ParameterError(f"probe_interval must be an integer >= 1, got {self.probe_interval}")


@dataclass(frozen=True)
class StepRecord:
    step: int
    y_prop: float
    y_hat: float
    nu: float
    decision: Decision
    param_l2: float
    probe_ms: float
    update_ms: float = 0.0


def innovation(y_prop: float, y_hat: float) -> float:
    """``y_prop - y_hat``; a non-finite probe value maps to ``+inf``."""
    if not math.isfinite(y_prop):
        return math.inf
    return y_prop - y_hat


def decide(nu: float, epsilon: float) -> Decision:
    return Decision.ACCEPT if nu <= epsilon else Decision.ROLLBACK


@dataclass(frozen=True, eq=False)
class Snapshot:
    params: np.ndarray
    opt_state: OptimizerState
    y_hat: float
    step_taken_at: int

    def to_bytes(self) -> bytes:
        """``SNAP`` | version u8 | optimizer state | params f64 | y_hat f64 | step u64."""
        if self.params.shape != (self.opt_state.dim,):
            raise DimensionError("snapshot params and optimizer state disagree in length")
        return b"".join((
            _SNAP_MAGIC,
            bytes([_SNAP_VERSION]),
            serialize_state(self.opt_state),
            self.params.astype("<f8", copy=False).tobytes(),
            _SNAP_TAIL.pack(self.y_hat, self.step_taken_at),
        ))

    @classmethod
    def from_bytes(cls, data: bytes) -> Snapshot:
        if data[:4] != _SNAP_MAGIC:
            raise FormatError(f"bad snapshot magic {data[:4]!r}")
        if len(data) < 5 or data[4] != _SNAP_VERSION:
            raise FormatError("unsupported snapshot version")
        state, pos = _decode_state(data, 5)
        end = pos + state.dim * 8 + _SNAP_TAIL.size
        if len(data) != end:
            raise FormatError(f"snapshot length {len(data)} does not match expected {end}")
        params = np.frombuffer(data, dtype="<f8", count=state.dim, offset=pos).astype(np.float64)
        y_hat, step = _SNAP_TAIL.unpack_from(data, pos + state.dim * 8)
        return cls(params, state, y_hat, step)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> Snapshot:
        return cls.from_bytes(Path(path).read_bytes())


class SnapshotBuffer:
    """Holds exactly one safe state.

    With ``background=True`` the copy in ``store`` runs on a helper thread.
    Every read waits for any pending copy first, so a reader never sees a
    half-written snapshot. ``restore_hook`` exists for fault-seeded tests: it
    is applied to restored params and lets a test corrupt a restore on purpose.
    """

    def __init__(self, background: bool = False,
                 restore_hook: Callable[[np.ndarray], np.ndarray] | None = None):
        self._snapshot: Snapshot | None = None
        self._pending: Future | None = None
        self.background = background
        self._pool = ThreadPoolExecutor(max_workers=1) if background else None
        self.restore_hook = restore_hook

    @staticmethod
    def _copy(params: np.ndarray, opt_state: OptimizerState, y_hat: float, step: int) -> Snapshot:
        p = np.array(params, dtype=np.float64, copy=True)
        p.flags.writeable = False
        # OptimizerState buffers are read-only, so sharing them is safe.
        return Snapshot(p, opt_state, float(y_hat), int(step))

    def store(self, params: np.ndarray, opt_state: OptimizerState, y_hat: float, step: int) -> None:
        if self._pool is None:
            self._snapshot = self._copy(params, opt_state, y_hat, step)
            return
        self._barrier()
        self._pending = self._pool.submit(self._copy, params, opt_state, y_hat, step)

    def _barrier(self) -> None:
        if self._pending is not None:
            self._snapshot = self._pending.result()
            self._pending = None

    def current(self) -> Snapshot:
        self._barrier()
        if self._snapshot is None:
            raise RuntimeError("no snapshot stored")
        return self._snapshot

    def restore(self) -> tuple[np.ndarray, OptimizerState]:
        snap = self.current()
        params = snap.params.copy()
        if self.restore_hook is not None:
            params = self.restore_hook(params)
        return params, snap.opt_state

    def close(self) -> None:
        self._barrier()
        if self._pool is not None:
            self._pool.shutdown()


class StabilityController:
    """Runs one training trajectory through the accept/rollback rule.

    The controller owns the reference signal and the snapshot; the caller
    owns the training loop and passes in each step's gradient.
    """

    def __init__(self, params0: np.ndarray, opt_state0: OptimizerState, probe: ProbeFn,
                 config: ControllerConfig, optimizer: OptimizerConfig, *,
                 background_snapshots: bool = False,
                 restore_hook: Callable[[np.ndarray], np.ndarray] | None = None):
        if params0.shape != (opt_state0.dim,):
            raise DimensionError(f"params {params0.shape} vs optimizer state dim {opt_state0.dim}")
        self.probe = probe
        self.config = config
        self.optimizer = optimizer
        start = time.perf_counter()
        y0 = float(probe(params0))
        self.init_probe_ms = (time.perf_counter() - start) * 1e3
        if not math.isfinite(y0):
            raise InitializationError(f"probe value at initialization is {y0}; no reference can be formed")
        self.y0 = y0
        self.y_hat = y0
        self.t = 0
        self.probe_evaluations = 1
        self.records: list[StepRecord] = []
        self.snapshots = SnapshotBuffer(background_snapshots, restore_hook)
        self.snapshots.store(params0, opt_state0, y0, 0)

    def store_snapshot(self, params: np.ndarray, opt_state: OptimizerState, y_hat: float) -> None:
        self.snapshots.store(params, opt_state, y_hat, self.t)

    def restore_snapshot(self) -> tuple[np.ndarray, OptimizerState]:
        return self.snapshots.restore()

    def is_probe_step(self, t: int) -> bool:
        return t % self.config.probe_interval == 0

    def step(self, params: np.ndarray, opt_state: OptimizerState,
             grad: np.ndarray) -> tuple[np.ndarray, OptimizerState, StepRecord]:
        t = self.t
        start = time.perf_counter()
        delta, proposed_state = propose_update(opt_state, self.optimizer, params, grad)
        proposal = axpy(1.0, delta, params)
        update_ms = (time.perf_counter() - start) * 1e3

        if not self.is_probe_step(t):
            record = StepRecord(t, math.nan, self.y_hat, math.nan, Decision.SKIPPED,
                                l2_norm(proposal), 0.0, update_ms)
            return self._finish(proposal, proposed_state, record)

        start = time.perf_counter()
        y_prop = float(self.probe(proposal))
        probe_ms = (time.perf_counter() - start) * 1e3
        self.probe_evaluations += 1

        y_hat = self.y_hat
        nu = innovation(y_prop, y_hat)
        decision = decide(nu, self.config.epsilon)
        if decision is Decision.ACCEPT:
            a = self.config.alpha
            # y(theta_{t+1}) is y_prop: the accepted state is the proposal itself.
            self.y_hat = (1.0 - a) * y_hat + a * y_prop
            if self.snapshots.background:
                proposal.flags.writeable = False
            self.snapshots.store(proposal, proposed_state, self.y_hat, t + 1)
            new_params, new_state = proposal, proposed_state
        else:
            new_params, new_state = self.snapshots.restore()
        record = StepRecord(t, y_prop, y_hat, nu, decision, l2_norm(new_params), probe_ms, update_ms)
        return self._finish(new_params, new_state, record)

    def _finish(self, params, state, record):
        self.records.append(record)
        self.t += 1
        return params, state, record

    def close(self) -> None:
        self.snapshots.close()


def write_decision_log(records: Iterable[StepRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DECISION_LOG_COLUMNS)
        for r in records:
            writer.writerow([r.step, repr(r.y_prop), repr(r.y_hat), repr(r.nu),
                             r.decision.value, repr(r.param_l2), repr(r.probe_ms)])


def read_decision_log(path: str | Path) -> list[StepRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [StepRecord(int(r["step"]), float(r["y_prop"]), float(r["y_hat"]), float(r["nu"]),
                       Decision(r["decision"]), float(r["param_l2"]), float(r["probe_ms"]))
            for r in rows]
