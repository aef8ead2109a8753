import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from trainguard.controller import (
    ControllerConfig,
    Decision,
    Snapshot,
    SnapshotBuffer,
    StabilityController,
    decide,
    innovation,
    read_decision_log,
    write_decision_log,
)
from trainguard.errors import DimensionError, FormatError, InitializationError, ParameterError
from trainguard.optimizers import OptimizerConfig, OptimizerState, init_state, serialize_state

SGD1 = OptimizerConfig.sgd(1.0, momentum=0.0)


def first_coord(params):
    return float(params[0])


def make(y0=1.0, eps=1.0, alpha=0.1, interval=1, opt=SGD1, dim=2, **kw):
    params = np.full(dim, y0)
    state = init_state(opt, dim)
    ctrl = StabilityController(params, state, first_coord, ControllerConfig(eps, alpha, interval), opt, **kw)
    return ctrl, params, state


def toward(params, target):
    """Gradient that moves params[0] to ``target`` under SGD with lr 1."""
    g = np.zeros_like(params)
    g[0] = params[0] - target
    return g


class TestPrimitives:
    def test_innovation(self):
        assert innovation(2.0, 2.0) == 0.0
        assert innovation(3.5, 1.25) == 2.25
        assert innovation(math.nan, 1.0) == math.inf
        assert innovation(math.inf, 1.0) == math.inf
        assert innovation(-math.inf, 1.0) == math.inf

    def test_decide_boundary(self):
        assert decide(1.0, 1.0) is Decision.ACCEPT
        assert decide(1.0 + 1e-15, 1.0) is Decision.ROLLBACK
        assert decide(-5.0, 0.1) is Decision.ACCEPT
        assert decide(math.inf, 1e300) is Decision.ROLLBACK

    @pytest.mark.parametrize("kwargs", [
        dict(epsilon=0.0), dict(epsilon=-1.0), dict(epsilon=math.nan), dict(epsilon=1.0, alpha=0.0),
        dict(epsilon=1.0, alpha=1.0), dict(epsilon=1.0, probe_interval=0), dict(epsilon=1.0, probe_interval=1.5),
    ])
    def test_config_invalid(self, kwargs):
        with pytest.raises(ParameterError):
            ControllerConfig(**kwargs)


class TestInit:
    def test_reference_and_snapshot(self):
        ctrl, params, state = make(y0=0.75)
        assert ctrl.y_hat == ctrl.y0 == 0.75
        snap = ctrl.snapshots.current()
        assert snap.params.tobytes() == params.tobytes()
        assert serialize_state(snap.opt_state) == serialize_state(state)
        assert ctrl.records == [] and ctrl.probe_evaluations == 1

    def test_null_proposal_has_zero_innovation(self):
        ctrl, params, state = make()
        new_params, _, rec = ctrl.step(params, state, np.zeros(2))
        assert rec.nu == 0.0 and rec.decision is Decision.ACCEPT
        assert new_params.tobytes() == params.tobytes()

    def test_deterministic(self):
        a, _, _ = make(y0=0.3)
        b, _, _ = make(y0=0.3)
        assert (a.y_hat, a.t, a.probe_evaluations) == (b.y_hat, b.t, b.probe_evaluations)
        assert a.snapshots.current().to_bytes() == b.snapshots.current().to_bytes()

    @pytest.mark.parametrize("y0", [math.nan, math.inf])
    def test_non_finite_reference(self, y0):
        with pytest.raises(InitializationError):
            make(y0=y0)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            StabilityController(np.zeros(3), init_state(SGD1, 2), first_coord, ControllerConfig(1.0), SGD1)


class TestStep:
    def test_ewma_two_accepts(self):
        ctrl, params, state = make(y0=1.0, eps=5.0, alpha=0.5)
        params, state, r1 = ctrl.step(params, state, toward(params, 1.0))
        params, state, r2 = ctrl.step(params, state, toward(params, 2.0))
        assert r1.y_prop == 1.0 and r2.y_prop == 2.0
        assert ctrl.y_hat == 1.5

    def test_rollback_restores_snapshot(self):
        opt = OptimizerConfig.adamw(learning_rate=0.5, weight_decay=0.0)
        ctrl, params, state = make(y0=0.0, eps=0.01, opt=opt)
        params, state, rec = ctrl.step(params, state, np.array([-1.0, 0.0]))  # moves up by ~lr
        assert rec.decision is Decision.ROLLBACK
        snap = ctrl.snapshots.current()
        assert params.tobytes() == snap.params.tobytes()
        assert state.step_count == snap.opt_state.step_count == 0
        assert serialize_state(state) == serialize_state(snap.opt_state)

    def test_freeze_on_reject(self):
        ctrl, params, state = make(y0=1.0, eps=0.5, alpha=0.3)
        params, state, _ = ctrl.step(params, state, toward(params, 0.8))
        before = ctrl.y_hat
        params, state, rec = ctrl.step(params, state, toward(params, 5.0))
        assert rec.decision is Decision.ROLLBACK and rec.y_hat == before
        assert ctrl.y_hat == before and params[0] == 0.8

    def test_nan_proposal_rolls_back(self):
        ctrl, params, state = make()
        new, _, rec = ctrl.step(params, state, np.array([math.nan, 0.0]))
        assert rec.decision is Decision.ROLLBACK and rec.nu == math.inf
        assert new.tobytes() == params.tobytes()

    def test_rollback_consumes_step(self):
        ctrl, params, state = make(eps=0.1)
        ctrl.step(params, state, toward(params, 9.0))
        assert ctrl.t == 1 and [r.step for r in ctrl.records] == [0]

    def test_record_fields(self):
        ctrl, params, state = make(y0=2.0, eps=1.0)
        params, state, rec = ctrl.step(params, state, toward(params, 2.5))
        assert rec.nu == rec.y_prop - rec.y_hat == 0.5
        assert rec.param_l2 == pytest.approx(math.hypot(2.5, 2.0))
        assert rec.probe_ms >= 0.0

    def test_inputs_not_mutated(self):
        ctrl, params, state = make(eps=0.1)
        p_bytes, s_bytes = params.tobytes(), serialize_state(state)
        ctrl.step(params, state, toward(params, 9.0))
        ctrl.step(params, state, toward(params, 1.0))
        assert params.tobytes() == p_bytes and serialize_state(state) == s_bytes

    def test_restored_params_are_a_copy(self):
        ctrl, params, state = make(eps=0.1)
        new, state, _ = ctrl.step(params, state, toward(params, 9.0))
        new[1] = 123.0
        assert ctrl.snapshots.current().params[1] == 1.0

    def test_intermittent_probing(self):
        ctrl, params, state = make(y0=1.0, eps=0.1, interval=3)
        decisions = []
        for t in range(7):
            params, state, rec = ctrl.step(params, state, toward(params, 1.0 + 0.01 * (t + 1)))
            decisions.append(rec.decision)
        assert decisions == [Decision.ACCEPT, Decision.SKIPPED, Decision.SKIPPED] * 2 + [Decision.ACCEPT]
        assert ctrl.probe_evaluations == math.ceil(7 / 3) + 1

    def test_skipped_step_leaves_snapshot(self):
        ctrl, params, state = make(y0=1.0, eps=0.1, interval=2)
        params, state, _ = ctrl.step(params, state, toward(params, 1.05))
        snap = ctrl.snapshots.current().to_bytes()
        y_hat = ctrl.y_hat
        params, state, rec = ctrl.step(params, state, toward(params, 50.0))
        assert rec.decision is Decision.SKIPPED and params[0] == 50.0
        assert ctrl.snapshots.current().to_bytes() == snap and ctrl.y_hat == y_hat
        assert math.isnan(rec.nu)
        # the next probe step is judged against the old reference and rolls back to step 0's state
        params, state, rec = ctrl.step(params, state, toward(params, 50.0))
        assert rec.decision is Decision.ROLLBACK and params[0] == 1.05

    def test_dimension_mismatch(self):
        ctrl, params, state = make()
        with pytest.raises(DimensionError):
            ctrl.step(params, state, np.zeros(3))

    def test_background_snapshots_match(self):
        targets = [0.9, 3.0, 0.8, 0.85, 7.0, 7.0, 0.7]
        logs = []
        for background in (False, True):
            ctrl, params, state = make(eps=0.2, background_snapshots=background)
            for y in targets:
                params, state, _ = ctrl.step(params, state, toward(params, y))
            logs.append(([(r.decision, r.y_hat, r.nu) for r in ctrl.records], params.tobytes(),
                         ctrl.snapshots.current().to_bytes()))
            ctrl.close()
        assert logs[0] == logs[1]

    @given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=40),
           st.floats(0.01, 3.0), st.floats(0.01, 0.99))
    def test_theorem_properties(self, targets, eps, alpha):
        ctrl, params, state = make(y0=0.0, eps=eps, alpha=alpha)
        accepted = [0.0]
        y_hat = 0.0
        running_max = 0.0
        for t, y in enumerate(targets):
            prev = params.copy()
            params, state, rec = ctrl.step(params, state, toward(params, y))
            y_now = params[0]
            if rec.decision is Decision.ACCEPT:
                assert y_now <= y_hat + eps
                y_hat = (1 - alpha) * y_hat + alpha * y_now
                accepted.append(y_now)
            else:
                assert params.tobytes() == prev.tobytes()
                assert ctrl.y_hat == rec.y_hat
            assert ctrl.y_hat == y_hat
            assert min(accepted) <= ctrl.y_hat <= max(accepted) + 1e-12
            assert y_now <= running_max + eps
            running_max = max(running_max, y_now)
            assert running_max <= (t + 1) * eps + 1e-12


class TestSnapshot:
    def _snap(self, opt=OptimizerConfig.adamw(), dim=3):
        rng = np.random.default_rng(0)
        state = OptimizerState(opt.kind, tuple(rng.standard_normal(dim) for _ in range(2 if opt.kind == "adamw" else 1)), 9)
        return Snapshot(rng.standard_normal(dim), state, 0.125, 17)

    def test_bytes_round_trip(self):
        snap = self._snap()
        back = Snapshot.from_bytes(snap.to_bytes())
        assert back.params.tobytes() == snap.params.tobytes()
        assert serialize_state(back.opt_state) == serialize_state(snap.opt_state)
        assert (back.y_hat, back.step_taken_at) == (0.125, 17)
        assert back.to_bytes() == snap.to_bytes()

    def test_layout(self):
        data = self._snap(OptimizerConfig.sgd(0.1), dim=2).to_bytes()
        assert data[:4] == b"SNAP" and data[4] == 1 and data[5:9] == b"OPT1"

    def test_file_round_trip(self, tmp_path):
        snap = self._snap()
        snap.save(tmp_path / "s.bin")
        assert Snapshot.load(tmp_path / "s.bin").to_bytes() == snap.to_bytes()

    @pytest.mark.parametrize("mutate", [lambda d: b"SNAX" + d[4:], lambda d: d[:4] + b"\x02" + d[5:],
                                        lambda d: d[:-3], lambda d: d + b"\x00", lambda d: d[:4]])
    def test_malformed(self, mutate):
        with pytest.raises(FormatError):
            Snapshot.from_bytes(mutate(self._snap().to_bytes()))

    def test_empty_model(self):
        snap = Snapshot(np.zeros(0), init_state(SGD1, 0), 1.0, 0)
        assert Snapshot.from_bytes(snap.to_bytes()).params.size == 0


class TestSnapshotBuffer:
    @pytest.mark.parametrize("background", [False, True])
    def test_store_restore(self, background):
        buf = SnapshotBuffer(background)
        a, b = np.array([1.0, 2.0]), np.array([3.0, 4.0])
        state = init_state(SGD1, 2)
        buf.store(a, state, 0.5, 1)
        assert buf.restore()[0].tobytes() == a.tobytes()
        buf.store(b, state, 0.25, 2)
        first, second = buf.restore(), buf.restore()
        assert first[0].tobytes() == second[0].tobytes() == b.tobytes()
        assert buf.current().step_taken_at == 2
        buf.close()

    def test_store_copies(self):
        buf = SnapshotBuffer()
        a = np.array([1.0])
        buf.store(a, init_state(SGD1, 1), 0.0, 0)
        a[0] = 9.0
        assert buf.restore()[0][0] == 1.0

    def test_restore_hook(self):
        buf = SnapshotBuffer(restore_hook=lambda p: p + 1.0)
        buf.store(np.array([1.0]), init_state(SGD1, 1), 0.0, 0)
        assert buf.restore()[0][0] == 2.0
        assert buf.current().params[0] == 1.0

    def test_empty(self):
        with pytest.raises(RuntimeError):
            SnapshotBuffer().current()


class TestDecisionLog:
    def test_round_trip(self, tmp_path):
        ctrl, params, state = make(eps=0.3)
        for y in (1.1, 9.0, 0.9, math.nan):
            g = toward(params, y) if math.isfinite(y) else np.array([math.nan, 0.0])
            params, state, _ = ctrl.step(params, state, g)
        path = tmp_path / "log.csv"
        write_decision_log(ctrl.records, path)
        assert path.read_text().splitlines()[0] == "step,y_prop,y_hat,nu,decision,param_l2,probe_ms"
        back = read_decision_log(path)
        for a, b in zip(back, ctrl.records):
            assert (a.step, a.decision) == (b.step, b.decision)
            for f in ("y_hat", "nu", "param_l2", "probe_ms"):
                assert repr(getattr(a, f)) == repr(getattr(b, f))
