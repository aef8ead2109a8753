"""Acceptance criteria, one test per checked claim.

Every check prints a ``PASS``/``FAIL`` line (collected again in the session
summary) and then asserts, so a red line is a failing test.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from trainguard import cli
from trainguard.config import sequence_config, vision_config
from trainguard.experiment import BASELINE, CONTROLLED, build_task, resolve, run_experiment, run_one
from trainguard.faults import apply_fault
from trainguard.invariants import BOUNDED_DEVIATION, ONE_STEP_RECOVERY, SAFETY_ENVELOPE
from trainguard.metrics import admissibility_report, measured_overhead, overhead_ratio
from trainguard.model import gradient_check, init_params
from trainguard.numerics import RngStream
from trainguard.results import data_files, read_config

TASKS = {"vision": vision_config, "sequence": sequence_config}


def report(criterion, name, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'}  criterion {criterion}: {name}  [{detail}]"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


class Cache(dict):
    def get_or(self, key, make):
        if key not in self:
            self[key] = make()
        return self[key]


@pytest.fixture(scope="module")
def cache():
    return Cache()


def configs(cache, task):
    return cache.get_or(("cfg", task), lambda: resolve(TASKS[task]()))


def monitored(cache, task):
    """Default experiment with every invariant checked at every step."""
    def make():
        start = time.perf_counter()
        result = run_experiment(configs(cache, task), monitor=True, digests=True)
        return result, time.perf_counter() - start
    return cache.get_or(("monitored", task), make)


def plain(cache, task):
    def make():
        start = time.perf_counter()
        result = run_experiment(configs(cache, task))
        return result, time.perf_counter() - start
    return cache.get_or(("plain", task), make)


def fault_free(cache, task):
    return cache.get_or(("free", task),
                        lambda: run_experiment(configs(cache, task).replace(fault_enabled=False)))


def cli_runs(cache, task, tmp_path_factory):
    def make():
        roots = []
        for name in ("first", "second"):
            out = tmp_path_factory.mktemp(f"{task}_{name}")
            assert cli.main(["run", "--set", f"task={TASKS[task]().task}", "--out", str(out)]) == 0
            roots.append(out / task)
        return roots
    return cache.get_or(("cli", task), make)


# -- 1: invariant suite --------------------------------------------------

@pytest.mark.parametrize("invariant", [BOUNDED_DEVIATION, ONE_STEP_RECOVERY, SAFETY_ENVELOPE])
def test_c1_invariants(cache, invariant):
    counts, steps = {}, 0
    for task in TASKS:
        result, _ = monitored(cache, task)
        cfg = result.config
        assert cfg.num_seeds == 20 and cfg.total_steps == 250 and cfg.probe_interval == 1
        counts[task] = sum(v.invariant == invariant for v in result.violations())
        steps += sum(r.steps for r in result.runs[CONTROLLED])
    report(1, f"{invariant} holds", not any(counts.values()),
           f"{steps} controlled steps, violations {counts}")


def test_c1_rollbacks_exercised(cache):
    rollbacks = {t: sum(r.rollback_count for r in monitored(cache, t)[0].runs[CONTROLLED]) for t in TASKS}
    report(1, "rejected steps occur so recovery is actually checked", all(rollbacks.values()),
           f"rollbacks {rollbacks}")


def test_c1_runtime(cache):
    total = sum(monitored(cache, t)[1] for t in TASKS)
    report(1, "monitored suite under 60 s", total < 60.0, f"{total:.1f} s")


# -- 2: overhead -----------------------------------------------------------

def test_c2_formula():
    gamma = overhead_ratio(16, 128)
    report(2, "overhead_ratio(16, 128) = 16/384 < 0.045",
           gamma == 16 / 384 and abs(gamma - 0.04167) < 5e-6 and gamma < 0.045, f"{gamma!r}")


def _measured(cfg, repeats=3):
    cfg = cfg.replace(fault_enabled=False, total_steps=100, probe_interval=1)
    run_one(cfg, 0, True)  # warm caches and allocator
    return float(np.median([measured_overhead(run_one(cfg, 0, True)) for _ in range(repeats)]))


def test_c2_measured_default_model(cache):
    gamma = overhead_ratio(16, 128)
    cfg = configs(cache, "vision")
    m = _measured(cfg)
    report(2, "measured overhead within 3x of analytic (default vision model)",
           gamma / 3 <= m <= 3 * gamma, f"measured {m:.4f}, analytic {gamma:.4f}, ratio {m / gamma:.2f}")


def test_c2_measured_compute_bound_model(cache):
    gamma = overhead_ratio(16, 128)
    cfg = resolve(vision_config(blob_dim=512, hidden=1024, calibration_burnin=20, calibration_steps=30))
    m = _measured(cfg)
    report(2, "measured overhead within 3x of analytic (512-1024-4 model)",
           gamma / 3 <= m <= 3 * gamma, f"measured {m:.4f}, analytic {gamma:.4f}, ratio {m / gamma:.2f}")


# -- 3: fault protocol -----------------------------------------------------

def test_c3_shared_parameters(cache, tmp_path_factory):
    seen = {}
    for task in TASKS:
        cfg = read_config(cli_runs(cache, task, tmp_path_factory)[0])
        seen[task] = (cfg.fault_zeta, cfg.fault_onset, cfg.fault_duration, cfg.total_steps,
                      cfg.num_seeds, cfg.probe_size)
    ok = all(v == (300.0, 120, 10, 250, 20, 16) for v in seen.values())
    report(3, "echoed zeta/onset/duration/horizon/N/|P| = 300/120/10/250/20/16", ok, f"{seen}")


def test_c3_batch_sizes(cache, tmp_path_factory):
    batches = {t: read_config(cli_runs(cache, t, tmp_path_factory)[0]).batch_size for t in TASKS}
    report(3, "echoed batch 128 (vision) and 64 (sequence)", batches == {"vision": 128, "sequence": 64},
           f"{batches}")


def test_c3_sequence_learning_rate(cache, tmp_path_factory):
    cfg = read_config(cli_runs(cache, "sequence", tmp_path_factory)[0])
    report(3, "echoed sequence learning rate 5e-4", cfg.learning_rate == 5e-4,
           f"learning_rate {cfg.learning_rate!r}, optimizer {cfg.optimizer}")


def test_c3_fault_boundaries(cache):
    spec = configs(cache, "vision").fault_spec()
    g = np.array([0.01, -2.0])
    ok = (apply_fault(g, 119, spec) is g and apply_fault(g, 130, spec) is g
          and all(np.array_equal(apply_fault(g, t, spec), g * 300.0) for t in range(120, 130)))
    report(3, "fault active exactly on steps 120..129 with gain 300", ok, "steps 119, 120..129, 130")


# -- 4: recovery -----------------------------------------------------------

def _summary(cache, task, arm, key):
    agg = plain(cache, task)[0].aggregates[arm]
    return agg.summary_mean[key], agg.summary_std[key]


@pytest.mark.parametrize("task", list(TASKS))
def test_c4_peak(cache, task):
    c, _ = _summary(cache, task, CONTROLLED, "peak_probe_loss")
    b, _ = _summary(cache, task, BASELINE, "peak_probe_loss")
    report(4, f"{task}: controlled mean peak < 0.5 x baseline", c < 0.5 * b,
           f"controlled {c:.4g}, baseline {b:.4g}")


@pytest.mark.parametrize("task", list(TASKS))
def test_c4_recovery_mean(cache, task):
    c, _ = _summary(cache, task, CONTROLLED, "steps_to_recovery")
    b, _ = _summary(cache, task, BASELINE, "steps_to_recovery")
    report(4, f"{task}: controlled mean steps-to-recovery < baseline", c < b,
           f"controlled {c:.4g}, baseline {b:.4g}")


@pytest.mark.parametrize("task", list(TASKS))
def test_c4_recovery_std(cache, task):
    _, c = _summary(cache, task, CONTROLLED, "steps_to_recovery")
    _, b = _summary(cache, task, BASELINE, "steps_to_recovery")
    runs = plain(cache, task)[0].runs[BASELINE]
    never = sum(math.isinf(r.steps_to_recovery) for r in runs)
    report(4, f"{task}: controlled std of steps-to-recovery < baseline", c < b,
           f"controlled {c:.4g}, baseline {b:.4g}, baseline runs never recovering {never}/{len(runs)}")


def test_c4_runtime(cache):
    total = sum(plain(cache, t)[1] for t in TASKS)
    report(4, "both 20-seed experiments under 2 min", total < 120.0, f"{total:.1f} s")


# -- 5: detection ----------------------------------------------------------

@pytest.mark.parametrize("task", list(TASKS))
def test_c5_separation(cache, task):
    result = plain(cache, task)[0]
    burnin = result.config.calibration_burnin
    ratios = [admissibility_report(r, nominal_start=burnin).separation_ratio for r in result.runs[CONTROLLED]]
    ok = sum(r > 5 for r in ratios)
    report(5, f"{task}: separation ratio > 5 on >= 18/20 seeds", ok >= 18,
           f"{ok}/20, min ratio {min(ratios):.3g}")


@pytest.mark.parametrize("task", list(TASKS))
def test_c5_no_false_alarms(cache, task):
    counts = [r.rollback_count for r in fault_free(cache, task).runs[CONTROLLED]]
    ok = sum(c == 0 for c in counts)
    report(5, f"{task}: zero rollbacks without a fault on >= 18/20 seeds", ok >= 18,
           f"{ok}/20, max rollbacks {max(counts)}")


# -- 6: norm containment ---------------------------------------------------

def _final_norms(cache, task):
    result = plain(cache, task)[0]
    free = fault_free(cache, task)
    ref = np.array([r.param_l2[-1] for r in free.runs[BASELINE]])
    ctrl = np.array([r.param_l2[-1] for r in result.runs[CONTROLLED]])
    base = np.array([r.param_l2[-1] for r in result.runs[BASELINE]])
    return ref, ctrl, base


@pytest.mark.parametrize("task", list(TASKS))
def test_c6_controlled_contained(cache, task):
    ref, ctrl, _ = _final_norms(cache, task)
    ratio = ctrl / ref
    ok = bool(np.all((ratio <= 2.0) & (ratio >= 0.5)))
    report(6, f"{task}: controlled final norm within 2x of fault-free on every seed", ok,
           f"ratio range [{ratio.min():.3f}, {ratio.max():.3f}]")


@pytest.mark.parametrize("task", list(TASKS))
def test_c6_baseline_escapes(cache, task):
    ref, _, base = _final_norms(cache, task)
    ok = int(np.sum(~(base <= 2.0 * ref)))
    report(6, f"{task}: baseline final norm beyond 2x fault-free on >= 18/20 seeds", ok >= 18,
           f"{ok}/20, min ratio {np.min(base / ref):.3g}")


# -- 7: gradient oracle ----------------------------------------------------

def test_c7_gradient():
    errors = []
    for task, make in TASKS.items():
        cfg = make()
        data = build_task(cfg)
        for i in range(5):
            params = init_params(data.spec, RngStream(1000 + i, 77))
            batch = data.train.subset(np.arange(i * 8, i * 8 + 8) % len(data.train))
            errors.append(gradient_check(params, batch, data.spec, h=1e-5))
    report(7, "analytic vs central-difference gradient, max relative error < 1e-4 on 10 instances",
           len(errors) == 10 and max(errors) < 1e-4, f"worst {max(errors):.3g}")


# -- 8: determinism --------------------------------------------------------

@pytest.mark.parametrize("task", list(TASKS))
def test_c8_byte_identical(cache, task, tmp_path_factory):
    a, b = cli_runs(cache, task, tmp_path_factory)
    fa, fb = data_files(a), data_files(b)
    same = [p.relative_to(a) for p in fa] == [p.relative_to(b) for p in fb]
    differing = [p.name for p, q in zip(fa, fb) if p.read_bytes() != q.read_bytes()] if same else ["layout"]
    report(8, f"{task}: two 'run' invocations give byte-identical data files", same and not differing,
           f"{len(fa)} files, differing {differing[:3]}")


@pytest.mark.parametrize("task", list(TASKS))
def test_c8_paired_prefix(cache, task):
    result = monitored(cache, task)[0]
    bad = [v for v in result.violations() if v.invariant == "paired_prefix"]
    firsts = [r.rollback_steps[0] for r in result.runs[CONTROLLED] if r.rollback_steps]
    report(8, f"{task}: paired runs bit-identical before the first rollback", not bad,
           f"violations {len(bad)}, earliest rollback step {min(firsts) if firsts else None}")
