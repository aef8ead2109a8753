"""On-disk layout of an experiment's outputs.

Data files are a pure function of the effective config::

    <out>/<tag>/config.txt              effective config echo
    <out>/<tag>/summary.json            per-seed summaries and aggregates
    <out>/<tag>/<seed>/baseline.csv     per-step series
    <out>/<tag>/<seed>/controlled.csv
    <out>/<tag>/<seed>/snapshot.bin     controlled run's last accepted state

Wall-clock data lives under ``<out>/<tag>/timing/`` and is excluded from
reproducibility checks.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, dump_config, load_config
from .controller import Snapshot, write_decision_log
from .errors import FormatError
from .experiment import ARMS, CONTROLLED, ExperimentResult
from .metrics import RunMetrics
from .numerics import l2_norm

SERIES_COLUMNS = ("step", "probe_loss", "y_hat", "nu", "decision", "param_l2")
TIMING_DIR = "timing"
CONFIG_FILE = "config.txt"
SUMMARY_FILE = "summary.json"
SNAPSHOT_FILE = "snapshot.bin"


def _num(x: float) -> str:
    return repr(float(x))


def write_series_csv(run: RunMetrics, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SERIES_COLUMNS)
        for t in range(run.steps):
            w.writerow([t, _num(run.probe_loss[t]), _num(run.y_hat[t]), _num(run.innovation[t]),
                        run.decisions[t], _num(run.param_l2[t])])


def read_series_csv(path: str | Path, expected_steps: int | None = None) -> dict[str, object]:
    """Load one run's series; raises ``FormatError`` on missing, malformed
    or truncated files."""
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"missing series file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != SERIES_COLUMNS:
            raise FormatError(f"{path}: unexpected header {header}")
        rows = list(reader)
    cols: dict[str, list] = {c: [] for c in SERIES_COLUMNS}
    for lineno, row in enumerate(rows, 2):
        if len(row) != len(SERIES_COLUMNS):
            raise FormatError(f"{path}:{lineno}: expected {len(SERIES_COLUMNS)} fields, got {len(row)}")
        try:
            cols["step"].append(int(row[0]))
            for key, text in zip(("probe_loss", "y_hat", "nu"), row[1:4]):
                cols[key].append(float(text))
            cols["decision"].append(row[4])
            cols["param_l2"].append(float(row[5]))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    if cols["step"] != list(range(len(rows))):
        raise FormatError(f"{path}: steps are not 0..{len(rows) - 1}")
    if expected_steps is not None and len(rows) != expected_steps:
        raise FormatError(f"{path}: {len(rows)} steps, expected {expected_steps}")
    out: dict[str, object] = {k: np.array(cols[k]) for k in ("probe_loss", "y_hat", "nu", "param_l2")}
    out["decision"] = cols["decision"]
    return out


def _jsonable(value):
    """Strict JSON has no inf/nan; write them as strings."""
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else repr(value)
    if isinstance(value, np.integer):
        return int(value)
    return value


def _from_json(value):
    if isinstance(value, dict):
        return {k: _from_json(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_from_json(v) for v in value]
    if value in ("inf", "-inf", "nan"):
        return float(value)
    return value


def summary_document(result: ExperimentResult) -> dict[str, object]:
    return {
        "config": result.config.to_mapping(),
        "runs": {arm: [r.summary() for r in result.runs[arm]] for arm in ARMS},
        "aggregates": {arm: result.aggregates[arm].to_dict() for arm in ARMS},
    }


def write_results(result: ExperimentResult, out_dir: str | Path) -> Path:
    """Write every data file and the timing sidecar; returns the experiment directory."""
    root = Path(out_dir) / result.config.tag
    root.mkdir(parents=True, exist_ok=True)
    (root / CONFIG_FILE).write_text(dump_config(result.config))
    for arm in ARMS:
        for run in result.runs[arm]:
            seed_dir = root / str(run.seed_index)
            seed_dir.mkdir(exist_ok=True)
            write_series_csv(run, seed_dir / f"{arm}.csv")
            if arm == CONTROLLED and run.final_snapshot is not None:
                (seed_dir / SNAPSHOT_FILE).write_bytes(run.final_snapshot)
    text = json.dumps(_jsonable(summary_document(result)), indent=1, sort_keys=True, allow_nan=False)
    (root / SUMMARY_FILE).write_text(text + "\n")
    write_timings(result, root / TIMING_DIR)
    return root


def write_timings(result: ExperimentResult, timing_dir: Path) -> None:
    """Per-step wall-clock columns plus the controlled arm's decision log."""
    timing_dir.mkdir(parents=True, exist_ok=True)
    with open(timing_dir / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("seed", "arm", "step", "train_ms", "probe_ms"))
        for arm in ARMS:
            for run in result.runs[arm]:
                for t in range(run.steps):
                    w.writerow((run.seed_index, arm, t, _num(run.train_ms[t]), _num(run.probe_ms[t])))
    for run in result.runs[CONTROLLED]:
        if run.decision_log is not None:
            write_decision_log(run.decision_log, timing_dir / f"decisions_{run.seed_index}.csv")


def read_summary(root: str | Path) -> dict[str, object]:
    path = Path(root) / SUMMARY_FILE
    if not path.is_file():
        raise FormatError(f"missing summary: {path}")
    try:
        return _from_json(json.loads(path.read_text()))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None


def read_config(root: str | Path) -> ExperimentConfig:
    return load_config(Path(root) / CONFIG_FILE)


def load_series(root: str | Path, cfg: ExperimentConfig | None = None) -> dict[str, list[dict[str, object]]]:
    """All runs' series as ``{arm: [series of seed 0, seed 1, ...]}``."""
    root = Path(root)
    cfg = read_config(root) if cfg is None else cfg
    return {arm: [read_series_csv(root / str(i) / f"{arm}.csv", cfg.total_steps)
                  for i in range(cfg.num_seeds)] for arm in ARMS}


def data_files(root: str | Path) -> list[Path]:
    """Files covered by the byte-for-byte reproducibility guarantee."""
    root = Path(root)
    return sorted(p for p in root.rglob("*") if p.is_file() and TIMING_DIR not in p.relative_to(root).parts)


def snapshot_summary(data: bytes) -> dict[str, object]:
    snap = Snapshot.from_bytes(data)
    return {
        "step": snap.step_taken_at,
        "y_hat": snap.y_hat,
        "num_params": int(snap.params.size),
        "param_l2": l2_norm(snap.params),
        "optimizer": snap.opt_state.kind,
        "optimizer_step": snap.opt_state.step_count,
    }
