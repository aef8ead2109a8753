"""Static SVG line charts of experiment results.

Charts are assembled with ``xml.etree`` so every file is well-formed, and all
coordinates are printed with fixed precision so the same results always give
the same bytes.
"""
from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import ExperimentConfig
from .errors import FormatError
from .experiment import BASELINE, CONTROLLED
from .metrics import mean_std
from .results import load_series, read_config

WIDTH, HEIGHT = 720, 400
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 20, 36, 44
COLORS = {BASELINE: "#c0392b", CONTROLLED: "#1f77b4"}
PLOT_FILES = ("recovery.svg", "innovation.svg", "norms.svg", "paired.svg")


@dataclass
class Axis:
    """Maps data values to pixel coordinates through an optional transform."""

    lo: float
    hi: float
    pix_lo: float
    pix_hi: float
    transform: Callable[[float], float] = lambda v: v

    def __call__(self, v: float) -> float:
        a, b = self.transform(self.lo), self.transform(self.hi)
        if b == a:
            return (self.pix_lo + self.pix_hi) / 2
        return self.pix_lo + (self.transform(v) - a) / (b - a) * (self.pix_hi - self.pix_lo)


@dataclass
class Chart:
    title: str
    ylabel: str
    x_max: float
    y_lo: float
    y_hi: float
    scale: str = "linear"  # linear | log | symlog
    linthresh: float = 1.0
    elements: list[ET.Element] = field(default_factory=list)

    def __post_init__(self):
        self.x = Axis(0.0, self.x_max, MARGIN_L, WIDTH - MARGIN_R)
        tf = {"linear": lambda v: v, "log": math.log10,
              "symlog": lambda v: math.copysign(math.log10(1.0 + abs(v) / self.linthresh), v)}[self.scale]
        self.y = Axis(self.y_lo, self.y_hi, HEIGHT - MARGIN_B, MARGIN_T, tf)

    def _clip(self, v: float) -> float:
        return min(max(v, self.y_lo), self.y_hi)

    def _point(self, x: float, y: float) -> str:
        return f"{self.x(x):.2f},{self.y(self._clip(y)):.2f}"

    def line(self, xs, ys, color: str, label: str, dash: str | None = None) -> None:
        """Polyline through the finite points; gaps break the line."""
        for seg in _segments(xs, ys):
            attrs = {"points": " ".join(self._point(x, y) for x, y in seg), "fill": "none",
                     "stroke": color, "stroke-width": "1.5", "class": "series", "data-label": label}
            if dash:
                attrs["stroke-dasharray"] = dash
            self.elements.append(ET.Element("polyline", attrs))

    def band(self, xs, lo, hi, color: str, label: str) -> None:
        for seg in _segments(xs, lo, hi):
            top = [self._point(x, h) for x, _, h in seg]
            bottom = [self._point(x, lo_) for x, lo_, _ in reversed(seg)]
            self.elements.append(ET.Element("polygon", {
                "points": " ".join(top + bottom), "fill": color, "fill-opacity": "0.18",
                "stroke": "none", "class": "band", "data-label": label}))

    def hline(self, y: float, color: str, cls: str, label: str) -> None:
        py = f"{self.y(self._clip(y)):.2f}"
        self.elements.append(ET.Element("line", {
            "x1": f"{MARGIN_L}", "x2": f"{WIDTH - MARGIN_R}", "y1": py, "y2": py,
            "stroke": color, "stroke-width": "1.2", "stroke-dasharray": "6 3",
            "class": cls, "data-value": repr(float(y))}))
        text = ET.Element("text", {"x": f"{WIDTH - MARGIN_R - 4}", "y": f"{float(py) - 4:.2f}",
                                   "text-anchor": "end", "font-size": "11", "fill": color})
        text.text = label
        self.elements.append(text)

    def vspan(self, x0: float, x1: float, label: str) -> None:
        left, right = self.x(x0), self.x(x1)
        self.elements.append(ET.Element("rect", {
            "x": f"{left:.2f}", "y": f"{MARGIN_T}", "width": f"{right - left:.2f}",
            "height": f"{HEIGHT - MARGIN_T - MARGIN_B}", "fill": "#f5b041", "fill-opacity": "0.25",
            "class": "fault-window", "data-label": label}))

    def markers(self, xs, ys, color: str, label: str) -> None:
        for x, y in zip(xs, ys):
            if math.isfinite(y):
                px, py = self._point(x, y).split(",")
                self.elements.append(ET.Element("circle", {
                    "cx": px, "cy": py, "r": "2.2", "fill": color, "class": "marker", "data-label": label}))

    def _yticks(self) -> list[float]:
        if self.scale == "log":
            lo, hi = math.floor(math.log10(self.y_lo)), math.ceil(math.log10(self.y_hi))
            return [10.0 ** k for k in range(lo, hi + 1) if self.y_lo <= 10.0 ** k <= self.y_hi]
        if self.scale == "symlog":
            ticks = [0.0]
            k = math.floor(math.log10(self.linthresh))
            while 10.0 ** k <= max(abs(self.y_lo), abs(self.y_hi)):
                for v in (10.0 ** k, -(10.0 ** k)):
                    if self.y_lo <= v <= self.y_hi:
                        ticks.append(v)
                k += 1
            return sorted(ticks)
        return [float(v) for v in np.linspace(self.y_lo, self.y_hi, 5)]

    def render(self, legend: Sequence[tuple[str, str]] = ()) -> str:
        svg = ET.Element("svg", {"xmlns": "http://www.w3.org/2000/svg", "width": str(WIDTH),
                                 "height": str(HEIGHT), "viewBox": f"0 0 {WIDTH} {HEIGHT}",
                                 "font-family": "sans-serif"})
        ET.SubElement(svg, "rect", {"width": str(WIDTH), "height": str(HEIGHT), "fill": "white"})
        title = ET.SubElement(svg, "text", {"x": str(WIDTH // 2), "y": "22", "text-anchor": "middle",
                                            "font-size": "15"})
        title.text = self.title
        frame = {"x": str(MARGIN_L), "y": str(MARGIN_T), "width": str(WIDTH - MARGIN_L - MARGIN_R),
                 "height": str(HEIGHT - MARGIN_T - MARGIN_B), "fill": "none", "stroke": "#444",
                 "class": "frame"}
        axes = ET.SubElement(svg, "g", {"class": "axes", "font-size": "11", "fill": "#333"})
        for v in self._yticks():
            py = f"{self.y(v):.2f}"
            ET.SubElement(axes, "line", {"x1": str(MARGIN_L - 4), "x2": str(MARGIN_L), "y1": py, "y2": py,
                                         "stroke": "#444", "class": "tick"})
            label = ET.SubElement(axes, "text", {"x": str(MARGIN_L - 6), "y": f"{float(py) + 4:.2f}",
                                                 "text-anchor": "end"})
            label.text = f"{v:g}"
        step = 50 if self.x_max > 100 else 10
        for v in range(0, int(self.x_max) + 1, step):
            px = f"{self.x(v):.2f}"
            ET.SubElement(axes, "line", {"x1": px, "x2": px, "y1": str(HEIGHT - MARGIN_B),
                                         "y2": str(HEIGHT - MARGIN_B + 4), "stroke": "#444", "class": "tick"})
            label = ET.SubElement(axes, "text", {"x": px, "y": str(HEIGHT - MARGIN_B + 16),
                                                 "text-anchor": "middle"})
            label.text = str(v)
        xl = ET.SubElement(axes, "text", {"x": str(WIDTH // 2), "y": str(HEIGHT - 8), "text-anchor": "middle"})
        xl.text = "step"
        yl = ET.SubElement(axes, "text", {"x": "14", "y": str(HEIGHT // 2), "text-anchor": "middle",
                                          "transform": f"rotate(-90 14 {HEIGHT // 2})"})
        yl.text = self.ylabel
        body = ET.SubElement(svg, "g", {"class": "data"})
        body.extend(self.elements)
        ET.SubElement(svg, "rect", frame)
        for i, (label, color) in enumerate(legend):
            y = MARGIN_T + 14 + 16 * i
            ET.SubElement(svg, "line", {"x1": str(MARGIN_L + 10), "x2": str(MARGIN_L + 30), "y1": str(y),
                                        "y2": str(y), "stroke": color, "stroke-width": "2", "class": "legend"})
            text = ET.SubElement(svg, "text", {"x": str(MARGIN_L + 36), "y": str(y + 4), "font-size": "11"})
            text.text = label
        ET.indent(svg)
        return ET.tostring(svg, encoding="unicode") + "\n"


def _segments(xs, *columns):
    """Split parallel columns into runs where every value is finite."""
    out, cur = [], []
    for row in zip(xs, *columns):
        if all(math.isfinite(float(v)) for v in row[1:]):
            cur.append(tuple(float(v) for v in row))
        elif cur:
            out.append(cur)
            cur = []
    if cur:
        out.append(cur)
    return out


def _finite(values) -> np.ndarray:
    arr = np.asarray(values, dtype=float).ravel()
    return arr[np.isfinite(arr)]


def _log_range(*arrays, floor: float = 1e-3) -> tuple[float, float]:
    vals = np.concatenate([_finite(a) for a in arrays])
    vals = vals[vals > 0]
    if not vals.size:
        return floor, 1.0
    lo = max(float(vals.min()), floor)
    hi = max(float(vals.max()), lo * 10)
    return 10.0 ** math.floor(math.log10(lo)), 10.0 ** math.ceil(math.log10(hi))


def _mean_band(runs: list[dict], key: str):
    n = len(runs[0][key])
    stats = [mean_std(r[key][t] for r in runs) for t in range(n)]
    mean = np.array([s[0] for s in stats])
    std = np.array([s[1] for s in stats])
    return mean, mean - std, mean + std


def _fault(chart: Chart, cfg: ExperimentConfig) -> None:
    if cfg.fault_enabled:
        chart.vspan(cfg.fault_onset, cfg.fault_onset + cfg.fault_duration, "fault window")


def recovery_chart(cfg: ExperimentConfig, series) -> str:
    return _band_chart(cfg, series, "probe_loss", "Probe loss, mean ± 1 std over seeds", "probe loss")


def norm_chart(cfg: ExperimentConfig, series) -> str:
    return _band_chart(cfg, series, "param_l2", "Parameter L2 norm, mean ± 1 std over seeds", "||theta||")


def _band_chart(cfg, series, key, title, ylabel) -> str:
    stats = {arm: _mean_band(series[arm], key) for arm in (BASELINE, CONTROLLED)}
    lo, hi = _log_range(*(s[0] for s in stats.values()), *(s[2] for s in stats.values()))
    chart = Chart(title, ylabel, cfg.total_steps - 1, lo, hi, scale="log")
    _fault(chart, cfg)
    xs = np.arange(cfg.total_steps)
    for arm, (mean, band_lo, band_hi) in stats.items():
        chart.band(xs, np.maximum(band_lo, lo), band_hi, COLORS[arm], arm)
    for arm, (mean, _, _) in stats.items():
        chart.line(xs, mean, COLORS[arm], arm)
    return chart.render([(arm, COLORS[arm]) for arm in stats])


def innovation_chart(cfg: ExperimentConfig, series, seed_index: int = 0) -> str:
    """One seed's innovation trace on a symmetric log axis, with the
    threshold and the fault window marked."""
    eps = float(cfg.epsilon)
    runs = {arm: series[arm][seed_index] for arm in (BASELINE, CONTROLLED)}
    vals = np.concatenate([_finite(r["nu"]) for r in runs.values()] + [np.array([eps, -eps])])
    chart = Chart(f"Innovation, seed {seed_index}", "nu (symmetric log scale)", cfg.total_steps - 1,
                  float(vals.min()), float(vals.max()), scale="symlog", linthresh=eps)
    _fault(chart, cfg)
    xs = np.arange(cfg.total_steps)
    chart.line(xs, runs[BASELINE]["nu"], COLORS[BASELINE], BASELINE, dash="4 3")
    chart.line(xs, runs[CONTROLLED]["nu"], COLORS[CONTROLLED], CONTROLLED)
    chart.hline(eps, "#2e7d32", "threshold", f"epsilon = {eps:.4g}")
    return chart.render([(f"{BASELINE} (every update applied)", COLORS[BASELINE]),
                         (CONTROLLED, COLORS[CONTROLLED]), ("threshold", "#2e7d32")])


def paired_chart(cfg: ExperimentConfig, series, seed_index: int = 0) -> str:
    runs = {arm: series[arm][seed_index] for arm in (BASELINE, CONTROLLED)}
    lo, hi = _log_range(*(r["probe_loss"] for r in runs.values()))
    chart = Chart(f"Paired runs, seed {seed_index}: same init and batch order", "probe loss",
                  cfg.total_steps - 1, lo, hi, scale="log")
    _fault(chart, cfg)
    xs = np.arange(cfg.total_steps)
    for arm, run in runs.items():
        chart.line(xs, run["probe_loss"], COLORS[arm], arm)
    ctl = runs[CONTROLLED]
    rb = [t for t, d in enumerate(ctl["decision"]) if d == "Rollback"]
    chart.markers(rb, [ctl["probe_loss"][t] for t in rb], "#000000", "rollback")
    return chart.render([(BASELINE, COLORS[BASELINE]), (CONTROLLED, COLORS[CONTROLLED]),
                         ("rollback", "#000000")])


def write_plots(results_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Render the four charts for one experiment directory.

    Raises ``FormatError`` when the directory lacks a config echo or any run
    file is missing or truncated.
    """
    root = Path(results_dir)
    if not (root / "config.txt").is_file():
        raise FormatError(f"no results in {root} (config.txt missing)")
    cfg = read_config(root)
    if cfg.epsilon is None:
        raise FormatError(f"{root}/config.txt has no resolved epsilon")
    series = load_series(root, cfg)
    out = root if out_dir is None else Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    docs = {
        "recovery.svg": recovery_chart(cfg, series),
        "innovation.svg": innovation_chart(cfg, series),
        "norms.svg": norm_chart(cfg, series),
        "paired.svg": paired_chart(cfg, series),
    }
    paths = []
    for name in PLOT_FILES:
        path = out / name
        path.write_text(docs[name])
        paths.append(path)
    return paths
