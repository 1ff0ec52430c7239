"""Scenario runner: baseline-versus-TAB comparisons and report files."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .config import efficiency_from_value, hardware_preset, load_toml, model_preset
from .exceptions import ConfigError, TabsimError
from .hardware import PS_PER_MS, HardwareConfig
from .sim import PrefetchPolicy, SimReport, chrome_trace, derive_metrics, simulate, timeline_jsonl
from .workload import ModelSpec, Phase, TaskSpec, build_graph

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Scenario:
    """One comparison matrix: a model and task on several systems.

    TAB systems get one cell per entry of ``remote_bandwidths`` (bytes/s);
    an empty sweep keeps each preset's own bandwidth.  ``baseline`` names the
    hardware whose (single or first) cell the others are compared against.
    """

    model: str
    task: TaskSpec
    hardware: Tuple[str, ...]
    remote_bandwidths: Tuple[float, ...] = ()
    policy: PrefetchPolicy = field(default_factory=PrefetchPolicy)
    output_dir: Optional[str] = None
    baseline: Optional[str] = None
    moe_parallelism: str = "expert"
    efficiency: Optional[str] = None
    parallelism: Optional[int] = None
    custom_hardware: Mapping[str, Any] = field(default_factory=dict, compare=False)
    custom_models: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "hardware", tuple(self.hardware))
        object.__setattr__(self, "remote_bandwidths", tuple(float(b) for b in self.remote_bandwidths))
        if not self.hardware:
            raise ConfigError("scenario needs at least one hardware config")
        if any(b <= 0 for b in self.remote_bandwidths):
            raise ConfigError("remote bandwidth sweep values must be positive")
        if self.baseline is not None and self.baseline not in self.hardware:
            raise ConfigError(f"baseline {self.baseline!r} is not among the scenario hardware")
        if self.efficiency not in (None, "default", "off"):
            raise ConfigError("efficiency must be 'default' or 'off'")

    @property
    def baseline_name(self) -> str:
        return self.baseline or self.hardware[0]

    def describe(self) -> Dict[str, Any]:
        return {
            "model": self.model,
            "task": asdict(self.task),
            "hardware": list(self.hardware),
            "remote_bandwidths_bytes_per_s": list(self.remote_bandwidths),
            "baseline": self.baseline_name,
            "policy": self.policy.as_dict(),
            "moe_parallelism": self.moe_parallelism,
            "efficiency": self.efficiency or "default",
            "parallelism": self.parallelism,
        }


_SCENARIO_KEYS = {"model", "hardware", "baseline", "remote_bandwidth_sweep_bytes_per_s", "output_dir",
                  "moe_parallelism", "efficiency", "parallelism"}


def load_scenario(path: Union[str, Path]) -> Scenario:
    """Read a scenario TOML file (with includes) into a :class:`Scenario`."""
    path = Path(path)
    data = load_toml(path)
    unknown = set(data) - {"scenario", "task", "policy", "hardware", "model"}
    if unknown:
        raise ConfigError(f"{path}: unknown tables {sorted(unknown)}")
    sc = data.get("scenario")
    if sc is None:
        raise ConfigError(f"{path}: missing [scenario] table")
    bad = set(sc) - _SCENARIO_KEYS
    if bad:
        raise ConfigError(f"{path}: unknown [scenario] keys {sorted(bad)}")
    try:
        task = TaskSpec(**data.get("task", {}))
        policy = PrefetchPolicy(**data.get("policy", {}))
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    hardware = sc.get("hardware", [])
    if isinstance(hardware, str):
        hardware = [hardware]
    out_dir = sc.get("output_dir")
    if out_dir is not None:
        out_dir = str((path.parent / out_dir))
    if "model" not in sc:
        raise ConfigError(f"{path}: [scenario] needs a model")
    return Scenario(
        model=sc["model"],
        task=task,
        hardware=tuple(hardware),
        remote_bandwidths=tuple(sc.get("remote_bandwidth_sweep_bytes_per_s", ())),
        policy=policy,
        output_dir=out_dir,
        baseline=sc.get("baseline"),
        moe_parallelism=sc.get("moe_parallelism", "expert"),
        efficiency=sc.get("efficiency"),
        parallelism=sc.get("parallelism"),
        custom_hardware=data.get("hardware", {}),
        custom_models=data.get("model", {}),
    )


def resolve(scenario: Scenario) -> Tuple[ModelSpec, Dict[str, HardwareConfig]]:
    """Look up every preset the scenario references (raises PresetNotFoundError)."""
    model = model_preset(scenario.model, scenario.custom_models)
    hws = {}
    for name in scenario.hardware:
        hw = hardware_preset(name, scenario.custom_hardware)
        if scenario.efficiency is not None:
            hw = hw.with_efficiency(efficiency_from_value(scenario.efficiency))
        hws[name] = hw
    return model, hws


@dataclass(frozen=True)
class CellResult:
    key: str
    hardware: str
    num_xpus: int
    remote_bandwidth: Optional[float]
    ttft_ps: Optional[int] = None
    tpot_ps: Optional[int] = None
    e2e_ps: Optional[int] = None
    peak_local_bytes: Optional[int] = None
    remote_read_bytes: Optional[int] = None
    remote_write_bytes: Optional[int] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def percent_delta(value: int, base: int) -> float:
    return (value - base) / base * 100.0


@dataclass(frozen=True)
class ComparisonReport:
    scenario: Mapping[str, Any]
    baseline: str
    cells: Tuple[CellResult, ...]
    schema_version: int = SCHEMA_VERSION

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.cells)

    def cell(self, key: str) -> CellResult:
        for c in self.cells:
            if c.key == key:
                return c
        raise KeyError(key)

    @property
    def baseline_cell(self) -> CellResult:
        return self.cell(self.baseline)

    def deltas(self) -> Dict[str, Dict[str, Optional[float]]]:
        """Percent change of ttft/tpot/e2e against the baseline cell (negative = faster)."""
        base = self.baseline_cell
        out = {}
        for c in self.cells:
            row = {}
            for m in ("ttft_ps", "tpot_ps", "e2e_ps"):
                v, b = getattr(c, m), getattr(base, m)
                row[m] = None if v is None or not b else percent_delta(v, b)
            out[c.key] = row
        return out

    def gpu_savings(self) -> Dict[str, float]:
        """xPU-count ratio for cells matching or beating the baseline end to end with fewer xPUs."""
        base = self.baseline_cell
        out = {}
        if base.e2e_ps is None:
            return out
        for c in self.cells:
            if c.key == base.key or c.e2e_ps is None:
                continue
            if c.num_xpus < base.num_xpus and c.e2e_ps <= base.e2e_ps:
                out[c.key] = base.num_xpus / c.num_xpus
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "scenario": dict(self.scenario),
            "baseline": self.baseline,
            "cells": [asdict(c) for c in self.cells],
            "deltas_percent": self.deltas(),
            "gpu_savings": self.gpu_savings(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ComparisonReport":
        d = json.loads(text)
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"unsupported report schema version {d.get('schema_version')!r}")
        cells = tuple(CellResult(**c) for c in d["cells"])
        return cls(scenario=d["scenario"], baseline=d["baseline"], cells=cells,
                   schema_version=d["schema_version"])


def cell_key(hw_name: str, bandwidth: Optional[float]) -> str:
    if bandwidth is None:
        return hw_name
    return f"{hw_name}@{bandwidth / 1e12:g}TBps"


def _cells(scenario: Scenario, hws: Mapping[str, HardwareConfig]):
    for name in scenario.hardware:
        hw = hws[name]
        if hw.has_remote_memory and scenario.remote_bandwidths:
            for bw in scenario.remote_bandwidths:
                yield cell_key(name, bw), name, hw.with_remote_bandwidth(bw), bw
        else:
            yield cell_key(name, None), name, hw, (hw.fabric.per_gpu_bandwidth if hw.has_remote_memory else None)


@dataclass
class ScenarioRun:
    report: ComparisonReport
    phase_reports: Dict[str, Tuple[SimReport, SimReport]]


def run_scenario(scenario: Scenario, keep_phase_reports: bool = False):
    """Simulate every cell and assemble the comparison.

    Graphs are built once per parallelism degree.  A cell that fails (for
    example a deadlock on bounded local memory) is reported with its error;
    presets that do not exist raise immediately.
    """
    model, hws = resolve(scenario)
    task = scenario.task
    graphs: Dict[int, tuple] = {}
    cells: List[CellResult] = []
    phases: Dict[str, Tuple[SimReport, SimReport]] = {}
    for key, name, hw, bw in _cells(scenario, hws):
        n = scenario.parallelism or hw.num_xpus
        try:
            if n not in graphs:
                graphs[n] = (
                    build_graph(model, task, Phase.prefill(), n, moe_parallelism=scenario.moe_parallelism),
                    build_graph(model, task, Phase.decode(), n, moe_parallelism=scenario.moe_parallelism),
                )
            pre = simulate(graphs[n][0], hw, scenario.policy)
            dec = simulate(graphs[n][1], hw, scenario.policy)
            m = derive_metrics(pre, dec, task)
        except TabsimError as exc:
            cells.append(CellResult(key, name, hw.num_xpus, bw, error=f"{type(exc).__name__}: {exc}"))
            continue
        if keep_phase_reports:
            phases[key] = (pre, dec)
        cells.append(CellResult(key, name, hw.num_xpus, bw, m.ttft_ps, m.tpot_ps, m.e2e_ps,
                                m.peak_local_bytes, m.total_remote_read_bytes, m.total_remote_write_bytes))
    base_key = next(c.key for c in cells if c.hardware == scenario.baseline_name)
    report = ComparisonReport(scenario=scenario.describe(), baseline=base_key, cells=tuple(cells))
    if keep_phase_reports:
        return ScenarioRun(report, phases)
    return report


CELL_COLUMNS = ("key", "hardware", "num_xpus", "remote_bandwidth_bytes_per_s", "ttft_ms", "tpot_ms", "e2e_ms",
                "peak_local_bytes", "remote_read_bytes", "remote_write_bytes", "ttft_delta_pct",
                "tpot_delta_pct", "e2e_delta_pct", "error")
PLOT_COLUMNS = ("metric", "model", "system", "remote_bandwidth_tbps", "value_ms", "relative_to_baseline")


def _ms(ps: Optional[int]) -> str:
    return "" if ps is None else f"{ps / PS_PER_MS:.6f}"


def _pct(v: Optional[float]) -> str:
    return "" if v is None else f"{v:.4f}"


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def cells_csv(report: ComparisonReport) -> str:
    deltas = report.deltas()
    rows = []
    for c in report.cells:
        d = deltas[c.key]
        rows.append({
            "key": c.key,
            "hardware": c.hardware,
            "num_xpus": c.num_xpus,
            "remote_bandwidth_bytes_per_s": "" if c.remote_bandwidth is None else f"{c.remote_bandwidth:.6g}",
            "ttft_ms": _ms(c.ttft_ps),
            "tpot_ms": _ms(c.tpot_ps),
            "e2e_ms": _ms(c.e2e_ps),
            "peak_local_bytes": "" if c.peak_local_bytes is None else c.peak_local_bytes,
            "remote_read_bytes": "" if c.remote_read_bytes is None else c.remote_read_bytes,
            "remote_write_bytes": "" if c.remote_write_bytes is None else c.remote_write_bytes,
            "ttft_delta_pct": _pct(d["ttft_ps"]),
            "tpot_delta_pct": _pct(d["tpot_ps"]),
            "e2e_delta_pct": _pct(d["e2e_ps"]),
            "error": c.error or "",
        })
    return _csv(CELL_COLUMNS, rows)


def plot_csv(report: ComparisonReport) -> str:
    """Long-format plot data: one row per (metric, system, bandwidth) panel point."""
    base = report.baseline_cell
    model = report.scenario.get("model", "")
    rows = []
    for metric, attr in (("TTFT", "ttft_ps"), ("TPOT", "tpot_ps"), ("E2E", "e2e_ps")):
        for c in report.cells:
            v = getattr(c, attr)
            if v is None:
                continue
            b = getattr(base, attr)
            rows.append({
                "metric": metric,
                "model": model,
                "system": c.hardware,
                "remote_bandwidth_tbps": "" if c.remote_bandwidth is None else f"{c.remote_bandwidth / 1e12:g}",
                "value_ms": _ms(v),
                "relative_to_baseline": "" if not b else f"{v / b:.6f}",
            })
    return _csv(PLOT_COLUMNS, rows)


FORMATS = ("json", "csv", "plot")


def emit_report(report: ComparisonReport, out_dir: Union[str, Path], formats: Sequence[str] = FORMATS) -> List[Path]:
    """Write the requested report files and return their paths."""
    unknown = set(formats) - set(FORMATS)
    if unknown:
        raise ConfigError(f"unknown report formats {sorted(unknown)} (choose from {', '.join(FORMATS)})")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    written = []
    contents = {"json": ("report.json", report.to_json), "csv": ("cells.csv", lambda: cells_csv(report)),
                "plot": ("plot.csv", lambda: plot_csv(report))}
    for fmt in FORMATS:
        if fmt not in formats:
            continue
        name, render = contents[fmt]
        path = out / name
        try:
            path.write_text(render())
        except OSError as exc:
            raise ConfigError(f"cannot write {path}: {exc}") from None
        written.append(path)
    return written


def emit_timelines(phase_reports: Mapping[str, Tuple[SimReport, SimReport]], out_dir: Union[str, Path]) -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for key in sorted(phase_reports):
        for phase, rep in zip(("prefill", "decode"), phase_reports[key]):
            stem = f"{key}.{phase}".replace("/", "_")
            p = out / f"{stem}.jsonl"
            p.write_text(timeline_jsonl(rep))
            t = out / f"{stem}.trace.json"
            t.write_text(json.dumps(chrome_trace(rep), sort_keys=True) + "\n")
            written += [p, t]
    return written
