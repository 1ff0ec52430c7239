import json
from pathlib import Path

import pytest

from tabsim.config import hardware_preset
from tabsim.exceptions import ConfigError, PresetNotFoundError
from tabsim.scenario import (
    CellResult,
    ComparisonReport,
    Scenario,
    cell_key,
    cells_csv,
    emit_report,
    percent_delta,
    plot_csv,
    run_scenario,
)
from tabsim.sim import PrefetchPolicy
from tabsim.workload import TaskSpec

GOLDEN = json.loads((Path(__file__).parent / "golden" / "report_schema.json").read_text())
QA = TaskSpec(4096, 1024, 8)
SWEEP = (4.0e12, 4.8e12, 6.4e12)


@pytest.fixture(scope="module")
def gpt3_report():
    return run_scenario(Scenario("gpt3-175b", QA, ("baseline8", "fh4-1.5xM"), SWEEP))


def test_self_baseline_has_zero_deltas():
    r = run_scenario(Scenario("grok1", TaskSpec(256, 8, 2), ("fh4-1.5xM",)))
    assert len(r.cells) == 1
    assert r.deltas() == {r.baseline: {"ttft_ps": 0.0, "tpot_ps": 0.0, "e2e_ps": 0.0}}


def test_sweep_cells_and_monotone_tpot(gpt3_report):
    keys = [c.key for c in gpt3_report.cells]
    assert keys == ["baseline8", "fh4-1.5xM@4TBps", "fh4-1.5xM@4.8TBps", "fh4-1.5xM@6.4TBps"]
    tab = [c for c in gpt3_report.cells if c.hardware == "fh4-1.5xM"]
    assert len(tab) == 3
    for slow, fast in zip(tab, tab[1:]):
        assert fast.tpot_ps <= slow.tpot_ps
    assert all(c.ok for c in gpt3_report.cells)


def test_deltas_recompute_from_cells(gpt3_report):
    base = gpt3_report.baseline_cell
    for c in gpt3_report.cells:
        d = gpt3_report.deltas()[c.key]
        for m in ("ttft_ps", "tpot_ps", "e2e_ps"):
            assert d[m] == (getattr(c, m) - getattr(base, m)) / getattr(base, m) * 100


def test_gpu_savings_follows_definition(gpt3_report):
    base = gpt3_report.baseline_cell
    expected = {c.key: 2.0 for c in gpt3_report.cells if c.hardware == "fh4-1.5xM" and c.e2e_ps <= base.e2e_ps}
    assert gpt3_report.gpu_savings() == expected


def _cell(key, hw, n, e2e):
    return CellResult(key, hw, n, None, ttft_ps=e2e // 2, tpot_ps=1, e2e_ps=e2e)


def test_gpu_savings_ratio_of_xpu_counts():
    r = ComparisonReport({}, "base", (_cell("base", "base", 8, 100), _cell("fast4", "fh", 4, 100),
                                      _cell("slow4", "fh", 4, 101), _cell("fast8", "x", 8, 50)))
    assert r.gpu_savings() == {"fast4": 2.0}


def test_percent_delta():
    assert percent_delta(90, 100) == -10.0
    assert percent_delta(125, 100) == 25.0


def test_cell_key():
    assert cell_key("fh4-1.5xM", 4.8e12) == "fh4-1.5xM@4.8TBps"
    assert cell_key("baseline8", None) == "baseline8"


def test_json_round_trip(gpt3_report):
    back = ComparisonReport.from_json(gpt3_report.to_json())
    assert back == ComparisonReport.from_json(back.to_json())
    assert back.cells == gpt3_report.cells
    assert back.to_json() == gpt3_report.to_json()


def test_schema_version_checked(gpt3_report):
    d = json.loads(gpt3_report.to_json())
    d["schema_version"] = 99
    with pytest.raises(ConfigError):
        ComparisonReport.from_json(json.dumps(d))


def test_report_schema_matches_golden(gpt3_report):
    d = json.loads(gpt3_report.to_json())
    assert d["schema_version"] == GOLDEN["schema_version"]
    assert sorted(d) == GOLDEN["top_level"]
    assert sorted(d["scenario"]) == GOLDEN["scenario"]
    assert all(sorted(c) == GOLDEN["cell"] for c in d["cells"])
    assert all(sorted(v) == GOLDEN["delta"] for v in d["deltas_percent"].values())
    assert cells_csv(gpt3_report).splitlines()[0] == GOLDEN["cells_csv_header"]
    assert plot_csv(gpt3_report).splitlines()[0] == GOLDEN["plot_csv_header"]


def test_csv_rows(gpt3_report):
    assert len(cells_csv(gpt3_report).splitlines()) == len(gpt3_report.cells) + 1
    plot = plot_csv(gpt3_report).splitlines()
    assert len(plot) == 3 * len(gpt3_report.cells) + 1
    baseline_rows = [r for r in plot if ",baseline8," in r]
    assert len(baseline_rows) == 3
    assert all(r.endswith(",1.000000") for r in baseline_rows)


def test_emit_report_is_byte_stable(tmp_path):
    sc = Scenario("qwen3-235b", TaskSpec(512, 32, 2), ("baseline8", "fh4-2.0xM"), (4.0e12,),
                  moe_parallelism="tensor")
    a = emit_report(run_scenario(sc), tmp_path / "a")
    b = emit_report(run_scenario(sc), tmp_path / "b")
    assert [p.name for p in a] == ["report.json", "cells.csv", "plot.csv"]
    for x, y in zip(a, b):
        assert x.read_bytes() == y.read_bytes()


def test_emit_report_subset_and_errors(tmp_path):
    r = ComparisonReport({}, "base", (_cell("base", "base", 8, 100),))
    assert [p.name for p in emit_report(r, tmp_path, ["csv"])] == ["cells.csv"]
    with pytest.raises(ConfigError):
        emit_report(r, tmp_path, ["pdf"])
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(ConfigError):
        emit_report(r, blocker / "sub")


def test_failed_cell_is_reported_not_raised():
    tiny = {"tiny-tab": {
        "num_xpus": 4, "remote_mem_capacity_bytes": 1 << 40,
        "xpu": {"compute_fp16_flops": 1e15, "local_mem_bandwidth_bytes_per_s": 1e12,
                "local_mem_capacity_bytes": 1 << 20},
        "fabric": {"kind": "tab_shared_memory", "per_gpu_bandwidth_bytes_per_s": 4e12, "read_latency_ns": 220,
                   "write_latency_ns": 90, "notification_latency_ns": 40},
    }}
    assert hardware_preset("tiny-tab", tiny).xpu.local_mem_capacity == 1 << 20
    sc = Scenario("grok1", TaskSpec(64, 4, 1), ("fh4-1.5xM", "tiny-tab"), custom_hardware=tiny)
    r = run_scenario(sc)
    assert not r.ok
    bad = r.cell("tiny-tab")
    assert bad.error.startswith("DeadlockError")
    assert r.cell("fh4-1.5xM").ok
    assert r.deltas()["tiny-tab"]["e2e_ps"] is None


def test_missing_preset_raises():
    with pytest.raises(PresetNotFoundError):
        run_scenario(Scenario("gpt3-175b", QA, ("baseline9",)))


class TestScenarioValidation:
    def test_needs_hardware(self):
        with pytest.raises(ConfigError):
            Scenario("gpt3-175b", QA, ())

    def test_positive_sweep(self):
        with pytest.raises(ConfigError):
            Scenario("gpt3-175b", QA, ("baseline8",), (0.0,))

    def test_baseline_must_be_listed(self):
        with pytest.raises(ConfigError):
            Scenario("gpt3-175b", QA, ("baseline8",), baseline="fh4-1.5xM")

    def test_explicit_baseline(self):
        sc = Scenario("grok1", TaskSpec(64, 4, 1), ("fh4-1.5xM", "baseline8"), baseline="baseline8",
                      policy=PrefetchPolicy(window=2))
        r = run_scenario(sc)
        assert r.baseline == "baseline8"
        assert r.scenario["policy"]["window"] == 2
