"""Command-line entry point (``tabsim``)."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path
from typing import List, Optional

from .comm import CollectiveKind, sweep_collectives, write_sweep_csv
from .config import efficiency_from_value, hardware_preset, model_preset, model_presets
from .exceptions import TabsimError
from .hardware import MiB
from .sim import PrefetchPolicy, discover_local_capacity
from .scenario import (
    FORMATS,
    Scenario,
    emit_report,
    emit_timelines,
    load_scenario,
    resolve,
    run_scenario,
)
from .trends import (
    HARDWARE_TREND_COLUMNS,
    MODEL_TREND_COLUMNS,
    hardware_sheets,
    hardware_trend_rows,
    model_trend_rows,
)
from .workload import Phase, TaskSpec, build_graph


def _csv_list(text: str) -> List[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _formats(text: str) -> List[str]:
    fmts = _csv_list(text)
    bad = [f for f in fmts if f not in FORMATS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown format(s) {bad}; choose from {', '.join(FORMATS)}")
    return fmts


def _write_rows(columns, rows, path: Optional[str]):
    if path:
        fh = open(path, "w", newline="")
    else:
        fh = sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    finally:
        if path:
            fh.close()


def _add_task_args(p: argparse.ArgumentParser):
    p.add_argument("--prompt-len", type=int, default=4096)
    p.add_argument("--gen-len", type=int, default=1024)
    p.add_argument("--batch", type=int, default=8)


def _add_efficiency(p: argparse.ArgumentParser):
    p.add_argument("--efficiency", choices=("default", "off"), default=None,
                   help="'off' pins bandwidth efficiency to 1.0 (exact latency equations)")


def cmd_run(args) -> int:
    if args.config:
        sc = load_scenario(args.config)
    else:
        if not args.model or not args.hardware:
            print("error: give a scenario config or both --model and --hardware", file=sys.stderr)
            return 2
        sc = Scenario(model=args.model, task=TaskSpec(args.prompt_len, args.gen_len, args.batch),
                      hardware=tuple(_csv_list(args.hardware)))
    overrides = {}
    if args.bandwidths:
        overrides["remote_bandwidths"] = tuple(float(b) * 1e12 for b in _csv_list(args.bandwidths))
    if args.efficiency:
        overrides["efficiency"] = args.efficiency
    if args.parallelism:
        overrides["parallelism"] = args.parallelism
    if args.moe_parallelism:
        overrides["moe_parallelism"] = args.moe_parallelism
    if args.window:
        overrides["policy"] = dataclasses.replace(sc.policy, window=args.window)
    if overrides:
        fields = {f: getattr(sc, f) for f in sc.__dataclass_fields__}
        fields.update(overrides)
        sc = Scenario(**fields)
    out = args.out or sc.output_dir or "tabsim-out"
    result = run_scenario(sc, keep_phase_reports=args.timeline)
    report = result.report if args.timeline else result
    for path in emit_report(report, out, args.format):
        print(path)
    if args.timeline:
        for path in emit_timelines(result.phase_reports, Path(out) / "timelines"):
            print(path)
    failed = [c for c in report.cells if not c.ok]
    for c in failed:
        print(f"cell {c.key} failed: {c.error}", file=sys.stderr)
    return 1 if failed else 0


def cmd_sweep(args) -> int:
    fabrics = []
    for name in _csv_list(args.hardware):
        hw = hardware_preset(name)
        if args.efficiency:
            hw = hw.with_efficiency(efficiency_from_value(args.efficiency))
        fabrics.append((name, hw.fabric))
    kinds = [CollectiveKind(k) for k in _csv_list(args.kinds)]
    sizes = [int(s) for s in _csv_list(args.sizes)]
    ns = [int(n) for n in _csv_list(args.participants)]
    text = write_sweep_csv(sweep_collectives(fabrics, kinds, sizes, ns), args.out)
    if not args.out:
        sys.stdout.write(text)
    else:
        print(args.out)
    return 0


def cmd_trends(args) -> int:
    task = TaskSpec(args.prompt_len, args.gen_len, args.batch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hw_path, model_path = out / "hardware_trends.csv", out / "model_trends.csv"
    _write_rows(HARDWARE_TREND_COLUMNS, hardware_trend_rows(hardware_sheets().values()), str(hw_path))
    models = model_presets().values()
    _write_rows(MODEL_TREND_COLUMNS, model_trend_rows(models, task, args.parallelism), str(model_path))
    print(hw_path)
    print(model_path)
    return 0


def cmd_discover(args) -> int:
    model = model_preset(args.model)
    hw = hardware_preset(args.hardware)
    if args.efficiency:
        hw = hw.with_efficiency(efficiency_from_value(args.efficiency))
    if args.bandwidth:
        hw = hw.with_remote_bandwidth(args.bandwidth * 1e12)
    task = TaskSpec(args.prompt_len, args.gen_len, args.batch)
    n = args.parallelism or hw.num_xpus
    policy = PrefetchPolicy(window=args.window)
    rows = []
    peak = 0
    for phase in (Phase.prefill(), Phase.decode()):
        g = build_graph(model, task, phase, n, moe_parallelism=args.moe_parallelism)
        b = discover_local_capacity(g, hw, policy)
        peak = max(peak, b)
        rows.append({"model": model.name, "hardware": hw.name, "phase": phase.kind, "peak_local_bytes": b,
                     "peak_local_gib": f"{b / (1024 * MiB):.3f}"})
    rows.append({"model": model.name, "hardware": hw.name, "phase": "max", "peak_local_bytes": peak,
                 "peak_local_gib": f"{peak / (1024 * MiB):.3f}"})
    _write_rows(("model", "hardware", "phase", "peak_local_bytes", "peak_local_gib"), rows, args.out)
    return 0


def cmd_validate(args) -> int:
    sc = load_scenario(args.config)
    model, hws = resolve(sc)
    for name, hw in hws.items():
        n = sc.parallelism or hw.num_xpus
        build_graph(model, sc.task, Phase.prefill(), n, moe_parallelism=sc.moe_parallelism)
    print(f"ok: model {model.name}, hardware {', '.join(hws)}, "
          f"{len(sc.remote_bandwidths) or 1} bandwidth point(s)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tabsim",
        description="Simulate LLM inference on TAB shared-memory systems and NVLink baselines.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a scenario and write reports")
    r.add_argument("config", nargs="?", help="scenario TOML file")
    r.add_argument("--model")
    r.add_argument("--hardware", help="comma-separated hardware presets (first is the baseline)")
    r.add_argument("--bandwidths", help="comma-separated remote bandwidth sweep in TB/s")
    r.add_argument("--out", help="output directory")
    r.add_argument("--format", type=_formats, default=list(FORMATS), help="comma list of json,csv,plot")
    r.add_argument("--parallelism", type=int)
    r.add_argument("--moe-parallelism", choices=("expert", "tensor"))
    r.add_argument("--window", type=int, help="prefetch window")
    r.add_argument("--timeline", action="store_true", help="also write per-cell timelines")
    _add_task_args(r)
    _add_efficiency(r)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep-collectives", help="tabulate collective times as CSV")
    s.add_argument("--hardware", default="baseline8,fh4-1.5xM")
    s.add_argument("--kinds", default=",".join(k.value for k in CollectiveKind))
    s.add_argument("--sizes", default=",".join(str(1 << e) for e in range(10, 31, 2)))
    s.add_argument("--participants", default="2,4,8")
    s.add_argument("--out")
    _add_efficiency(s)
    s.set_defaults(func=cmd_sweep)

    t = sub.add_parser("trends", help="write hardware and model ratio tables")
    t.add_argument("--out", default="tabsim-trends")
    t.add_argument("--parallelism", type=int, default=8)
    _add_task_args(t)
    t.set_defaults(func=cmd_trends)

    d = sub.add_parser("discover-capacity", help="peak local memory of an unbounded run")
    d.add_argument("--model", required=True)
    d.add_argument("--hardware", required=True)
    d.add_argument("--bandwidth", type=float, help="remote bandwidth in TB/s")
    d.add_argument("--parallelism", type=int)
    d.add_argument("--moe-parallelism", choices=("expert", "tensor"), default="expert")
    d.add_argument("--window", type=int, default=1)
    d.add_argument("--out")
    _add_task_args(d)
    _add_efficiency(d)
    d.set_defaults(func=cmd_discover)

    v = sub.add_parser("validate-config", help="check a scenario file and its presets")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TabsimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
