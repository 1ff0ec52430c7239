"""TOML configuration: presets, includes and unit-explicit keys.

A config file may carry ``include = ["other.toml", ...]``; included files are
merged first (depth first) and the including file's tables win key by key.
Every dimensioned key names its unit (``*_bytes``, ``*_ns``,
``*_bytes_per_s``, ``*_flops``); unknown keys are rejected so a unit-less or
misspelt key cannot be silently ignored.
"""

from __future__ import annotations

import copy
import sys
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

from .exceptions import ConfigError, PresetNotFoundError
from .hardware import (
    DEFAULT_MFU_CURVE,
    BandwidthEfficiency,
    FabricSpec,
    HardwareConfig,
    XpuSpec,
)
from .workload import ModelSpec

UNBOUNDED = "unbounded"


def _read_toml(path: Path) -> Dict[str, Any]:
    try:
        with path.open("rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _deep_merge(base: Dict[str, Any], over: Mapping[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_toml(path: Union[str, Path], _stack: tuple = ()) -> Dict[str, Any]:
    """Load ``path`` and resolve its ``include`` list (relative to the file)."""
    path = Path(path).resolve()
    if path in _stack:
        chain = " -> ".join(str(p) for p in _stack + (path,))
        raise ConfigError(f"include cycle: {chain}")
    data = _read_toml(path)
    includes = data.pop("include", [])
    if isinstance(includes, str):
        includes = [includes]
    merged: Dict[str, Any] = {}
    for inc in includes:
        merged = _deep_merge(merged, load_toml(path.parent / inc, _stack + (path,)))
    return _deep_merge(merged, data)


def _data_table(filename: str) -> Dict[str, Any]:
    text = resources.files("tabsim").joinpath("data", filename).read_text()
    return tomllib.loads(text)


def _take(table: Mapping[str, Any], allowed: set, where: str) -> Dict[str, Any]:
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)} (allowed: {sorted(allowed)})")
    return dict(table)


def efficiency_from_value(value: Any, where: str = "efficiency") -> BandwidthEfficiency:
    """``"default"``, ``"off"`` (constant 1.0) or a table with ``knots = [[bytes, fraction], ...]``."""
    if value is None or value == "default":
        return BandwidthEfficiency.default()
    if value == "off":
        return BandwidthEfficiency.constant(1.0)
    if isinstance(value, Mapping):
        _take(value, {"knots"}, where)
        try:
            return BandwidthEfficiency(tuple(tuple(k) for k in value["knots"]))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"{where}: bad knots ({exc})") from None
    raise ConfigError(f"{where}: expected 'default', 'off' or a knots table, got {value!r}")


def _capacity(value: Any, where: str) -> Optional[int]:
    if value is None or value == UNBOUNDED:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise ConfigError(f"{where}: capacity must be an integer byte count or 'unbounded'")
    return int(value)


_XPU_KEYS = {"compute_fp16_flops", "compute_scale", "local_mem_bandwidth_bytes_per_s",
             "local_mem_capacity_bytes", "mfu_curve"}
_FABRIC_KEYS = {"kind", "per_gpu_bandwidth_bytes_per_s", "peak_bandwidth_bytes_per_s", "read_latency_ns",
                "write_latency_ns", "notification_latency_ns", "efficiency"}
_HW_KEYS = {"num_xpus", "remote_mem_capacity_bytes", "xpu", "fabric"}


def hardware_from_dict(name: str, table: Mapping[str, Any]) -> HardwareConfig:
    where = f"hardware {name!r}"
    t = _take(table, _HW_KEYS, where)
    try:
        x = _take(t["xpu"], _XPU_KEYS, f"{where}.xpu")
        f = _take(t["fabric"], _FABRIC_KEYS, f"{where}.fabric")
        xpu = XpuSpec(
            compute_fp16=float(x["compute_fp16_flops"]),
            local_mem_bandwidth=float(x["local_mem_bandwidth_bytes_per_s"]),
            local_mem_capacity=_capacity(x.get("local_mem_capacity_bytes"), f"{where}.xpu"),
            compute_scale=float(x.get("compute_scale", 1.0)),
            mfu_curve=tuple(tuple(p) for p in x.get("mfu_curve", DEFAULT_MFU_CURVE)),
        )
        peak = f.get("peak_bandwidth_bytes_per_s")
        fabric = FabricSpec(
            kind=f["kind"],
            per_gpu_bandwidth=float(f["per_gpu_bandwidth_bytes_per_s"]),
            read_latency_ns=float(f["read_latency_ns"]),
            write_latency_ns=float(f["write_latency_ns"]),
            notification_latency_ns=float(f.get("notification_latency_ns", 0.0)),
            efficiency=efficiency_from_value(f.get("efficiency"), f"{where}.fabric.efficiency"),
            peak_bandwidth=None if peak is None else float(peak),
        )
        remote = t.get("remote_mem_capacity_bytes")
        return HardwareConfig(
            name=name,
            num_xpus=int(t["num_xpus"]),
            xpu=xpu,
            fabric=fabric,
            remote_mem_capacity=None if remote is None else int(remote),
        )
    except KeyError as exc:
        raise ConfigError(f"{where}: missing key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from None


_MODEL_KEYS = {f for f in ModelSpec.__dataclass_fields__ if f != "name"}


def model_from_dict(name: str, table: Mapping[str, Any]) -> ModelSpec:
    where = f"model {name!r}"
    t = _take(table, _MODEL_KEYS, where)
    try:
        return ModelSpec(name=name, **t)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def hardware_presets() -> Dict[str, HardwareConfig]:
    return {name: hardware_from_dict(name, t) for name, t in _data_table("hardware.toml").items()}


def model_presets() -> Dict[str, ModelSpec]:
    return {name: model_from_dict(name, t) for name, t in _data_table("models.toml").items()}


def hardware_preset(name: str, extra: Optional[Mapping[str, Any]] = None) -> HardwareConfig:
    """Look up ``name`` among tables in ``extra`` (a loaded config) then the shipped presets."""
    if extra and name in extra:
        return hardware_from_dict(name, extra[name])
    table = _data_table("hardware.toml")
    if name not in table:
        raise PresetNotFoundError("hardware", name, sorted(set(table) | set(extra or {})))
    return hardware_from_dict(name, table[name])


def model_preset(name: str, extra: Optional[Mapping[str, Any]] = None) -> ModelSpec:
    if extra and name in extra:
        return model_from_dict(name, extra[name])
    table = _data_table("models.toml")
    if name not in table:
        raise PresetNotFoundError("model", name, sorted(set(table) | set(extra or {})))
    return model_from_dict(name, table[name])


def hardware_sheet_table() -> Dict[str, Dict[str, Any]]:
    return _data_table("hardware_sheets.toml")
