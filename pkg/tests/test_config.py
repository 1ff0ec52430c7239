import pytest

from tabsim.config import (
    efficiency_from_value,
    hardware_from_dict,
    hardware_preset,
    hardware_presets,
    load_toml,
    model_preset,
    model_presets,
)
from tabsim.exceptions import ConfigError, PresetNotFoundError
from tabsim.hardware import GiB, TB, FabricKind
from tabsim.scenario import load_scenario, resolve


def test_shipped_presets_load():
    assert set(hardware_presets()) == {"baseline8", "fh4-1.5xM", "fh4-2.0xM"}
    assert set(model_presets()) == {"gpt3-175b", "grok1", "qwen3-235b"}


def test_baseline_and_tab_presets():
    base = hardware_preset("baseline8")
    assert base.num_xpus == 8
    assert base.fabric.kind is FabricKind.NVLINK_RING
    assert base.xpu.local_mem_capacity == 144 * GiB
    assert not base.has_remote_memory

    fh = hardware_preset("fh4-1.5xM")
    assert fh.num_xpus == 4
    assert fh.remote_mem_capacity == 1152 * GiB
    assert fh.xpu.flops == pytest.approx(989.4e12 * 1.33)
    assert fh.xpu.local_mem_bandwidth == pytest.approx(1.5 * 4.8e12)
    assert hardware_preset("fh4-2.0xM").xpu.local_mem_bandwidth == pytest.approx(2.0 * 4.8e12)
    assert fh.xpu.local_mem_capacity is None
    assert fh.fabric.per_gpu_bandwidth == 4.0 * TB


def test_unknown_preset_lists_available():
    with pytest.raises(PresetNotFoundError) as exc:
        hardware_preset("nope")
    assert "baseline8" in str(exc.value)
    with pytest.raises(PresetNotFoundError):
        model_preset("gpt5")


def _hw_table(**over):
    t = {
        "num_xpus": 4,
        "remote_mem_capacity_bytes": 1 << 40,
        "xpu": {"compute_fp16_flops": 1e15, "local_mem_bandwidth_bytes_per_s": 1e12},
        "fabric": {"kind": "tab_shared_memory", "per_gpu_bandwidth_bytes_per_s": 4e12, "read_latency_ns": 220,
                   "write_latency_ns": 90, "notification_latency_ns": 40},
    }
    t.update(over)
    return t


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown keys"):
        hardware_from_dict("x", _hw_table(colour="blue"))
    bad = _hw_table()
    bad["xpu"]["hbm"] = 1
    with pytest.raises(ConfigError, match="unknown keys"):
        hardware_from_dict("x", bad)


def test_missing_key_named():
    t = _hw_table()
    del t["fabric"]["read_latency_ns"]
    with pytest.raises(ConfigError, match="read_latency_ns"):
        hardware_from_dict("x", t)


def test_unbounded_capacity():
    t = _hw_table()
    t["xpu"]["local_mem_capacity_bytes"] = "unbounded"
    assert hardware_from_dict("x", t).xpu.local_mem_capacity is None
    t["xpu"]["local_mem_capacity_bytes"] = 1.5
    with pytest.raises(ConfigError):
        hardware_from_dict("x", t)


def test_efficiency_values():
    assert efficiency_from_value("off")(1) == 1.0
    assert efficiency_from_value("default")(1) == 0.25
    assert efficiency_from_value({"knots": [[1, 0.5], [2, 0.5]]})(10) == 0.5
    with pytest.raises(ConfigError):
        efficiency_from_value("fast")


def test_includes_merge_and_override(tmp_path):
    (tmp_path / "base.toml").write_text('[a]\nx = 1\ny = 2\n[b]\nz = 3\n')
    (tmp_path / "top.toml").write_text('include = ["base.toml"]\n[a]\ny = 20\n')
    assert load_toml(tmp_path / "top.toml") == {"a": {"x": 1, "y": 20}, "b": {"z": 3}}


def test_include_cycle(tmp_path):
    (tmp_path / "a.toml").write_text('include = "b.toml"\n')
    (tmp_path / "b.toml").write_text('include = "a.toml"\n')
    with pytest.raises(ConfigError, match="cycle"):
        load_toml(tmp_path / "a.toml")


def test_missing_file_and_bad_toml(tmp_path):
    with pytest.raises(ConfigError):
        load_toml(tmp_path / "missing.toml")
    (tmp_path / "bad.toml").write_text("[a\n")
    with pytest.raises(ConfigError):
        load_toml(tmp_path / "bad.toml")


SCENARIO = """
[scenario]
model = "tiny"
hardware = ["baseline8", "mine"]
remote_bandwidth_sweep_bytes_per_s = [2e12, 4e12]

[task]
prompt_len = 32
gen_len = 4
batch = 2

[policy]
window = 2

[model.tiny]
num_layers = 1
hidden_size = 64
num_heads = 8
kv_heads = 8
head_dim = 8
ffn_intermediate = 256
vocab_size = 800

[hardware.mine]
num_xpus = 4
remote_mem_capacity_bytes = 1099511627776
[hardware.mine.xpu]
compute_fp16_flops = 1e15
local_mem_bandwidth_bytes_per_s = 1e12
[hardware.mine.fabric]
kind = "tab_shared_memory"
per_gpu_bandwidth_bytes_per_s = 4e12
read_latency_ns = 220
write_latency_ns = 90
notification_latency_ns = 40
"""


def test_scenario_with_custom_tables(tmp_path):
    p = tmp_path / "s.toml"
    p.write_text(SCENARIO)
    sc = load_scenario(p)
    assert sc.policy.window == 2
    assert sc.remote_bandwidths == (2e12, 4e12)
    model, hws = resolve(sc)
    assert model.hidden_size == 64
    assert list(hws) == ["baseline8", "mine"]


def test_scenario_unknown_table(tmp_path):
    p = tmp_path / "s.toml"
    p.write_text(SCENARIO + "\n[extras]\nx = 1\n")
    with pytest.raises(ConfigError):
        load_scenario(p)


def test_scenario_unknown_preset(tmp_path):
    p = tmp_path / "s.toml"
    p.write_text(SCENARIO.replace('"mine"]', '"yours"]'))
    with pytest.raises(PresetNotFoundError):
        resolve(load_scenario(p))
