import json
import statistics
from fractions import Fraction

import numpy as np
import pytest

from edgesplit.costmodel import (LayerCost, Link, Profile, analytic_profile, evaluate_mapping, layer_macs,
                                 load_profile, profile_layers, stage_times)
from edgesplit.errors import MissingProfileEntry
from edgesplit.runtime import launch
from edgesplit.runtime.rank import RUNTIME_OVERHEAD_BYTES
from edgesplit.specio import MappingSpec, parse_key
from edgesplit.toolchain import build_packages
from edgesplit.zoo import GraphBuilder, chain_model

from conftest import DIAMOND, load_json, random_mappings


def _flat_profile(m, ms_per_layer=10.0, kinds=("cpu1", "cpu2", "cpu3", "cpu6", "gpu")):
    return Profile({n: LayerCost({k: ms_per_layer for k in kinds}, {k: 1.0 for k in kinds}) for n in m.hidden_layers})


def test_four_equal_stages():
    m = chain_model(4)
    prof = _flat_profile(m)
    four = MappingSpec([(parse_key(f"d{i}_arm0"), [f"L{i}"]) for i in range(4)])
    one = MappingSpec([(parse_key("d0_arm0"), m.hidden_layers)])
    a, b = evaluate_mapping(m, four, prof), evaluate_mapping(m, one, prof)
    assert a.throughput_fps == 100.0 and b.throughput_fps == 25.0
    assert Fraction(a.throughput_fps) / Fraction(b.throughput_fps) == 4
    prof.inter = Link(None, 2.0)
    assert evaluate_mapping(m, four, prof).throughput_fps == 1000 / 12
    assert stage_times(m, four, prof) == [11.0, 12.0, 12.0, 11.0]


def test_single_rank_memory_is_weights_plus_overhead():
    m = chain_model(3)
    ms = MappingSpec([(parse_key("d_arm0"), m.hidden_layers)])
    v = evaluate_mapping(m, ms, _flat_profile(m))
    assert v.max_device_memory_mb == (m.weights.total_bytes + RUNTIME_OVERHEAD_BYTES) / 2**20


def test_diamond_hand_worksheet(diamond):
    m, _, ms = diamond
    prof = load_profile(DIAMOND / "profile.json")
    want = load_json(DIAMOND / "expected_objectives.json")
    v = evaluate_mapping(m, ms, prof)
    assert stage_times(m, ms, prof) == pytest.approx(want["stage_ms"], rel=1e-12)
    assert v.max_device_energy_mj == pytest.approx(want["max_device_energy_mj"], rel=1e-12)
    assert v.throughput_fps == pytest.approx(want["throughput_fps"], rel=1e-12)
    assert v.max_device_memory_mb == pytest.approx(want["max_device_memory_mb"], rel=1e-12)


def test_contending_ranks_serialize():
    m = chain_model(2)
    prof = _flat_profile(m)
    apart = MappingSpec([(parse_key("d_arm01"), ["L0"]), (parse_key("d_arm23"), ["L1"])])
    shared = MappingSpec([(parse_key("d_arm01"), ["L0"]), (parse_key("d_arm12"), ["L1"])])
    assert evaluate_mapping(m, apart, prof).throughput_fps == 100.0
    assert evaluate_mapping(m, shared, prof).throughput_fps == 50.0


def test_gpu_rank_counts_weights_twice():
    m = chain_model(1)
    prof = _flat_profile(m)
    cpu = evaluate_mapping(m, MappingSpec([(parse_key("d_arm0"), ["L0"])]), prof)
    gpu = evaluate_mapping(m, MappingSpec([(parse_key("d_gpu"), ["L0"])]), prof)
    assert (gpu.max_device_memory_mb - cpu.max_device_memory_mb) * 2**20 == pytest.approx(m.weights.total_bytes)


def _device_terms(m, ms, prof):
    from edgesplit.costmodel import _Evaluator
    from edgesplit.specio import layer_owners
    v, _ = _Evaluator(m, prof).evaluate_detail(ms.keys, layer_owners(m, ms))
    return v


def test_colocating_ranks_never_lowers_device_terms(toy):
    # equal intra/inter links make co-location a pure change of device membership
    prof = analytic_profile(toy, {"cpu1": 1000.0}, {"cpu1": 1.0}, Link(1000.0, 0.1, 0.01), Link(1000.0, 0.1, 0.01))
    rng = np.random.default_rng(5)
    for _ in range(30):
        n = len(toy.hidden_layers)
        genes = rng.integers(0, 3, size=n)
        genes[:3] = [0, 1, 2]
        groups = {}
        for layer, g in zip(toy.hidden_layers, genes):
            groups.setdefault(int(g), []).append(layer)
        apart = MappingSpec([(parse_key(f"d{g}_arm{g}"), ls) for g, ls in groups.items()])
        # move the rank on d1 onto d0 (different core, so no contention)
        together = MappingSpec([(parse_key(f"d{0 if g == 1 else g}_arm{g}"), ls) for g, ls in groups.items()])
        a, b = evaluate_mapping(toy, apart, prof), evaluate_mapping(toy, together, prof)
        assert b.max_device_energy_mj >= a.max_device_energy_mj * (1 - 1e-12)
        assert b.max_device_memory_mb >= a.max_device_memory_mb


def test_rank_permutation_invariance(toy):
    prof = analytic_profile(toy, {"cpu1": 900.0, "cpu6": 4000.0, "cpu4": 3000.0, "cpu8": 5000.0, "gpu": 9000.0},
                            {"cpu1": 1.0, "cpu6": 5.0, "cpu4": 3.5, "cpu8": 6.0, "gpu": 7.0},
                            Link(2000.0, 0.2, 0.02), Link(20000.0, 0.01, 0.001))
    for ms in random_mappings(toy, 20, seed=31):
        rev = MappingSpec(list(reversed(ms.assignments)))
        a, b = evaluate_mapping(toy, ms, prof), evaluate_mapping(toy, rev, prof)
        assert b.throughput_fps == pytest.approx(a.throughput_fps, rel=1e-12)
        assert sorted(stage_times(toy, rev, prof)) == pytest.approx(sorted(stage_times(toy, ms, prof)), rel=1e-12)
        assert evaluate_mapping(toy, ms, prof) == a


def test_missing_entries(diamond):
    m, _, ms = diamond
    prof = load_profile(DIAMOND / "profile.json")
    del prof.layers["FC1"]
    with pytest.raises(MissingProfileEntry, match="FC1"):
        evaluate_mapping(m, ms, prof)
    with pytest.raises(MissingProfileEntry):
        prof.check_covers(m)
    prof = load_profile(DIAMOND / "profile.json")
    moved = MappingSpec([(parse_key("edge01_arm12"), ["MaxPool1", "Add1"]), *ms.assignments[1:]])
    with pytest.raises(MissingProfileEntry, match="cpu2"):
        evaluate_mapping(m, moved, prof)


def test_profile_json_round_trip():
    prof = load_profile(DIAMOND / "profile.json")
    assert Profile.from_json(json.loads(prof.dumps())) == prof


def test_profile_identity_conv():
    g = GraphBuilder("idconv")
    x = g.input((1, 4, 8, 8))
    g.weights.add("c.w", np.eye(4, dtype=np.float32).reshape(4, 4, 1, 1))
    g.weights.add("c.b", np.zeros(4, np.float32))
    g.add("c", "Conv2D", [x], {"kernel": 1}, ["c.w", "c.b"])
    g.output("c")
    m = g.build()
    prof = profile_layers(m, repeats=3, thread_counts=[1, 4], measure_link=False)
    assert prof.layers["c"].latency_ms["cpu1"] > 0 and prof.layers["c"].latency_ms["cpu4"] > 0
    assert prof.layers["c"].weight_bytes == 80 and prof.layers["c"].output_bytes == 4 * 8 * 8 * 4


def _schema(prof):
    return {n: (sorted(c.latency_ms), sorted(c.energy_mj)) for n, c in prof.layers.items()}


def test_profile_schema_independent_of_repeats(toy):
    a = profile_layers(toy, repeats=1, thread_counts=[1, 2], gpu=True, measure_link=False)
    b = profile_layers(toy, repeats=20, thread_counts=[1, 2], gpu=True, measure_link=False)
    assert _schema(a) == _schema(b)
    assert json.loads(a.dumps()).keys() == json.loads(b.dumps()).keys()
    with pytest.raises(ValueError):
        profile_layers(toy, repeats=0)


def test_profile_predicts_measured_throughput(toy, tmp_path):
    prof = profile_layers(toy, repeats=5, thread_counts=[1], measure_link=False)
    ms = MappingSpec([(parse_key("d_arm0"), toy.hidden_layers)])
    predicted = evaluate_mapping(toy, ms, prof).throughput_fps
    dirs, _, _ = build_packages(toy, ms, tmp_path)
    measured = statistics.median(launch(dirs, repeat=20).throughput_fps for _ in range(3))
    assert 0.5 <= measured / predicted <= 2.0, (measured, predicted)


def test_layer_macs(toy):
    assert layer_macs(toy, "conv1") == 8 * 16 * 16 * 3 * 9
    assert layer_macs(toy, "fc1") == 10 * 256
    assert layer_macs(toy, "input") == 0
