"""Acceptance suite: one PASS/FAIL line per criterion, with its measured value and wall time.

Run with ``pytest tests/test_acceptance.py -v``; the lines are printed even when
output capture is on.
"""

import csv
import json
import os
import time
from fractions import Fraction

import numpy as np
import pytest

from edgesplit.cli import main as cli_main
from edgesplit.commgen import gen_comm_tables, gen_rankfile
from edgesplit.costmodel import LayerCost, Link, Profile, evaluate_mapping
from edgesplit.dse import GAConfig, crowding_distance, exhaustive_pareto, nondominated_sort, run_nsga2, write_results
from edgesplit.errors import PlanError
from edgesplit.model import save_model
from edgesplit.plangen import ExecutionPlan, check_plan
from edgesplit.runtime import infer_reference, launch
from edgesplit.specio import MappingSpec, layer_owners, parse_key
from edgesplit.splitter import cut_edges, split_model
from edgesplit.toolchain import back_end, build_packages, front_end
from edgesplit.zoo import chain_model, synthetic_large

import test_roundtrip as rt
from conftest import random_mappings
from dse_instance import instance
from oracles import forward_f64, fronts_bruteforce


@pytest.fixture
def report(capsys):
    t0 = time.perf_counter()

    def emit(n, ok, detail, soft=False):
        verdict = ("PASS" if ok else "FAIL") + (" (soft, not enforced)" if soft else "")
        with capsys.disabled():
            print(f"\n[criterion {n}] {verdict}: {detail} ({time.perf_counter() - t0:.2f} s)")
        return ok

    return emit


def test_criterion_1_diamond_golden(diamond, report):
    t0 = time.perf_counter()
    m, _, ms = diamond
    subs = split_model(m, ms)
    st, rtab = gen_comm_tables(cut_edges(m, ms))
    rf = gen_rankfile(ms)
    checks = {
        "3 sub-models": len(subs) == 3,
        "senders rank 0": st.for_rank(0) == [("Buff1", [1, 2]), ("Buff4", [2])],
        "receivers rank 2": rtab.for_rank(2) == [("Buff1", 0), ("Buff4", 0)],
        "rank 0 on edge01 slots 1,2,3": (rf.entries[0].device, tuple(rf.entries[0].slots)) == ("edge01", (1, 2, 3)),
        "ranks 0-1 on edge01": [e.device for e in rf.entries[:2]] == ["edge01", "edge01"],
        "rank 2 on edge04": rf.entries[2].device == "edge04",
    }
    elapsed = time.perf_counter() - t0
    bad = [k for k, v in checks.items() if not v]
    ok = not bad and elapsed < 1.0
    report(1, ok, f"structure {'exact' if not bad else 'differs: ' + ', '.join(bad)}, {elapsed * 1000:.1f} ms < 1 s")
    assert ok


def test_criterion_2_functional_equivalence(toy, tmp_path, report):
    t0 = time.perf_counter()
    x = np.random.default_rng(2024).random((1, 3, 16, 16), dtype=np.float32)
    ref = infer_reference(toy, x)
    oracle = forward_f64(toy, x)
    worst, identical = 0.0, 0
    mappings = random_mappings(toy, 20, seed=2)
    for i, ms in enumerate(mappings):
        dirs, _, _ = build_packages(toy, ms, tmp_path / f"m{i}")
        out = launch(dirs, repeat=1, input=x, timeout=30).outputs[0]
        identical += bool(np.array_equal(out, ref))
        rel = np.abs(out.astype(np.float64) - oracle) / np.maximum(np.abs(oracle), 1e-30)
        worst = max(worst, float(rel.max()))
    elapsed = time.perf_counter() - t0
    ops = {l.op for l in toy.layers}
    ok = identical == 20 and worst <= 1e-4 and elapsed < 120 and len(toy.hidden_layers) >= 8 and ops >= {
        "Conv2D", "MaxPool2D", "Add", "Concat", "FullyConnected", "BatchNorm", "ReLU", "Softmax"}
    ranks = sorted({len(ms) for ms in mappings})
    report(2, ok, f"{identical}/20 bit-identical over {ranks} ranks, worst rel err vs f64 oracle {worst:.2e} <= 1e-4")
    assert ok


def test_criterion_3_structural_invariants(toy, report):
    t0 = time.perf_counter()
    failures = []
    mappings = random_mappings(toy, 100, seed=3)
    for i, ms in enumerate(mappings):
        fe = front_end(toy, ms)
        subs = fe.submodels
        sets = [set(sm.layer_names) for sm in subs]
        owners = layer_owners(toy, ms)
        sent = {(s, b, d) for s, es in fe.senders.sends.items() for b, ds in es for d in ds}
        recv = {(s, b, d) for d, es in fe.receivers.recvs.items() for b, s in es}
        if len(subs) != len({k.text for k in ms.keys}):
            failures.append(f"{i}: count")
        if sum(map(len, sets)) != len(toy.layers) or set().union(*sets) != set(toy.by_name):
            failures.append(f"{i}: partition")
        if any(owners[n] != sm.rank for sm in subs for n in sm.layer_names):
            failures.append(f"{i}: owner")
        if sent != recv:
            failures.append(f"{i}: duality")
        if sum(sm.weights.total_bytes for sm in subs) != toy.weights.total_bytes:
            failures.append(f"{i}: weight bytes")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 30
    report(3, ok, f"100 mappings, {len(failures)} violations {failures[:3]}, {elapsed:.2f} s < 30 s")
    assert ok


def test_criterion_4_deadlock_freedom(toy, diamond, tmp_path, report):
    x = np.random.default_rng(4).random((1, 3, 16, 16), dtype=np.float32)
    ref = infer_reference(toy, x)
    done, slowest = 0, 0.0
    for i, ms in enumerate(random_mappings(toy, 100, seed=4)):
        dirs, _, _ = build_packages(toy, ms, tmp_path / f"m{i}")
        t = time.perf_counter()
        res = launch(dirs, repeat=1, input=x, timeout=30)
        slowest = max(slowest, time.perf_counter() - t)
        done += bool(np.array_equal(res.outputs[0], ref))
    m, p, dms = diamond
    fe = front_end(m, dms, p)
    plans = back_end(fe)
    receive = next(a for a in plans[2].actions if a.kind == "RegisterRecv")
    bad = ExecutionPlan(2, plans[2].num_threads, [a for a in plans[2].actions if a != receive])
    try:
        check_plan(bad, fe.submodels[2])
        rejected = False
    except PlanError:
        rejected = True
    ok = done == 100 and slowest < 30 and rejected
    report(4, ok, f"{done}/100 launches completed correctly, slowest {slowest:.2f} s < 30 s; "
                  f"plan without a receive {'rejected by the checker' if rejected else 'NOT rejected'}")
    assert ok


def test_criterion_5_pipeline_throughput(tmp_path, report):
    m = chain_model(4)
    kinds = ("cpu1",)
    prof = Profile({n: LayerCost({k: 10.0 for k in kinds}, {k: 1.0 for k in kinds}) for n in m.hidden_layers})
    four = MappingSpec([(parse_key(f"d{i}_arm0"), [f"L{i}"]) for i in range(4)])
    one = MappingSpec([(parse_key("d0_arm0"), m.hidden_layers)])
    ratio = Fraction(evaluate_mapping(m, four, prof).throughput_fps) / Fraction(evaluate_mapping(m, one, prof).throughput_fps)
    prof.inter = Link(None, 2.0)
    fps = evaluate_mapping(m, four, prof).throughput_fps
    analytic_ok = ratio == 4 and abs(fps - 1000 / 12) <= 1e-9 * (1000 / 12)
    report(5, analytic_ok, f"analytic: ratio {float(ratio):.6f} (want 4), with 2 ms hops {fps!r} fps (want 1000/12)")

    # live counterpart on a heavier balanced chain
    big = chain_model(4, channels=32, size=32)
    cores = os.cpu_count() or 1
    rates = {}
    for name, ms in (("1 rank", MappingSpec([(parse_key("d0_arm0"), big.hidden_layers)])),
                     ("4 ranks", MappingSpec([(parse_key(f"d{i}_arm0"), [f"L{i}"]) for i in range(4)]))):
        dirs, _, _ = build_packages(big, ms, tmp_path / name.replace(" ", "_"))
        rates[name] = launch(dirs, repeat=40, timeout=120).throughput_fps
    speedup = rates["4 ranks"] / rates["1 rank"]
    report(5, speedup >= 1.2, f"live: 4-rank {rates['4 ranks']:.1f} fps vs 1-rank {rates['1 rank']:.1f} fps = "
                              f"{speedup:.2f}x (want >= 1.2x on >= 4 cores; host has {cores})", soft=True)
    assert analytic_ok


def test_criterion_6_dse_oracle(report):
    t0 = time.perf_counter()
    m, p, prof, opts = instance()
    truth = exhaustive_pareto(m, prof, opts)
    lines = []
    ok = len(opts) == 6 and len(opts) ** len(m.hidden_layers) == 1296
    for seed in range(5):
        got = set(run_nsga2(m, p, prof, GAConfig(seed=seed), opts).vectors())
        cover = len(got & truth) / len(truth)
        ok &= got <= truth and cover >= 0.9
        lines.append(f"seed {seed}: {len(got)} pts, subset={got <= truth}, coverage {cover:.0%}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 120
    report(6, ok, f"true front {len(truth)} points; " + "; ".join(lines) + f"; {elapsed:.1f} s < 120 s")
    assert ok


def test_criterion_7_nsga2_internals(tmp_path, report):
    rng = np.random.default_rng(7)
    pts = [tuple(r) for r in rng.integers(0, 10, size=(200, 3)).astype(float)]
    sort_ok = nondominated_sort(pts) == fronts_bruteforce(pts)
    front = [pts[i] for i in nondominated_sort(pts)[0]]
    d = crowding_distance(front)
    f = np.asarray(front)
    boundary = {int(np.argmin(f[:, k])) for k in range(3)} | {int(np.argmax(f[:, k])) for k in range(3)}
    crowd_ok = all(np.isinf(d[i]) for i in boundary)
    m, p, prof, opts = instance()
    blobs = []
    for name in ("a", "b"):
        arch = run_nsga2(m, p, prof, GAConfig(population_size=50, generations=60, seed=11), opts)
        blobs.append(write_results(arch, opts, m, tmp_path / name).read_bytes())
    det_ok = blobs[0] == blobs[1]
    ok = sort_ok and crowd_ok and det_ok
    report(7, ok, f"sort == O(n^2) oracle on 200 vectors: {sort_ok}; boundary crowding infinite: {crowd_ok}; "
                  f"pareto.csv byte-identical across runs: {det_ok}")
    assert ok


def test_criterion_8_toolchain_speed(tmp_path, report):
    m = synthetic_large(900)
    devices = [f"node{i}" for i in range(8)]
    keys = [k for d in devices for k in (f"{d}_arm0", f"{d}_arm123", f"{d}_gpu")]
    hidden = m.hidden_layers
    chunks = np.array_split(np.arange(len(hidden)), len(keys))
    mapping = {k: [hidden[i] for i in c] for k, c in zip(keys, chunks)}
    (tmp_path / "mapping.json").write_text(json.dumps(mapping))
    (tmp_path / "platform.txt").write_text("".join(f"{d} cpu=ARM slots=0-3 gpu=Mali api=OPENCL\n" for d in devices))
    save_model(m, tmp_path / "model.json", tmp_path / "weights.bin")
    out = tmp_path / "out"
    code = cli_main(["package", "--model", str(tmp_path / "model.json"), "--weights", str(tmp_path / "weights.bin"),
                     "--platform", str(tmp_path / "platform.txt"), "--mapping", str(tmp_path / "mapping.json"),
                     "--out", str(out)])
    man = json.loads((out / "manifest.json").read_text())
    t = man["timings"]
    build = t["front_end_s"] + t["back_end_s"]
    ok = (code == 0 and len(hidden) == 900 and man["ranks"] == 24 and man["parameters"] >= 8_000_000
          and build < 60)
    report(8, ok, f"{len(hidden)} layers, {man['ranks']} partitions, {man['parameters'] / 1e6:.2f} M params: "
                  f"front end {t['front_end_s']:.2f} s + back end {t['back_end_s']:.2f} s = {build:.2f} s < 60 s "
                  f"(recorded in manifest.json)")
    assert ok


ROUND_TRIPS = {
    "model": [rt.test_model_round_trip],
    "weights": [rt.test_weights_round_trip],
    "mapping": [rt.test_mapping_round_trip],
    "platform": [rt.test_platform_round_trip],
    "plan": [rt.test_generated_plan_round_trip, rt.test_arbitrary_plan_round_trip],
    "profile": [rt.test_profile_round_trip],
}


def test_criterion_9_format_round_trips(report):
    rt.CASES.clear()
    failed = []
    for name, props in ROUND_TRIPS.items():
        for prop in props:
            try:
                prop()
            except Exception as exc:  # hypothesis re-raises the falsifying example
                failed.append(f"{name}: {type(exc).__name__}: {exc}")
    counts = {name: rt.CASES[name] for name in ROUND_TRIPS}
    ok = not failed and all(c >= 500 for c in counts.values())
    report(9, ok, ", ".join(f"{k} {v}" for k, v in counts.items()) + " cases; " + (
        "parse(format(x)) == x throughout" if not failed else "failures: " + "; ".join(failed)))
    assert ok
