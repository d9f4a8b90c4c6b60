"""parse(format(x)) == x for every on-disk format, over generated inputs."""

import json
from collections import Counter

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from edgesplit.costmodel import LayerCost, Link, Profile
from edgesplit.dse import random_mapping
from edgesplit.model import WeightStore, model_from_json
from edgesplit.plangen import KINDS, ExecutionPlan, PlanAction
from edgesplit.specio import DeviceSpec, PlatformSpec, parse_mapping_text, parse_platform_text, resource_options
from edgesplit.toolchain import back_end, front_end
from edgesplit.zoo import DIAMOND_PLATFORM, GraphBuilder, toy_cnn

CASES = Counter()  # examples executed per format, read by the acceptance suite
MANY = settings(max_examples=500, deadline=None, suppress_health_check=[HealthCheck.too_slow])

TOY = toy_cnn()
DIAMOND_OPTIONS = resource_options(parse_platform_text(DIAMOND_PLATFORM))
DIAMOND_P = parse_platform_text(DIAMOND_PLATFORM)

names = st.from_regex(r"[A-Za-z0-9][A-Za-z0-9.\-]{0,7}", fullmatch=True)
finite = st.floats(allow_nan=False, allow_infinity=False, width=64)
nonneg = st.floats(min_value=0, max_value=1e9, allow_nan=False)


@st.composite
def models(draw):
    g = GraphBuilder(draw(names), draw(st.integers(0, 2**32 - 1)))
    c, size = draw(st.integers(1, 4)), draw(st.sampled_from([2, 4, 8]))
    cur = g.input((1, c, size, size))
    same = {(c, size): [cur]}  # earlier tensors by (channels, size) for Add/Concat
    for i, op in enumerate(draw(st.lists(st.sampled_from(["conv", "bn", "relu", "add", "pool", "cat"]),
                                         min_size=1, max_size=10))):
        name = f"l{i}"
        if op == "conv":
            cout, k = draw(st.integers(1, 4)), draw(st.sampled_from([1, 3]))
            cur, c = g.conv(name, cur, c, cout, k, padding=k // 2), cout
        elif op == "bn":
            cur = g.bn(name, cur, c)
        elif op == "relu":
            cur = g.add(name, "ReLU", [cur])
        elif op == "add":
            cur = g.add(name, "Add", [cur, draw(st.sampled_from(same[(c, size)]))])
        elif op == "pool" and size >= 2:
            kind = draw(st.sampled_from(["MaxPool2D", "AvgPool2D"]))
            cur, size = g.add(name, kind, [cur], {"kernel": 2, "stride": 2}), size // 2
        else:
            other = draw(st.sampled_from(same[(c, size)]))
            cur, c = g.add(name, "Concat", [cur, other], {"axis": 1}), 2 * c
        same.setdefault((c, size), []).append(cur)
    if draw(st.booleans()):
        cur = g.add("flat", "Flatten", [cur])
        cur = g.fc("fc", cur, c * size * size, draw(st.integers(1, 5)))
        cur = g.add("soft", "Softmax", [cur])
    g.output(cur)
    return g.build()


@MANY
@given(models())
def test_model_round_trip(m):
    CASES["model"] += 1
    text = json.dumps(m.to_json())
    blob = m.weights.to_bytes()
    back = model_from_json(json.loads(text), WeightStore.from_bytes(blob))
    assert back == m
    assert json.dumps(back.to_json()) == text and back.weights.to_bytes() == blob


@MANY
@given(st.lists(st.tuples(st.text(min_size=1, max_size=12),
                          st.lists(st.integers(1, 4), min_size=1, max_size=4),
                          st.integers(0, 2**32 - 1)),
                max_size=6, unique_by=lambda t: t[0]))
def test_weights_round_trip(entries):
    CASES["weights"] += 1
    store = WeightStore()
    for name, dims, seed in entries:
        raw = np.random.default_rng(seed).integers(0, 2**32, size=int(np.prod(dims)), dtype=np.uint32)
        store.add(name, raw.view(np.float32).reshape(dims))  # arbitrary bit patterns, NaNs included
    blob = store.to_bytes()
    back = WeightStore.from_bytes(blob)
    assert back == store and back.to_bytes() == blob


@st.composite
def platforms(draw):
    devices = []
    for name in draw(st.lists(names, min_size=1, max_size=5, unique=True)):
        first = draw(st.integers(0, 9))
        last = draw(st.integers(first, 9))
        gpu = draw(st.one_of(st.none(), st.tuples(names, names)))
        devices.append(DeviceSpec(name, draw(names), first, last, *(gpu or (None, None))))
    return PlatformSpec(tuple(devices))


@MANY
@given(platforms())
def test_platform_round_trip(p):
    CASES["platform"] += 1
    assert parse_platform_text(p.format()) == p


@MANY
@given(platforms(), st.integers(0, 2**32 - 1), st.data())
def test_mapping_round_trip(p, seed, data):
    CASES["mapping"] += 1
    options = resource_options(p)
    rng = np.random.default_rng(seed)
    n = data.draw(st.integers(1, min(4, len(options))))
    ms = random_mapping(TOY, options, n, rng)
    assert parse_mapping_text(ms.format(), TOY, p) == ms


@MANY
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_generated_plan_round_trip(seed, n):
    CASES["plan"] += 1
    ms = random_mapping(TOY, DIAMOND_OPTIONS, n, np.random.default_rng(seed))
    for plan in back_end(front_end(TOY, ms, DIAMOND_P)):
        assert ExecutionPlan.from_json(json.loads(plan.dumps())) == plan


actions = st.one_of(
    st.builds(lambda b, s: PlanAction("RegisterRecv", buffer=b, src=s), names, st.integers(0, 64)),
    st.builds(lambda b: PlanAction("WaitRecv", buffer=b), names),
    st.builds(lambda b, t: PlanAction("Send", buffer=b, to=tuple(t)), names, st.lists(st.integers(0, 64), max_size=4)),
    st.builds(lambda n: PlanAction("Compute", layer=n), names),
    st.sampled_from([PlanAction(k) for k in KINDS if k in ("WaitSendAll", "ReadInput", "WriteOutput")]),
)


@MANY
@given(st.integers(0, 64), st.integers(1, 16), st.lists(actions, max_size=20))
def test_arbitrary_plan_round_trip(rank, threads, acts):
    CASES["plan"] += 1
    plan = ExecutionPlan(rank, threads, acts)
    assert ExecutionPlan.from_json(json.loads(plan.dumps())) == plan


kinds = st.sampled_from([f"cpu{n}" for n in range(1, 11)] + ["gpu"])
links = st.builds(Link, st.one_of(st.none(), st.floats(min_value=1e-3, max_value=1e12)), nonneg, nonneg)
costs = st.builds(LayerCost, st.dictionaries(kinds, nonneg, min_size=1), st.dictionaries(kinds, finite),
                  st.integers(0, 2**40), st.integers(0, 2**40))


@MANY
@given(st.dictionaries(names, costs, max_size=8), links, links)
def test_profile_round_trip(layers, inter, intra):
    CASES["profile"] += 1
    prof = Profile(layers, inter, intra)
    text = prof.dumps()
    back = Profile.from_json(json.loads(text))
    assert back == prof and back.dumps() == text
