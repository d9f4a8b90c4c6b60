"""Profile-driven objective evaluation: per-device energy and memory, pipeline throughput.

Stage time of a rank is its summed layer latency plus half of every transfer
it takes part in (each transfer is split between the sending and the receiving
stage). Ranks competing for the same physical resource (same device and
overlapping cores, or the same GPU) serialize, so their stage times add up.
Throughput is ``1000 / slowest stage`` in inferences per second.
"""

from __future__ import annotations

import json
import logging
import os
import socket
import statistics
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import MissingProfileEntry, ParseError
from .model import Model, read_json
from .runtime.kernels import execute_layer
from .runtime.rank import memory_estimate
from .specio import MappingSpec, layer_owners

log = logging.getLogger(__name__)

MB = 2**20

# Default power draw per resource kind, in watts (ms * W = mJ).
CPU_CORE_POWER_W = 1.0
GPU_POWER_W = 5.0
GPU_LATENCY_SCALE = 0.25


@dataclass
class LayerCost:
    latency_ms: dict  # kind -> ms
    energy_mj: dict  # kind -> mJ
    weight_bytes: int = 0
    output_bytes: int = 0

    def to_json(self) -> dict:
        return {
            "latency_ms": dict(self.latency_ms),
            "energy_mj": dict(self.energy_mj),
            "weight_bytes": self.weight_bytes,
            "output_bytes": self.output_bytes,
        }


@dataclass
class Link:
    bytes_per_ms: float | None = None  # None: transfer size is free
    latency_ms: float = 0.0
    energy_mj_per_kb: float = 0.0

    def transfer_ms(self, nbytes: int) -> float:
        t = self.latency_ms
        if self.bytes_per_ms:
            t += nbytes / self.bytes_per_ms
        return t

    def transfer_mj(self, nbytes: int) -> float:
        return self.energy_mj_per_kb * nbytes / 1024

    def to_json(self) -> dict:
        return {"bytes_per_ms": self.bytes_per_ms, "latency_ms": self.latency_ms,
                "energy_mj_per_kb": self.energy_mj_per_kb}

    @classmethod
    def from_json(cls, d) -> "Link":
        return cls(d.get("bytes_per_ms"), d.get("latency_ms", 0.0), d.get("energy_mj_per_kb", 0.0))


@dataclass
class Profile:
    layers: dict  # layer name -> LayerCost
    inter: Link = field(default_factory=Link)  # between devices
    intra: Link = field(default_factory=Link)  # between ranks on one device

    def to_json(self) -> dict:
        return {
            "layers": {n: c.to_json() for n, c in self.layers.items()},
            "link": {"inter": self.inter.to_json(), "intra": self.intra.to_json()},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1) + "\n"

    @classmethod
    def from_json(cls, obj) -> "Profile":
        try:
            layers = {
                n: LayerCost(dict(c["latency_ms"]), dict(c["energy_mj"]), c.get("weight_bytes", 0),
                             c.get("output_bytes", 0))
                for n, c in obj["layers"].items()
            }
            link = obj.get("link", {})
            return cls(layers, Link.from_json(link.get("inter", {})), Link.from_json(link.get("intra", {})))
        except (KeyError, TypeError, AttributeError) as exc:
            raise ParseError(f"malformed profile ({exc})") from None

    def check_covers(self, m: Model) -> None:
        missing = [n for n in m.hidden_layers if n not in self.layers]
        if missing:
            raise MissingProfileEntry(f"profile has no entry for layer {missing[0]!r}")


def load_profile(path) -> Profile:
    return Profile.from_json(read_json(path))


@dataclass(frozen=True, order=True)
class ObjectiveVector:
    max_device_energy_mj: float
    throughput_fps: float
    max_device_memory_mb: float

    def minimized(self) -> tuple:
        """All three as minimization targets (throughput negated)."""
        return (self.max_device_energy_mj, -self.throughput_fps, self.max_device_memory_mb)

    def to_json(self) -> dict:
        return {"max_device_energy_mj": self.max_device_energy_mj, "throughput_fps": self.throughput_fps,
                "max_device_memory_mb": self.max_device_memory_mb}


class _Evaluator:
    """Precomputed per-model tables so repeated evaluations stay cheap."""

    def __init__(self, m: Model, p: Profile):
        self.m = m
        self.p = p
        self.hidden = m.hidden_layers
        self.edges = [(s, l.name) for l in m.layers for s in dict.fromkeys(l.inputs)]
        self.out_bytes = {n: s.nbytes for n, s in m.shapes.items()}
        self.w_bytes = {n: m.layer_weight_bytes(n) for n in m.by_name}

    def cost(self, layer: str, kind: str, what: str) -> float:
        io = self.m.by_name[layer].op in ("Input", "Output")
        entry = self.p.layers.get(layer)
        if entry is None:
            if io:
                return 0.0
            raise MissingProfileEntry(f"profile has no entry for layer {layer!r}")
        table = entry.latency_ms if what == "latency" else entry.energy_mj
        if kind not in table:
            if io:
                return 0.0
            raise MissingProfileEntry(f"profile entry {layer!r} has no {what} for resource kind {kind!r}")
        return table[kind]

    def evaluate(self, keys: list, owner: dict) -> ObjectiveVector:
        return self.evaluate_detail(keys, owner)[0]

    def evaluate_detail(self, keys: list, owner: dict):
        n = len(keys)
        stage = [0.0] * n
        energy = {}
        mem = {}
        wbytes = [0] * n
        bbytes = [0] * n
        for layer, r in owner.items():
            kind, dev = keys[r].kind, keys[r].device
            stage[r] += self.cost(layer, kind, "latency")
            energy[dev] = energy.get(dev, 0.0) + self.cost(layer, kind, "energy")
            wbytes[r] += self.w_bytes[layer]
        seen = set()
        for src, dst in self.edges:
            a, b = owner[src], owner[dst]
            if a == b or (src, b) in seen:
                continue
            if (src, None) not in seen:
                seen.add((src, None))
                bbytes[a] += self.out_bytes[src]  # one output buffer per producer
            seen.add((src, b))
            nbytes = self.out_bytes[src]
            bbytes[b] += nbytes
            link = self.p.intra if keys[a].device == keys[b].device else self.p.inter
            t = link.transfer_ms(nbytes)
            stage[a] += t / 2
            stage[b] += t / 2
            e = link.transfer_mj(nbytes)
            energy[keys[a].device] = energy.get(keys[a].device, 0.0) + e
            energy[keys[b].device] = energy.get(keys[b].device, 0.0) + e
        for r, key in enumerate(keys):
            mem[key.device] = mem.get(key.device, 0) + memory_estimate(wbytes[r], bbytes[r], key.gpu)
            energy.setdefault(key.device, 0.0)

        bottleneck = max(_contention_groups(keys, stage))
        fps = 1000.0 / bottleneck if bottleneck > 0 else float("inf")
        return ObjectiveVector(max(energy.values()), fps, max(mem.values()) / MB), stage


def _contention_groups(keys, stage) -> list:
    """Summed stage time of each connected group of conflicting resource keys."""
    n = len(keys)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if keys[i].conflicts(keys[j]):
                parent[find(i)] = find(j)
    sums = {}
    for i in range(n):
        sums[find(i)] = sums.get(find(i), 0.0) + stage[i]
    return list(sums.values())


def evaluate_mapping(m: Model, ms: MappingSpec, p: Profile) -> ObjectiveVector:
    return _Evaluator(m, p).evaluate(ms.keys, layer_owners(m, ms))


def stage_times(m: Model, ms: MappingSpec, p: Profile) -> list:
    """Per-rank stage times in ms (compute plus half of each transfer)."""
    return _Evaluator(m, p).evaluate_detail(ms.keys, layer_owners(m, ms))[1]


# -- measurement --------------------------------------------------------------


def loopback_bandwidth(nbytes: int = 8 * MB, rounds: int = 3) -> float:
    """Measured loopback TCP throughput in bytes per millisecond."""
    srv = socket.create_server(("127.0.0.1", 0))
    port = srv.getsockname()[1]
    payload = b"\0" * nbytes

    def sink():
        conn, _ = srv.accept()
        with conn:
            got = 0
            while got < nbytes * rounds:
                chunk = conn.recv(1 << 20)
                if not chunk:
                    break
                got += len(chunk)
            conn.sendall(b"k")

    t = threading.Thread(target=sink, daemon=True)
    t.start()
    with socket.create_connection(("127.0.0.1", port)) as c:
        t0 = time.perf_counter()
        for _ in range(rounds):
            c.sendall(payload)
        c.recv(1)
        dt = time.perf_counter() - t0
    t.join()
    srv.close()
    return nbytes * rounds / (dt * 1000)


def profile_layers(m: Model, repeats: int = 5, thread_counts=None, gpu: bool = False,
                   cpu_core_power_w: float = CPU_CORE_POWER_W, gpu_power_w: float = GPU_POWER_W,
                   gpu_latency_scale: float = GPU_LATENCY_SCALE, energy_mj_per_kb: float = 0.01,
                   measure_link: bool = True, seed: int = 0) -> Profile:
    """Time every layer locally, per thread-count option, and derive energy from power constants.

    Latency is the median of ``repeats`` runs. There is no GPU backend, so the
    ``gpu`` kind is the single-thread latency scaled by ``gpu_latency_scale``.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if thread_counts is None:
        thread_counts = sorted({1, os.cpu_count() or 1})
    rng = np.random.default_rng(seed)
    values = {m.input_name: rng.random(m.shapes[m.input_name].dims, dtype=np.float32)}
    layers = {}
    for name in m.topo_order():
        layer = m.by_name[name]
        wb, ob = m.layer_weight_bytes(name), m.shapes[name].nbytes
        if layer.op == "Input":
            layers[name] = LayerCost({}, {}, wb, ob)
            continue
        ins = [values[s] for s in layer.inputs]
        lat, en = {}, {}
        for nt in thread_counts:
            samples = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                y = execute_layer(layer, ins, m.weights, nt)
                samples.append((time.perf_counter() - t0) * 1000)
            med = statistics.median(samples)
            if repeats > 2 and med > 0.05 and statistics.pstdev(samples) > med:
                log.warning("high timing variance for %s at %d threads", name, nt)
            lat[f"cpu{nt}"] = med
            en[f"cpu{nt}"] = med * cpu_core_power_w * nt
        if gpu:
            base = lat[f"cpu{min(thread_counts)}"]
            lat["gpu"] = base * gpu_latency_scale
            en["gpu"] = lat["gpu"] * gpu_power_w
        values[name] = y
        if layer.op == "Output":
            lat = {k: 0.0 for k in lat}
            en = {k: 0.0 for k in en}
        layers[name] = LayerCost(lat, en, wb, ob)
    inter = Link(loopback_bandwidth() if measure_link else None, 0.0, energy_mj_per_kb)
    intra = Link(inter.bytes_per_ms, 0.0, 0.0)
    return Profile(layers, inter, intra)


def layer_macs(m: Model, name: str) -> int:
    """Multiply-accumulate count of one layer (element count for cheap ops)."""
    layer = m.by_name[name]
    out = m.shapes[name]
    if layer.op == "Conv2D":
        w = m.weights.spec(layer.weight_refs[0]).dims
        return out.numel * w[1] * w[2] * w[3]
    if layer.op == "FullyConnected":
        return int(np.prod(m.weights.spec(layer.weight_refs[0]).dims))
    if layer.op in ("Input", "Output"):
        return 0
    return out.numel


def analytic_profile(m: Model, macs_per_ms: dict, power_w: dict, inter: Link | None = None,
                     intra: Link | None = None) -> Profile:
    """Deterministic profile from operation counts: ``latency = MACs / rate`` per kind.

    ``macs_per_ms`` and ``power_w`` map resource kinds (``cpu1``, ``cpu4``, ``gpu``, ...)
    to a throughput and a power draw; energy is latency times power.
    """
    layers = {}
    for name in m.topo_order():
        macs = layer_macs(m, name)
        lat = {k: macs / r for k, r in macs_per_ms.items()}
        layers[name] = LayerCost(lat, {k: v * power_w[k] for k, v in lat.items()},
                                 m.layer_weight_bytes(name), m.shapes[name].nbytes)
    return Profile(layers, inter or Link(), intra or Link())
