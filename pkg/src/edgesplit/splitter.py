"""Vertical partitioning of a model into per-rank sub-models."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ParseError, ValidationError
from .model import Layer, Model, TensorSpec, WeightStore, load_weights, read_json, save_weights
from .specio import MappingSpec, ResourceKey, layer_owners, parse_key, validate_mapping


@dataclass(frozen=True)
class CutEdge:
    src_layer: str
    dst_layer: str
    src_rank: int
    dst_rank: int
    buffer: str
    shape: TensorSpec


@dataclass
class SubModel:
    rank: int
    key: ResourceKey
    layers: list
    input_buffers: dict = field(default_factory=dict)  # buffer -> TensorSpec
    output_buffers: dict = field(default_factory=dict)
    weights: WeightStore = field(default_factory=WeightStore)
    # buffer -> producing layer name (producer lives on another rank for inputs)
    buffer_layer: dict = field(default_factory=dict)
    model_name: str = ""

    @property
    def layer_names(self) -> list:
        return [l.name for l in self.layers]

    def layer(self, name: str) -> Layer:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    @property
    def owns_input(self) -> bool:
        return any(l.op == "Input" for l in self.layers)

    @property
    def owns_output(self) -> bool:
        return any(l.op == "Output" for l in self.layers)

    @property
    def buffer_bytes(self) -> int:
        specs = list(self.input_buffers.values()) + list(self.output_buffers.values())
        return sum(s.nbytes for s in specs)

    def to_json(self) -> dict:
        def bufs(d):
            return [{"name": b, "layer": self.buffer_layer[b], "dims": s.to_list()} for b, s in d.items()]

        return {
            "name": self.model_name,
            "rank": self.rank,
            "key": self.key.text,
            "layers": [l.to_json() for l in self.layers],
            "input_buffers": bufs(self.input_buffers),
            "output_buffers": bufs(self.output_buffers),
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, SubModel):
            return NotImplemented
        return self.to_json() == other.to_json() and self.weights == other.weights


def buffer_id(name: str) -> int:
    """Numeric wire id of a ``Buff<n>`` buffer name."""
    if not name.startswith("Buff") or not name[4:].isdigit():
        raise ValidationError(f"bad buffer name {name!r}")
    return int(name[4:])


def _buffer_names(m: Model, owner: dict) -> dict:
    """Producer layer -> buffer name, numbered in order of first foreign consumption.

    Walks layers in topological order and each layer's inputs in declared order;
    the first time a producer's output is needed on another rank it gets the
    next ``Buff<n>``. Every foreign consumer then shares that one name.
    """
    names = {}
    for dst in m.topo_order():
        for src in m.by_name[dst].inputs:
            if owner[src] != owner[dst] and src not in names:
                names[src] = f"Buff{len(names) + 1}"
    return names


def cut_edges(m: Model, ms: MappingSpec) -> list:
    """Layer-graph edges whose endpoints land on different ranks."""
    owner = layer_owners(m, ms)
    names = _buffer_names(m, owner)
    out = []
    for dst in m.topo_order():
        for src in dict.fromkeys(m.by_name[dst].inputs):
            if owner[src] != owner[dst]:
                out.append(CutEdge(src, dst, owner[src], owner[dst], names[src], m.shapes[src]))
    return out


def split_model(m: Model, ms: MappingSpec) -> list:
    validate_mapping(ms, m)
    owner = layer_owners(m, ms)
    cuts = cut_edges(m, ms)
    order = m.topo_order()
    subs = []
    for rank, key in enumerate(ms.keys):
        layers = [m.by_name[n] for n in order if owner[n] == rank]
        refs = [r for l in layers for r in l.weight_refs]
        subs.append(SubModel(rank, key, layers, weights=m.weights.subset(refs), model_name=m.name))
    for c in cuts:
        src, dst = subs[c.src_rank], subs[c.dst_rank]
        src.output_buffers.setdefault(c.buffer, c.shape)
        src.buffer_layer[c.buffer] = c.src_layer
        dst.input_buffers.setdefault(c.buffer, c.shape)
        dst.buffer_layer[c.buffer] = c.src_layer
    for s in subs:
        s.input_buffers = dict(sorted(s.input_buffers.items(), key=lambda kv: buffer_id(kv[0])))
        s.output_buffers = dict(sorted(s.output_buffers.items(), key=lambda kv: buffer_id(kv[0])))
        s.buffer_layer = {b: s.buffer_layer[b] for b in [*s.input_buffers, *s.output_buffers]}
    return subs


def save_submodel(sm: SubModel, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "submodel.json", "w", encoding="utf-8") as fh:
        json.dump(sm.to_json(), fh, indent=1)
        fh.write("\n")
    save_weights(sm.weights, d / "submodel.bin")


def submodel_from_json(obj, weights: WeightStore) -> SubModel:
    try:
        layers = [Layer.from_json(l) for l in obj["layers"]]
        key = parse_key(obj["key"])
        rank = obj["rank"]
        ins = {b["name"]: TensorSpec(b["dims"]) for b in obj["input_buffers"]}
        outs = {b["name"]: TensorSpec(b["dims"]) for b in obj["output_buffers"]}
        blayer = {b["name"]: b["layer"] for b in obj["input_buffers"] + obj["output_buffers"]}
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed sub-model file ({exc})") from None
    sm = SubModel(rank, key, layers, ins, outs, weights, blayer, obj.get("name", ""))
    refs = [r for l in layers for r in l.weight_refs]
    if sorted(refs) != sorted(weights):
        raise ValidationError(f"rank {rank}: sub-model weights do not match its layers' weight refs")
    return sm


def load_submodel(directory) -> SubModel:
    d = Path(directory)
    return submodel_from_json(read_json(d / "submodel.json"), load_weights(d / "submodel.bin"))
