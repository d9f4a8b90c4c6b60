"""Network graph, tensor shapes, weight store and the on-disk interchange formats.

Graph file (JSON)::

    {"name": str,
     "layers": [{"name", "op", "attrs": {...}, "inputs": [...], "weights": [...]}]}

Weights file (all integers little-endian)::

    b"ADCE" | u32 version=1 | u32 entry count
    per entry: u16 name length | UTF-8 name | u8 rank | rank x u32 dims | float32 LE payload
"""

from __future__ import annotations

import heapq
import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    CycleError,
    ParseError,
    ShapeError,
    UnsupportedOp,
    ValidationError,
    WeightMismatch,
)

WEIGHTS_MAGIC = b"ADCE"
WEIGHTS_VERSION = 1
F32 = np.dtype("<f4")

OPS = (
    "Input",
    "Output",
    "Conv2D",
    "MaxPool2D",
    "AvgPool2D",
    "GlobalAvgPool2D",
    "ReLU",
    "Add",
    "Concat",
    "FullyConnected",
    "BatchNorm",
    "Softmax",
    "Flatten",
)

# op -> allowed attribute names
_ATTRS = {
    "Input": {"shape"},
    "Output": set(),
    "Conv2D": {"kernel", "stride", "padding"},
    "MaxPool2D": {"kernel", "stride", "padding"},
    "AvgPool2D": {"kernel", "stride", "padding"},
    "GlobalAvgPool2D": set(),
    "ReLU": set(),
    "Add": set(),
    "Concat": {"axis"},
    "FullyConnected": set(),
    "BatchNorm": {"epsilon"},
    "Softmax": {"axis"},
    "Flatten": set(),
}

# op -> number of weight refs
_NWEIGHTS = {"Conv2D": 2, "FullyConnected": 2, "BatchNorm": 4}


@dataclass(frozen=True)
class TensorSpec:
    dims: tuple
    dtype: str = "float32"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if not dims:
            raise ValidationError("tensor dims must be non-empty")
        if any(d < 1 for d in dims):
            raise ValidationError(f"tensor dims must be positive, got {list(dims)}")
        if self.dtype != "float32":
            raise ValidationError(f"unsupported dtype {self.dtype!r}")

    @property
    def numel(self) -> int:
        return math.prod(self.dims)

    @property
    def nbytes(self) -> int:
        return 4 * self.numel

    def to_list(self):
        return list(self.dims)


@dataclass(frozen=True, eq=True)
class Layer:
    name: str
    op: str
    attrs: dict = field(default_factory=dict)
    inputs: tuple = ()
    weight_refs: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "weight_refs", tuple(self.weight_refs))

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "op": self.op,
            "attrs": dict(self.attrs),
            "inputs": list(self.inputs),
            "weights": list(self.weight_refs),
        }

    @classmethod
    def from_json(cls, obj) -> "Layer":
        if not isinstance(obj, dict):
            raise ParseError("layer entry must be an object")
        try:
            name, op = obj["name"], obj["op"]
        except KeyError as exc:
            raise ParseError(f"layer entry missing {exc.args[0]!r}") from None
        attrs = obj.get("attrs", {})
        inputs = obj.get("inputs", [])
        weights = obj.get("weights", [])
        if not isinstance(name, str) or not isinstance(op, str):
            raise ParseError("layer name and op must be strings")
        if not isinstance(attrs, dict):
            raise ParseError(f"{name}: attrs must be an object")
        for seq, what in ((inputs, "inputs"), (weights, "weights")):
            if not isinstance(seq, list) or not all(isinstance(s, str) for s in seq):
                raise ParseError(f"{name}: {what} must be a list of strings")
        return cls(name, op, attrs, tuple(inputs), tuple(weights))


class WeightStore:
    """Ordered name -> float32 array store. Arrays are kept read-only."""

    def __init__(self, entries: Mapping[str, np.ndarray] | Iterable = ()):
        self._entries: OrderedDict[str, np.ndarray] = OrderedDict()
        items = entries.items() if isinstance(entries, Mapping) else entries
        for name, arr in items:
            self.add(name, arr)

    def add(self, name: str, arr) -> None:
        if name in self._entries:
            raise WeightMismatch(f"duplicate weight entry {name!r}")
        a = np.array(arr, dtype=F32, copy=True)
        if a.ndim == 0:
            a = a.reshape(1)
        TensorSpec(a.shape)  # validates dims
        a.setflags(write=False)
        self._entries[name] = a

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __contains__(self, name) -> bool:
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def spec(self, name: str) -> TensorSpec:
        return TensorSpec(self._entries[name].shape)

    @property
    def total_bytes(self) -> int:
        return sum(a.nbytes for a in self._entries.values())

    def subset(self, names: Iterable[str]) -> "WeightStore":
        return WeightStore((n, self._entries[n]) for n in names)

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightStore):
            return NotImplemented
        if list(self._entries) != list(other._entries):
            return False
        return all(
            a.shape == other[n].shape and a.tobytes() == other[n].tobytes()
            for n, a in self._entries.items()
        )

    # -- binary format -------------------------------------------------

    def to_bytes(self) -> bytes:
        out = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(self._entries))]
        for name, arr in self._entries.items():
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValidationError(f"weight name too long: {name[:40]}...")
            out.append(struct.pack("<H", len(raw)))
            out.append(raw)
            out.append(struct.pack("<B", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype=F32).tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "WeightStore":
        view = memoryview(data)
        if len(view) < 12:
            raise ParseError("weights file too short for header")
        if bytes(view[:4]) != WEIGHTS_MAGIC:
            raise ParseError(f"bad weights magic {bytes(view[:4])!r}")
        version, count = struct.unpack_from("<II", view, 4)
        if version != WEIGHTS_VERSION:
            raise ParseError(f"unsupported weights version {version}")
        pos = 12
        store = cls()

        def need(n, what):
            if pos + n > len(view):
                raise WeightMismatch(f"truncated weights file while reading {what}")

        for i in range(count):
            need(2, f"entry {i} name length")
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            need(nlen + 1, f"entry {i} name")
            try:
                name = bytes(view[pos : pos + nlen]).decode("utf-8")
            except UnicodeDecodeError:
                raise ParseError(f"entry {i} name is not valid UTF-8") from None
            pos += nlen
            (rank,) = struct.unpack_from("<B", view, pos)
            pos += 1
            need(4 * rank, f"dims of {name!r}")
            dims = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            if rank == 0 or any(d == 0 for d in dims):
                raise ParseError(f"weight {name!r} has invalid dims {list(dims)}")
            nbytes = 4 * math.prod(dims)
            need(nbytes, f"payload of {name!r}")
            arr = np.frombuffer(view[pos : pos + nbytes], dtype=F32).reshape(dims)
            pos += nbytes
            store.add(name, arr)
        if pos != len(view):
            raise WeightMismatch(f"{len(view) - pos} trailing bytes after last weight entry")
        return store


def save_weights(store: WeightStore, path) -> None:
    Path(path).write_bytes(store.to_bytes())


def load_weights(path) -> WeightStore:
    return WeightStore.from_bytes(Path(path).read_bytes())


# -- shape rules ------------------------------------------------------------


def _pos_int(layer, key, default=None, minimum=1):
    v = layer.attrs.get(key, default)
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        raise ValidationError(f"{layer.name}: attr {key!r} must be an integer >= {minimum}, got {v!r}")
    return v


def window_params(layer: Layer):
    """(kernel, stride, padding) for Conv2D and the windowed pools."""
    k = _pos_int(layer, "kernel")
    s = _pos_int(layer, "stride", default=1 if layer.op == "Conv2D" else k)
    p = _pos_int(layer, "padding", default=0, minimum=0)
    if p >= k:
        raise ValidationError(f"{layer.name}: padding {p} must be smaller than kernel {k}")
    return k, s, p


def _window_out(layer, n, k, s, p):
    out = (n + 2 * p - k) // s + 1
    if n + 2 * p < k or out < 1:
        raise ShapeError(layer.name, f"window {k} stride {s} pad {p} does not fit extent {n}")
    return out


def squeeze_trailing(dims):
    """Drop trailing unit dims beyond the batch/feature pair: [1,C,1,1] -> [1,C]."""
    d = list(dims)
    while len(d) > 2 and d[-1] == 1:
        d.pop()
    return tuple(d)


def add_compatible(a, b) -> bool:
    return tuple(a) == tuple(b) or squeeze_trailing(a) == squeeze_trailing(b)


def concat_axis(layer: Layer, rank: int) -> int:
    axis = layer.attrs.get("axis", 1)
    if isinstance(axis, bool) or not isinstance(axis, int):
        raise ValidationError(f"{layer.name}: axis must be an integer")
    if axis < 0:
        axis += rank
    if not 1 <= axis < rank:
        raise ShapeError(layer.name, f"axis {layer.attrs.get('axis', 1)} invalid for rank {rank}")
    return axis


def layer_output_shape(layer: Layer, in_shapes: list, weights: WeightStore) -> TensorSpec:
    """Output shape of ``layer`` given the shapes of its inputs."""
    op = layer.op
    dims = [s.dims for s in in_shapes]
    name = layer.name

    if op == "Input":
        shape = layer.attrs.get("shape")
        if not isinstance(shape, list) or not shape:
            raise ValidationError(f"{name}: Input needs a non-empty 'shape' list")
        if not all(isinstance(d, int) and not isinstance(d, bool) for d in shape):
            raise ValidationError(f"{name}: Input shape must be integers")
        spec = TensorSpec(shape)
        if spec.dims[0] != 1:
            raise ValidationError(f"{name}: batch size must be 1, got {spec.dims[0]}")
        return spec
    if op in ("Output", "ReLU"):
        return in_shapes[0]
    if op == "Softmax":
        axis = layer.attrs.get("axis", 1)
        if axis != 1:
            raise ValidationError(f"{name}: Softmax only supports axis=1")
        if len(dims[0]) < 2:
            raise ShapeError(name, "Softmax needs at least 2-D input")
        return in_shapes[0]
    if op == "Flatten":
        return TensorSpec((1, in_shapes[0].numel))
    if op in ("Conv2D", "MaxPool2D", "AvgPool2D"):
        if len(dims[0]) != 4:
            raise ShapeError(name, f"{op} needs 4-D NCHW input, got {list(dims[0])}")
        _, c, h, w = dims[0]
        k, s, p = window_params(layer)
        oh, ow = _window_out(layer, h, k, s, p), _window_out(layer, w, k, s, p)
        if op != "Conv2D":
            return TensorSpec((1, c, oh, ow))
        wt, bias = (weights.spec(r).dims for r in layer.weight_refs)
        if len(wt) != 4 or wt[1] != c or wt[2] != k or wt[3] != k:
            raise ShapeError(name, f"conv weight {list(wt)} incompatible with input channels {c} and kernel {k}")
        if bias != (wt[0],):
            raise ShapeError(name, f"conv bias {list(bias)} must be [{wt[0]}]")
        return TensorSpec((1, wt[0], oh, ow))
    if op == "GlobalAvgPool2D":
        if len(dims[0]) != 4:
            raise ShapeError(name, f"GlobalAvgPool2D needs 4-D input, got {list(dims[0])}")
        return TensorSpec((1, dims[0][1], 1, 1))
    if op == "Add":
        for d in dims[1:]:
            if not add_compatible(dims[0], d):
                raise ShapeError(name, f"Add operands differ: {list(dims[0])} vs {list(d)}")
        return in_shapes[0]
    if op == "Concat":
        rank = len(dims[0])
        axis = concat_axis(layer, rank)
        total = 0
        for d in dims:
            if len(d) != rank or any(d[i] != dims[0][i] for i in range(rank) if i != axis):
                raise ShapeError(name, f"Concat operands disagree off axis {axis}: {[list(x) for x in dims]}")
            total += d[axis]
        out = list(dims[0])
        out[axis] = total
        return TensorSpec(out)
    if op == "FullyConnected":
        wt, bias = (weights.spec(r).dims for r in layer.weight_refs)
        if len(wt) != 2 or wt[1] != in_shapes[0].numel:
            raise ShapeError(name, f"FC weight {list(wt)} incompatible with {in_shapes[0].numel} input features")
        if bias != (wt[0],):
            raise ShapeError(name, f"FC bias {list(bias)} must be [{wt[0]}]")
        return TensorSpec((1, wt[0]))
    if op == "BatchNorm":
        if len(dims[0]) < 2:
            raise ShapeError(name, "BatchNorm needs at least 2-D input")
        c = dims[0][1]
        for r in layer.weight_refs:
            if weights.spec(r).dims != (c,):
                raise ShapeError(name, f"BatchNorm parameter {r!r} must be [{c}]")
        eps = layer.attrs.get("epsilon", 1e-5)
        if isinstance(eps, bool) or not isinstance(eps, (int, float)) or not eps > 0:
            raise ValidationError(f"{name}: epsilon must be a positive number")
        return in_shapes[0]
    raise UnsupportedOp(f"{name}: unsupported op {op!r}")


def _check_arity(layer: Layer) -> None:
    n = len(layer.inputs)
    op = layer.op
    if op == "Input":
        ok = n == 0
    elif op in ("Add", "Concat"):
        ok = n >= 2
    else:
        ok = n == 1
    if not ok:
        raise ValidationError(f"{layer.name}: {op} cannot take {n} input(s)")
    if len(set(layer.inputs)) != n and op not in ("Add", "Concat"):
        raise ValidationError(f"{layer.name}: repeated input")
    want = _NWEIGHTS.get(op, 0)
    if len(layer.weight_refs) != want:
        raise ValidationError(f"{layer.name}: {op} needs {want} weight refs, got {len(layer.weight_refs)}")
    extra = set(layer.attrs) - _ATTRS[op]
    if extra:
        raise ValidationError(f"{layer.name}: unknown attrs {sorted(extra)} for {op}")


def topo_sort(names: Iterable[str], inputs_of: Mapping[str, Iterable[str]]) -> list:
    """Kahn's algorithm; ties go to the lexicographically smallest name."""
    names = list(names)
    indeg = {n: 0 for n in names}
    consumers = {n: [] for n in names}
    for n in names:
        for src in set(inputs_of[n]):
            if src in indeg:
                indeg[n] += 1
                consumers[src].append(n)
    ready = [n for n, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        n = heapq.heappop(ready)
        order.append(n)
        for c in consumers[n]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(ready, c)
    if len(order) != len(names):
        stuck = sorted(n for n, d in indeg.items() if d > 0)
        raise CycleError(f"layer graph has a cycle through {stuck[:5]}")
    return order


class Model:
    """Validated, immutable network graph with shapes and weights."""

    def __init__(self, name: str, layers: Iterable[Layer], weights: WeightStore | None = None):
        self.name = name
        self.layers = tuple(layers)
        self.weights = weights if weights is not None else WeightStore()
        self.by_name = {}
        for layer in self.layers:
            if layer.name in self.by_name:
                raise ValidationError(f"duplicate layer name {layer.name!r}")
            self.by_name[layer.name] = layer
        self._validate()

    def _validate(self) -> None:
        for layer in self.layers:
            if layer.op not in OPS:
                raise UnsupportedOp(f"{layer.name}: unsupported op {layer.op!r}")
            _check_arity(layer)
            for src in layer.inputs:
                if src not in self.by_name:
                    raise ValidationError(f"{layer.name}: input {src!r} does not exist")
        inputs = [l.name for l in self.layers if l.op == "Input"]
        outputs = [l.name for l in self.layers if l.op == "Output"]
        if len(inputs) != 1 or len(outputs) != 1:
            raise ValidationError(
                f"model needs exactly one Input and one Output layer, got {len(inputs)} and {len(outputs)}"
            )
        self.input_name, self.output_name = inputs[0], outputs[0]
        self._order = topo_sort(self.by_name, {l.name: l.inputs for l in self.layers})

        consumers = {l.name: [] for l in self.layers}
        for layer in self.layers:
            for src in dict.fromkeys(layer.inputs):
                consumers[src].append(layer.name)
        self.consumers = {k: tuple(v) for k, v in consumers.items()}
        for name, cons in self.consumers.items():
            if self.by_name[name].op == "Output" and cons:
                raise ValidationError(f"Output layer {name!r} cannot feed other layers")
        seen, stack = {self.input_name}, [self.input_name]
        while stack:
            for c in self.consumers[stack.pop()]:
                if c not in seen:
                    seen.add(c)
                    stack.append(c)
        unreachable = sorted(set(self.by_name) - seen)
        if unreachable:
            raise ValidationError(f"layers not reachable from Input: {unreachable[:5]}")

        owner = {}
        for layer in self.layers:
            for ref in layer.weight_refs:
                if ref not in self.weights:
                    raise WeightMismatch(f"{layer.name}: weight {ref!r} missing from weight store")
                if ref in owner:
                    raise ValidationError(f"weight {ref!r} shared by {owner[ref]!r} and {layer.name!r}")
                owner[ref] = layer.name
        unused = [n for n in self.weights if n not in owner]
        if unused:
            raise WeightMismatch(f"weight entries not referenced by any layer: {unused[:5]}")
        self.shapes = self._infer()

    def _infer(self) -> dict:
        return _propagate_shapes(self._order, self.by_name, self.weights)

    @property
    def hidden_layers(self) -> list:
        """Non-Input/Output layer names in topological order."""
        return [n for n in self._order if self.by_name[n].op not in ("Input", "Output")]

    def topo_order(self) -> list:
        return list(self._order)

    def layer_weight_bytes(self, name: str) -> int:
        return sum(self.weights[r].nbytes for r in self.by_name[name].weight_refs)

    def to_json(self) -> dict:
        return {"name": self.name, "layers": [l.to_json() for l in self.layers]}

    def __eq__(self, other) -> bool:
        if not isinstance(other, Model):
            return NotImplemented
        return self.to_json() == other.to_json() and self.weights == other.weights

    def __repr__(self) -> str:
        return f"Model({self.name!r}, {len(self.layers)} layers, {self.weights.total_bytes} weight bytes)"


def topo_order(m: Model) -> list:
    """Layer names ordered so every layer follows its inputs; ties by name."""
    return m.topo_order()


def _propagate_shapes(order, by_name, weights) -> dict:
    shapes = {}
    for name in order:
        layer = by_name[name]
        shapes[name] = layer_output_shape(layer, [shapes[s] for s in layer.inputs], weights)
    return shapes


def infer_shapes(m: Model) -> dict:
    return _propagate_shapes(m.topo_order(), m.by_name, m.weights)


def model_from_json(obj, weights: WeightStore) -> Model:
    if not isinstance(obj, dict) or not isinstance(obj.get("layers"), list):
        raise ParseError("graph file must be an object with a 'layers' list")
    name = obj.get("name", "")
    if not isinstance(name, str):
        raise ParseError("graph 'name' must be a string")
    return Model(name, [Layer.from_json(l) for l in obj["layers"]], weights)


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc.msg})", exc.lineno) from None


def load_model(model_path, weights_path) -> Model:
    obj = read_json(model_path)
    weights = load_weights(weights_path)
    return model_from_json(obj, weights)


def save_model(m: Model, model_path, weights_path) -> None:
    with open(model_path, "w", encoding="utf-8") as fh:
        json.dump(m.to_json(), fh, indent=1)
        fh.write("\n")
    save_weights(m.weights, weights_path)
