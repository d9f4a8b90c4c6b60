"""Platform and mapping specifications, and resource keys.

Platform file, one device per line (``#`` starts a comment)::

    edge01 cpu=ARM slots=0-5 gpu=NVIDIAVolta api=CUDA
    edge04 cpu=ARM slots=0-5

Mapping file: JSON object ``{"<device>_arm<digits>" | "<device>_gpu": [layer, ...]}``.
Key order in the file fixes the rank numbering.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

from .errors import (
    DuplicateAssignment,
    DuplicateDevice,
    ParseError,
    UnassignedLayer,
    UnknownLayer,
    UnknownResource,
    ValidationError,
)
from .model import Model

# Slot digits are concatenated in resource keys, so only 0-9 are expressible.
MAX_SLOT = 9

_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9.\-]*$")


@dataclass(frozen=True)
class DeviceSpec:
    name: str
    cpu_arch: str
    first_slot: int
    last_slot: int
    gpu_arch: Optional[str] = None
    gpu_api: Optional[str] = None

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise ValidationError(f"invalid device name {self.name!r}")
        if not 0 <= self.first_slot <= self.last_slot:
            raise ValidationError(f"{self.name}: bad slot range {self.first_slot}-{self.last_slot}")
        if (self.gpu_arch is None) != (self.gpu_api is None):
            raise ValidationError(f"{self.name}: gpu and api must be given together")

    @property
    def cores(self) -> int:
        return self.last_slot - self.first_slot + 1

    @property
    def slots(self) -> range:
        return range(self.first_slot, self.last_slot + 1)

    @property
    def has_gpu(self) -> bool:
        return self.gpu_arch is not None

    def format(self) -> str:
        line = f"{self.name} cpu={self.cpu_arch} slots={self.first_slot}-{self.last_slot}"
        if self.has_gpu:
            line += f" gpu={self.gpu_arch} api={self.gpu_api}"
        return line


@dataclass(frozen=True)
class PlatformSpec:
    devices: tuple

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(self.devices))
        if not self.devices:
            raise ParseError("no devices")
        seen = set()
        for d in self.devices:
            if d.name in seen:
                raise DuplicateDevice(f"device {d.name!r} listed twice")
            seen.add(d.name)

    def device(self, name: str) -> DeviceSpec:
        for d in self.devices:
            if d.name == name:
                return d
        raise UnknownResource(f"unknown device {name!r}")

    def format(self) -> str:
        return "".join(d.format() + "\n" for d in self.devices)


_VALUE_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")


def parse_platform_text(text: str) -> PlatformSpec:
    devices = []
    names = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        name, *fields = line.split()
        opts = {}
        for f in fields:
            key, sep, value = f.partition("=")
            if not sep or not value or key not in ("cpu", "slots", "gpu", "api"):
                raise ParseError(f"unexpected field {f!r}", lineno)
            if key in opts:
                raise ParseError(f"field {key!r} repeated", lineno)
            if not _VALUE_RE.match(value):
                raise ParseError(f"bad value {value!r} for {key}", lineno)
            opts[key] = value
        for req in ("cpu", "slots"):
            if req not in opts:
                raise ParseError(f"device {name!r} missing {req}=", lineno)
        m = re.fullmatch(r"(\d+)(?:-(\d+))?", opts["slots"])
        if not m:
            raise ParseError(f"bad slot range {opts['slots']!r}", lineno)
        first = int(m.group(1))
        last = int(m.group(2)) if m.group(2) is not None else first
        if last < first:
            raise ParseError(f"slot range {opts['slots']!r} is empty", lineno)
        if name in names:
            raise DuplicateDevice(f"line {lineno}: device {name!r} listed twice")
        names.add(name)
        try:
            devices.append(DeviceSpec(name, opts["cpu"], first, last, opts.get("gpu"), opts.get("api")))
        except ValidationError as exc:
            raise ParseError(str(exc), lineno) from None
    if not devices:
        raise ParseError("no devices")
    return PlatformSpec(tuple(devices))


def parse_platform(path) -> PlatformSpec:
    return parse_platform_text(Path(path).read_text(encoding="utf-8"))


# -- resource keys ------------------------------------------------------------


@dataclass(frozen=True, order=True)
class ResourceKey:
    device: str
    slots: tuple = ()  # empty for the GPU
    gpu: bool = False

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(sorted(set(self.slots))))
        if self.gpu and self.slots:
            raise ValidationError("a GPU key carries no CPU slots")
        if not self.gpu and not self.slots:
            raise ValidationError(f"{self.device}: CPU key needs at least one slot")
        if any(not 0 <= s <= MAX_SLOT for s in self.slots):
            raise ValidationError(f"{self.device}: slot indices must be 0-{MAX_SLOT}")

    @property
    def text(self) -> str:
        if self.gpu:
            return f"{self.device}_gpu"
        return f"{self.device}_arm" + "".join(str(s) for s in self.slots)

    @property
    def kind(self) -> str:
        """Cost-profile class of this resource: ``cpu<n>`` or ``gpu``."""
        return "gpu" if self.gpu else f"cpu{len(self.slots)}"

    @property
    def num_threads(self) -> int:
        return 1 if self.gpu else len(self.slots)

    def conflicts(self, other: "ResourceKey") -> bool:
        """True if both keys compete for the same physical resource."""
        if self.device != other.device or self.gpu != other.gpu:
            return False
        return self.gpu or bool(set(self.slots) & set(other.slots))

    def __str__(self) -> str:
        return self.text


def parse_key(text: str) -> ResourceKey:
    m = re.fullmatch(r"(.+)_(gpu|arm(\d+))", text)
    if not m:
        raise UnknownResource(f"malformed resource key {text!r}")
    device = m.group(1)
    if m.group(2) == "gpu":
        return ResourceKey(device, (), True)
    digits = m.group(3)
    slots = [int(c) for c in digits]
    if len(set(slots)) != len(slots):
        raise UnknownResource(f"resource key {text!r} repeats a core index")
    return ResourceKey(device, tuple(slots))


def check_key(key: ResourceKey, p: PlatformSpec) -> None:
    try:
        dev = p.device(key.device)
    except UnknownResource:
        raise UnknownResource(f"resource {key.text!r}: device {key.device!r} not in platform") from None
    if key.gpu and not dev.has_gpu:
        raise UnknownResource(f"resource {key.text!r}: device {dev.name} has no GPU")
    bad = [s for s in key.slots if s not in dev.slots]
    if bad:
        raise UnknownResource(f"resource {key.text!r}: slots {bad} outside {dev.first_slot}-{dev.last_slot}")


class MappingSpec:
    """Ordered resource key -> layer list assignment (vertical partitioning)."""

    def __init__(self, assignments: Iterable):
        items = assignments.items() if isinstance(assignments, dict) else assignments
        self.assignments = []
        seen = set()
        for key, layers in items:
            if isinstance(key, str):
                key = parse_key(key)
            if key in seen:
                raise DuplicateAssignment(f"resource key {key.text!r} appears twice")
            seen.add(key)
            self.assignments.append((key, tuple(layers)))

    @property
    def keys(self) -> list:
        return [k for k, _ in self.assignments]

    def __len__(self) -> int:
        return len(self.assignments)

    def owner_of(self) -> dict:
        """layer name -> rank for every listed layer."""
        return {layer: rank for rank, (_, layers) in enumerate(self.assignments) for layer in layers}

    def to_json(self) -> dict:
        return {k.text: list(v) for k, v in self.assignments}

    def format(self) -> str:
        return json.dumps(self.to_json(), indent=1) + "\n"

    def __eq__(self, other) -> bool:
        return isinstance(other, MappingSpec) and self.assignments == other.assignments

    def __repr__(self) -> str:
        return f"MappingSpec({self.to_json()!r})"


def validate_mapping(ms: MappingSpec, m: Model, p: Optional[PlatformSpec] = None) -> MappingSpec:
    for key in ms.keys:
        if p is not None:
            check_key(key, p)
    hidden = set(m.hidden_layers)
    if not ms.assignments:
        raise ValidationError("mapping has no resource keys")
    placed = {}
    for key, layers in ms.assignments:
        if not layers and hidden:
            raise ValidationError(f"resource key {key.text!r} has no layers")
        for layer in layers:
            if layer not in m.by_name:
                raise UnknownLayer(f"unknown layer {layer!r} under {key.text!r}")
            if layer not in hidden:
                raise UnknownLayer(f"{layer!r} is an {m.by_name[layer].op} layer and cannot be mapped")
            if layer in placed:
                raise DuplicateAssignment(
                    f"layer {layer!r} assigned to both {placed[layer]!r} and {key.text!r}"
                )
            placed[layer] = key.text
    missing = [l for l in m.hidden_layers if l not in placed]
    if missing:
        raise UnassignedLayer(f"layer {missing[0]!r} is not assigned to any resource"
                              + (f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""))
    return ms


def mapping_from_json(obj) -> MappingSpec:
    if not isinstance(obj, dict):
        raise ParseError("mapping file must be a JSON object")
    for k, v in obj.items():
        if not isinstance(v, list) or not all(isinstance(x, str) for x in v):
            raise ParseError(f"mapping value for {k!r} must be a list of layer names")
    return MappingSpec(obj.items())


def _reject_duplicate_keys(pairs):
    seen = set()
    for k, _ in pairs:
        if k in seen:
            raise DuplicateAssignment(f"resource key {k!r} appears twice")
        seen.add(k)
    return dict(pairs)


def parse_mapping_text(text: str, m: Model, p: Optional[PlatformSpec] = None) -> MappingSpec:
    try:
        obj = json.loads(text, object_pairs_hook=_reject_duplicate_keys)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid mapping JSON ({exc.msg})", exc.lineno) from None
    return validate_mapping(mapping_from_json(obj), m, p)


def parse_mapping(path, m: Model, p: Optional[PlatformSpec] = None) -> MappingSpec:
    return parse_mapping_text(Path(path).read_text(encoding="utf-8"), m, p)


def layer_owners(m: Model, ms: MappingSpec) -> dict:
    """layer -> rank for every layer, Input/Output included.

    Input goes with the rank of the first hidden layer in topological order,
    Output with the rank of the last one.
    """
    owner = ms.owner_of()
    hidden = m.hidden_layers
    if hidden:
        owner[m.input_name] = owner[hidden[0]]
        owner[m.output_name] = owner[hidden[-1]]
    else:
        owner[m.input_name] = owner[m.output_name] = 0
    return owner


def resource_options(p: PlatformSpec, policy: str = "default") -> list:
    """Per device: single core, all cores, then GPU if present. Duplicates dropped."""
    if policy != "default":
        raise ValueError(f"unknown option policy {policy!r}")
    out, seen = [], set()
    for dev in p.devices:
        usable = [s for s in dev.slots if s <= MAX_SLOT]
        if not usable:
            continue
        cands = [ResourceKey(dev.name, (usable[0],)), ResourceKey(dev.name, tuple(usable))]
        if dev.has_gpu:
            cands.append(ResourceKey(dev.name, (), True))
        for key in cands:
            if key.text not in seen:
                seen.add(key.text)
                out.append(key)
    return out
