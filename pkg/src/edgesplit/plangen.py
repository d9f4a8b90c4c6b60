"""Per-rank execution plans and deployment packages.

A plan is the portable form of one rank's code block: receives are registered
up front, each layer runs once its inputs are local, outputs are sent as soon
as they are produced, and the rank finally waits for its sends to drain.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .commgen import ReceiverTable, Rankfile, SenderTable, write_tables
from .errors import ParseError, PlanError
from .model import read_json
from .splitter import SubModel, save_submodel

KINDS = ("RegisterRecv", "WaitRecv", "Compute", "Send", "WaitSendAll", "ReadInput", "WriteOutput")


@dataclass(frozen=True)
class PlanAction:
    kind: str
    buffer: str | None = None
    src: int | None = None
    to: tuple = ()
    layer: str | None = None

    def to_json(self) -> dict:
        d = {"kind": self.kind}
        if self.kind in ("RegisterRecv", "WaitRecv", "Send"):
            d["buffer"] = self.buffer
        if self.kind == "RegisterRecv":
            d["src"] = self.src
        if self.kind == "Send":
            d["to"] = list(self.to)
        if self.kind == "Compute":
            d["layer"] = self.layer
        return d

    @classmethod
    def from_json(cls, d) -> "PlanAction":
        kind = d.get("kind") if isinstance(d, dict) else None
        if kind not in KINDS:
            raise ParseError(f"unknown plan action {d!r}")
        try:
            if kind == "RegisterRecv":
                return cls(kind, buffer=d["buffer"], src=d["src"])
            if kind == "WaitRecv":
                return cls(kind, buffer=d["buffer"])
            if kind == "Send":
                return cls(kind, buffer=d["buffer"], to=tuple(d["to"]))
            if kind == "Compute":
                return cls(kind, layer=d["layer"])
        except KeyError as exc:
            raise ParseError(f"{kind} action missing {exc.args[0]!r}") from None
        return cls(kind)

    def __str__(self) -> str:
        if self.kind == "RegisterRecv":
            return f"RegisterRecv({self.buffer},{self.src})"
        if self.kind == "WaitRecv":
            return f"WaitRecv({self.buffer})"
        if self.kind == "Send":
            return f"Send({self.buffer},{list(self.to)})"
        if self.kind == "Compute":
            return f"Compute({self.layer})"
        return self.kind


@dataclass
class ExecutionPlan:
    rank: int
    num_threads: int
    actions: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"rank": self.rank, "num_threads": self.num_threads, "actions": [a.to_json() for a in self.actions]}

    @classmethod
    def from_json(cls, obj) -> "ExecutionPlan":
        try:
            rank, nt, acts = obj["rank"], obj["num_threads"], obj["actions"]
        except (KeyError, TypeError):
            raise ParseError("plan needs rank, num_threads and actions") from None
        if not isinstance(nt, int) or nt < 1:
            raise ParseError(f"num_threads must be a positive integer, got {nt!r}")
        return cls(rank, nt, [PlanAction.from_json(a) for a in acts])

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1) + "\n"


def gen_plan(sm: SubModel, st: SenderTable, rt: ReceiverTable) -> ExecutionPlan:
    recvs = rt.for_rank(sm.rank)
    registered = {b for b, _ in recvs}
    missing = [b for b in sm.input_buffers if b not in registered]
    if missing:
        raise PlanError(f"rank {sm.rank}: buffer {missing[0]} is consumed but has no registered receive")
    sends = dict(st.for_rank(sm.rank))
    unsent = [b for b in sm.output_buffers if b not in sends]
    if unsent:
        raise PlanError(f"rank {sm.rank}: output buffer {unsent[0]} has no sender-table entry")

    local = set(sm.layer_names)
    inbound = {sm.buffer_layer[b]: b for b in sm.input_buffers}  # foreign producer -> buffer
    outbound = {sm.buffer_layer[b]: b for b in sm.output_buffers}

    actions = [PlanAction("RegisterRecv", buffer=b, src=s) for b, s in recvs]
    waited = set()
    for layer in sm.layers:
        for src in dict.fromkeys(layer.inputs):
            if src in local:
                continue
            buf = inbound.get(src)
            if buf is None:
                raise PlanError(f"rank {sm.rank}: {layer.name} consumes {src} with no input buffer")
            if buf not in waited:
                waited.add(buf)
                actions.append(PlanAction("WaitRecv", buffer=buf))
        if layer.op == "Input":
            actions.append(PlanAction("ReadInput"))
        elif layer.op == "Output":
            actions.append(PlanAction("WriteOutput"))
        else:
            actions.append(PlanAction("Compute", layer=layer.name))
        if layer.name in outbound:
            buf = outbound[layer.name]
            actions.append(PlanAction("Send", buffer=buf, to=tuple(sends[buf])))
    if any(a.kind == "Send" for a in actions):
        actions.append(PlanAction("WaitSendAll"))
    return ExecutionPlan(sm.rank, sm.key.num_threads, actions)


def check_plan(plan: ExecutionPlan, sm: SubModel) -> None:
    """Single-pass static safety check; raises PlanError on the first violation."""
    where = f"rank {plan.rank}"
    local = set(sm.layer_names)
    by_name = {l.name: l for l in sm.layers}
    inbound = {sm.buffer_layer[b]: b for b in sm.input_buffers}
    producers = {b: sm.buffer_layer[b] for b in sm.output_buffers}
    registered, waited, done, sent = {}, set(), set(), set()
    in_prologue = True

    def need_inputs(layer):
        for src in layer.inputs:
            if src in local:
                if src not in done:
                    raise PlanError(f"{where}: {layer.name} runs before local producer {src}")
            else:
                buf = inbound.get(src)
                if buf is None:
                    raise PlanError(f"{where}: {layer.name} consumes {src}, which no input buffer carries")
                if buf not in waited:
                    raise PlanError(f"{where}: {layer.name} consumes {buf} before waiting for it")

    for i, a in enumerate(plan.actions):
        if a.kind == "RegisterRecv":
            if not in_prologue:
                raise PlanError(f"{where}: RegisterRecv({a.buffer}) after the prologue")
            if a.buffer not in sm.input_buffers:
                raise PlanError(f"{where}: registers unknown buffer {a.buffer}")
            if a.buffer in registered:
                raise PlanError(f"{where}: {a.buffer} registered twice")
            registered[a.buffer] = a.src
            continue
        in_prologue = False
        if a.kind == "WaitRecv":
            if a.buffer not in registered:
                raise PlanError(f"{where}: waits on {a.buffer} without registering a receive")
            if a.buffer in waited:
                raise PlanError(f"{where}: waits on {a.buffer} twice")
            waited.add(a.buffer)
        elif a.kind in ("Compute", "ReadInput", "WriteOutput"):
            if a.kind == "Compute":
                layer = by_name.get(a.layer)
                if layer is None or layer.op in ("Input", "Output"):
                    raise PlanError(f"{where}: Compute of unknown layer {a.layer}")
            else:
                op = "Input" if a.kind == "ReadInput" else "Output"
                layer = next((l for l in sm.layers if l.op == op), None)
                if layer is None:
                    raise PlanError(f"{where}: {a.kind} on a rank without the {op} layer")
            if layer.name in done:
                raise PlanError(f"{where}: {layer.name} executed twice")
            need_inputs(layer)
            done.add(layer.name)
        elif a.kind == "Send":
            if a.buffer not in producers:
                raise PlanError(f"{where}: sends unknown buffer {a.buffer}")
            if producers[a.buffer] not in done:
                raise PlanError(f"{where}: sends {a.buffer} before {producers[a.buffer]} produced it")
            if a.buffer in sent:
                raise PlanError(f"{where}: sends {a.buffer} twice")
            if not a.to or plan.rank in a.to:
                raise PlanError(f"{where}: bad destination list for {a.buffer}")
            sent.add(a.buffer)
        elif a.kind == "WaitSendAll":
            if i != len(plan.actions) - 1:
                raise PlanError(f"{where}: WaitSendAll must be the final action")
    for b in sm.input_buffers:
        if b not in registered:
            raise PlanError(f"{where}: no receive registered for input buffer {b}")
    unrun = [n for n in sm.layer_names if n not in done]
    if unrun:
        raise PlanError(f"{where}: layer {unrun[0]} never executed")
    unsent = [b for b in sm.output_buffers if b not in sent]
    if unsent:
        raise PlanError(f"{where}: output buffer {unsent[0]} never sent")
    if sent and (not plan.actions or plan.actions[-1].kind != "WaitSendAll"):
        raise PlanError(f"{where}: plan with sends must end with WaitSendAll")


def render_pseudocode(plans) -> str:
    """Render plans as an SPMD pseudo-C++ listing, one ``if (rank == i)`` block per plan."""
    lines = []
    for plan in plans:
        lines.append(f"if (rank == {plan.rank}) {{  // num_threads = {plan.num_threads}")
        regs = [a for a in plan.actions if a.kind == "RegisterRecv"]
        if regs:
            lines.append("  " + "; ".join(f"MPI_Irecv({a.buffer}, from={a.src})" for a in regs) + ";")
        pending = []
        for a in plan.actions:
            if a.kind == "ReadInput":
                lines.append("  input = read_image();")
            elif a.kind == "WaitRecv":
                lines.append(f"  MPI_Wait(recv {a.buffer});")
            elif a.kind == "Compute":
                lines.append(f"  {a.layer}.forward(num_threads);")
            elif a.kind == "Send":
                dst = ", ".join(str(d) for d in a.to)
                lines.append(f"  MPI_Isend({a.buffer}, to={{{dst}}});")
                pending.append(a.buffer)
            elif a.kind == "WriteOutput":
                lines.append("  write_output();")
            elif a.kind == "WaitSendAll":
                for b in pending:
                    lines.append(f"  MPI_Wait(send {b});")
        lines.append("}")
    return "\n".join(lines) + "\n"


def rankfile_bytes(rf: Rankfile) -> bytes:
    return rf.format().encode("utf-8")


def gen_package(plans, submodels, rankfile: Rankfile, tables, out_dir) -> list:
    """Write one ``package_<rank>`` directory per rank; returns their paths."""
    st, rt = tables
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rf = rankfile_bytes(rankfile)
    dirs = []
    by_rank = {sm.rank: sm for sm in submodels}
    for plan in plans:
        d = out / f"package_{plan.rank}"
        d.mkdir(parents=True, exist_ok=True)
        (d / "plan.json").write_text(plan.dumps(), encoding="utf-8")
        save_submodel(by_rank[plan.rank], d)
        (d / "rankfile.txt").write_bytes(rf)
        write_tables(st, rt, d)
        dirs.append(d)
    return dirs


def load_plan(path) -> ExecutionPlan:
    return ExecutionPlan.from_json(read_json(path))
