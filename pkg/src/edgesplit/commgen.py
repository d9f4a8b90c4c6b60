"""Sender/receiver tables and the rankfile that wire sub-models together."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

from .errors import ParseError
from .model import read_json
from .specio import MappingSpec
from .splitter import buffer_id


@dataclass
class SenderTable:
    # rank -> [(buffer, [dst ranks])], ordered by buffer id
    sends: dict

    def for_rank(self, rank: int) -> list:
        return self.sends.get(rank, [])

    def to_json(self) -> list:
        return [
            {"rank": r, "sends": [{"buffer": b, "to": list(dst)} for b, dst in entries]}
            for r, entries in sorted(self.sends.items())
        ]

    @classmethod
    def from_json(cls, obj) -> "SenderTable":
        try:
            return cls({e["rank"]: [(s["buffer"], list(s["to"])) for s in e["sends"]] for e in obj})
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed sender table ({exc})") from None


@dataclass
class ReceiverTable:
    # rank -> [(buffer, src rank)], ordered by buffer id
    recvs: dict

    def for_rank(self, rank: int) -> list:
        return self.recvs.get(rank, [])

    def to_json(self) -> list:
        return [
            {"rank": r, "recvs": [{"buffer": b, "from": s} for b, s in entries]}
            for r, entries in sorted(self.recvs.items())
        ]

    @classmethod
    def from_json(cls, obj) -> "ReceiverTable":
        try:
            return cls({e["rank"]: [(r["buffer"], r["from"]) for r in e["recvs"]] for e in obj})
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed receiver table ({exc})") from None


def gen_comm_tables(cuts) -> tuple:
    fan = {}  # (src rank, buffer) -> set of dst ranks
    inbound = {}  # (dst rank, buffer) -> src rank
    for c in cuts:
        fan.setdefault((c.src_rank, c.buffer), set()).add(c.dst_rank)
        inbound[(c.dst_rank, c.buffer)] = c.src_rank
    sends, recvs = {}, {}
    for (src, buf), dsts in sorted(fan.items(), key=lambda kv: (kv[0][0], buffer_id(kv[0][1]))):
        sends.setdefault(src, []).append((buf, sorted(dsts)))
    for (dst, buf), src in sorted(inbound.items(), key=lambda kv: (kv[0][0], buffer_id(kv[0][1]))):
        recvs.setdefault(dst, []).append((buf, src))
    return SenderTable(sends), ReceiverTable(recvs)


@dataclass(frozen=True)
class RankfileEntry:
    rank: int
    device: str
    slots: tuple  # empty when gpu
    gpu: bool = False

    def format(self) -> str:
        where = "gpu" if self.gpu else ",".join(str(s) for s in self.slots)
        return f"rank {self.rank}={self.device} slot={where}"


@dataclass(frozen=True)
class Rankfile:
    entries: tuple

    def format(self) -> str:
        return "".join(e.format() + "\n" for e in self.entries)

    def __len__(self) -> int:
        return len(self.entries)


def gen_rankfile(ms: MappingSpec) -> Rankfile:
    return Rankfile(tuple(RankfileEntry(i, k.device, k.slots, k.gpu) for i, k in enumerate(ms.keys)))


_RANK_RE = re.compile(r"rank (\d+)=(\S+) slot=(gpu|\d+(?:,\d+)*)")


def parse_rankfile_text(text: str) -> Rankfile:
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        m = _RANK_RE.fullmatch(line.strip())
        if not m:
            raise ParseError(f"bad rankfile line {line!r}", lineno)
        gpu = m.group(3) == "gpu"
        slots = () if gpu else tuple(int(s) for s in m.group(3).split(","))
        entries.append(RankfileEntry(int(m.group(1)), m.group(2), slots, gpu))
    return Rankfile(tuple(entries))


def write_tables(st: SenderTable, rt: ReceiverTable, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "sender.json").write_text(json.dumps(st.to_json(), indent=1) + "\n", encoding="utf-8")
    (d / "receiver.json").write_text(json.dumps(rt.to_json(), indent=1) + "\n", encoding="utf-8")


def read_tables(directory) -> tuple:
    d = Path(directory)
    return (
        SenderTable.from_json(read_json(d / "sender.json")),
        ReceiverTable.from_json(read_json(d / "receiver.json")),
    )
