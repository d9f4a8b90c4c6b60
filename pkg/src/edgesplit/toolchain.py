"""Front end (split + communication tables) and back end (plans + packages) in one place."""

from __future__ import annotations

import time
from dataclasses import dataclass

from .commgen import Rankfile, ReceiverTable, SenderTable, gen_comm_tables, gen_rankfile
from .model import Model
from .plangen import ExecutionPlan, check_plan, gen_package, gen_plan
from .specio import MappingSpec, PlatformSpec, validate_mapping
from .splitter import cut_edges, split_model


@dataclass
class FrontEnd:
    submodels: list
    cuts: list
    senders: SenderTable
    receivers: ReceiverTable
    rankfile: Rankfile


def front_end(m: Model, ms: MappingSpec, p: PlatformSpec | None = None) -> FrontEnd:
    validate_mapping(ms, m, p)
    cuts = cut_edges(m, ms)
    st, rt = gen_comm_tables(cuts)
    return FrontEnd(split_model(m, ms), cuts, st, rt, gen_rankfile(ms))


def back_end(fe: FrontEnd) -> list:
    """One checked execution plan per rank."""
    plans = []
    for sm in fe.submodels:
        plan = gen_plan(sm, fe.senders, fe.receivers)
        check_plan(plan, sm)
        plans.append(plan)
    return plans


def build_packages(m: Model, ms: MappingSpec, out_dir, p: PlatformSpec | None = None):
    """Write deployable packages; returns (package dirs, plans, timings in seconds)."""
    t0 = time.perf_counter()
    fe = front_end(m, ms, p)
    t1 = time.perf_counter()
    plans: list[ExecutionPlan] = back_end(fe)
    dirs = gen_package(plans, fe.submodels, fe.rankfile, (fe.senders, fe.receivers), out_dir)
    t2 = time.perf_counter()
    return dirs, plans, {"front_end_s": t1 - t0, "back_end_s": t2 - t1, "total_s": t2 - t0}
