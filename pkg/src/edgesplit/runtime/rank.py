"""Execution of one rank's plan against the message mesh."""

from __future__ import annotations

import os
import resource
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..errors import PlanError, ProtocolError, ShapeError
from ..plangen import ExecutionPlan, check_plan
from ..splitter import SubModel, buffer_id
from .kernels import F32, execute_layer
from .transport import Transport

# Fixed per-process allowance (interpreter, runtime, kernel scratch) in the memory estimate.
RUNTIME_OVERHEAD_BYTES = 32 * 2**20


def memory_estimate(weight_bytes: int, buffer_bytes: int, gpu: bool = False) -> int:
    """Resident bytes of one rank; GPU ranks hold weights twice (host + device copy)."""
    return weight_bytes * (2 if gpu else 1) + buffer_bytes + RUNTIME_OVERHEAD_BYTES


@dataclass
class RankResult:
    rank: int
    outputs: list = field(default_factory=list)
    t_start: float = 0.0  # wall clock (time.time) when iteration 0 began
    t_end: float = 0.0
    iteration_ends: list = field(default_factory=list)
    compute_s: float = 0.0
    messages_received: int = 0
    messages_sent: int = 0
    peak_memory_estimate: int = 0
    rss_bytes: int | None = None

    def stats(self) -> dict:
        return {
            "rank": self.rank,
            "t_start": self.t_start,
            "t_end": self.t_end,
            "iteration_ends": self.iteration_ends,
            "compute_s": self.compute_s,
            "messages_received": self.messages_received,
            "messages_sent": self.messages_sent,
            "peak_memory_estimate": self.peak_memory_estimate,
            "rss_bytes": self.rss_bytes,
        }


def _rss_bytes():
    try:
        return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
    except (OSError, ValueError):
        return None


def run_rank(plan: ExecutionPlan, sm: SubModel, endpoints: dict, input=None, repeat: int = 1,
             listen_sock=None, connect_timeout: float = 10.0, timeout: float = 30.0,
             fail_after: int | None = None, barrier=None) -> RankResult:
    """Execute ``plan`` ``repeat`` times; iteration ``i`` uses message sequence number ``i``.

    ``fail_after`` aborts the process after that many actions (fault injection).
    ``barrier`` is called once the transport is listening, before timing starts.
    """
    check_plan(plan, sm)
    by_name = {l.name: l for l in sm.layers}
    producer = dict(sm.buffer_layer)
    allowed = {(a.src, buffer_id(a.buffer)) for a in plan.actions if a.kind == "RegisterRecv"}
    input_layer = next((l for l in sm.layers if l.op == "Input"), None)
    output_layer = next((l for l in sm.layers if l.op == "Output"), None)
    if input_layer is not None:
        if input is None:
            raise ShapeError(input_layer.name, "rank owns the Input layer but got no input tensor")
        want = tuple(input_layer.attrs["shape"])
        input = np.ascontiguousarray(input, dtype=F32)
        if input.shape != want:
            raise ShapeError(input_layer.name, f"input has shape {list(input.shape)}, expected {list(want)}")

    result = RankResult(plan.rank)
    result.peak_memory_estimate = memory_estimate(sm.weights.total_bytes, sm.buffer_bytes, sm.key.gpu)
    pool = ThreadPoolExecutor(plan.num_threads) if plan.num_threads > 1 else None
    transport = Transport(plan.rank, endpoints, listen_sock, allowed, connect_timeout, timeout)
    steps = 0
    try:
        if barrier is not None:
            barrier()
        result.t_start = time.time()
        for it in range(repeat):
            values = {}
            registered = {}
            for a in plan.actions:
                if fail_after is not None and steps >= fail_after:
                    os._exit(17)
                steps += 1
                if a.kind == "RegisterRecv":
                    registered[a.buffer] = a.src
                elif a.kind == "WaitRecv":
                    src = registered.get(a.buffer)
                    if src is None:
                        raise PlanError(f"rank {plan.rank}: WaitRecv({a.buffer}) was never registered")
                    data = transport.wait(src, buffer_id(a.buffer), it)
                    want = sm.input_buffers[a.buffer].dims
                    if data is None or data.shape != want:
                        raise ProtocolError(f"rank {plan.rank}: {a.buffer} arrived with wrong shape")
                    values[producer[a.buffer]] = data
                    result.messages_received += 1
                elif a.kind == "ReadInput":
                    values[input_layer.name] = input
                elif a.kind == "Compute":
                    layer = by_name[a.layer]
                    t0 = time.perf_counter()
                    values[layer.name] = execute_layer(
                        layer, [values[s] for s in layer.inputs], sm.weights, plan.num_threads, pool
                    )
                    result.compute_s += time.perf_counter() - t0
                elif a.kind == "Send":
                    data = values[producer[a.buffer]]
                    for dst in a.to:
                        transport.send(dst, buffer_id(a.buffer), it, data)
                        result.messages_sent += 1
                elif a.kind == "WriteOutput":
                    result.outputs.append(values[output_layer.inputs[0]].copy())
                elif a.kind == "WaitSendAll":
                    transport.flush()
            result.iteration_ends.append(time.time())
        transport.flush()
        leftover = transport.mailbox.pending()
        if leftover:
            raise ProtocolError(f"rank {plan.rank}: unconsumed messages {leftover[:3]}")
        result.t_end = time.time()
    finally:
        transport.close()
        if pool is not None:
            pool.shutdown()
    result.rss_bytes = _rss_bytes()
    return result
