"""Process entry point for one rank: ``python -m edgesplit.runtime.worker``.

Configuration comes from the environment: ``RANK``, ``EDGESPLIT_ENDPOINTS`` (path of
the endpoints JSON), ``EDGESPLIT_PACKAGE`` (this rank's package directory) and
``EDGESPLIT_RUN_DIR`` (where results go). Optional: ``EDGESPLIT_INPUT`` (.npy input),
``EDGESPLIT_REPEAT``, ``EDGESPLIT_LISTEN_FD`` (pre-bound listening socket inherited from
the launcher), ``EDGESPLIT_TIMEOUT``, ``EDGESPLIT_CONNECT_TIMEOUT``, ``EDGESPLIT_FAIL_AFTER``.
"""

from __future__ import annotations

import json
import os
import socket
import sys
import traceback
from pathlib import Path

import numpy as np


def _barrier() -> None:
    # launcher releases all ranks together once every rank is listening
    print("READY", flush=True)
    sys.stdin.readline()


def main() -> int:
    rank = int(os.environ["RANK"])
    run_dir = Path(os.environ["EDGESPLIT_RUN_DIR"])
    status = {"rank": rank, "ok": False}
    try:
        from ..plangen import load_plan
        from ..splitter import load_submodel
        from .rank import run_rank
        from .transport import load_endpoints

        pkg = Path(os.environ["EDGESPLIT_PACKAGE"])
        plan = load_plan(pkg / "plan.json")
        sm = load_submodel(pkg)
        if plan.rank != rank or sm.rank != rank:
            raise ValueError(f"package {pkg} holds rank {plan.rank}, launched as rank {rank}")
        endpoints = load_endpoints(os.environ["EDGESPLIT_ENDPOINTS"])
        listen = None
        if "EDGESPLIT_LISTEN_FD" in os.environ:
            listen = socket.socket(fileno=int(os.environ["EDGESPLIT_LISTEN_FD"]))
        x = np.load(os.environ["EDGESPLIT_INPUT"]) if sm.owns_input else None
        fail_after = os.environ.get("EDGESPLIT_FAIL_AFTER")
        result = run_rank(
            plan, sm, endpoints, x,
            repeat=int(os.environ.get("EDGESPLIT_REPEAT", "1")),
            listen_sock=listen,
            connect_timeout=float(os.environ.get("EDGESPLIT_CONNECT_TIMEOUT", "10")),
            timeout=float(os.environ.get("EDGESPLIT_TIMEOUT", "30")),
            fail_after=int(fail_after) if fail_after else None,
            barrier=_barrier if os.environ.get("EDGESPLIT_BARRIER") else None,
        )
        if result.outputs:
            np.save(run_dir / f"rank_{rank}_outputs.npy", np.stack(result.outputs))
        status.update(ok=True, **result.stats())
        code = 0
    except Exception as exc:  # reported to the launcher, which aggregates ranks
        status.update(error=f"{type(exc).__name__}: {exc}", error_type=type(exc).__name__,
                      traceback=traceback.format_exc())
        code = 1
    tmp = run_dir / f"rank_{rank}.json.tmp"
    tmp.write_text(json.dumps(status), encoding="utf-8")
    tmp.replace(run_dir / f"rank_{rank}.json")
    return code


if __name__ == "__main__":
    sys.exit(main())
