"""Local multi-process launcher: one OS process per rank on the loopback mesh."""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import socket
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import LaunchError, SpawnError, Timeout, ValidationError
from .transport import dump_endpoints

_SRC_ROOT = str(Path(__file__).resolve().parents[2])


@dataclass
class InferenceResult:
    outputs: list
    throughput_fps: float
    ranks: dict = field(default_factory=dict)  # rank -> stats dict
    wall_s: float = 0.0

    def to_json(self) -> dict:
        return {
            "repeat": len(self.outputs),
            "throughput_fps": self.throughput_fps,
            "wall_s": self.wall_s,
            "outputs": [o.reshape(-1).tolist() for o in self.outputs],
            "output_shape": list(self.outputs[0].shape) if self.outputs else [],
            "ranks": {str(r): {k: v for k, v in s.items() if k != "iteration_ends"} for r, s in sorted(self.ranks.items())},
        }


def _package_info(d: Path):
    with open(d / "plan.json", encoding="utf-8") as fh:
        rank = json.load(fh)["rank"]
    with open(d / "submodel.json", encoding="utf-8") as fh:
        sub = json.load(fh)
    digest = hashlib.sha256((d / "rankfile.txt").read_bytes()).hexdigest()
    return rank, sub, digest


def input_shape(packages) -> tuple:
    for d in packages:
        _, sub, _ = _package_info(Path(d))
        for layer in sub["layers"]:
            if layer["op"] == "Input":
                return tuple(layer["attrs"]["shape"])
    raise ValidationError("no package owns the Input layer")


def _wait_ready(proc, event):
    line = proc.stdout.readline()
    if line.strip() == b"READY":
        event.set()


def launch(packages, repeat: int = 1, input=None, timeout: float = 30.0,
           connect_timeout: float = 10.0, faults=None, run_dir=None) -> InferenceResult:
    """Run every package as its own process and collect outputs and statistics.

    ``timeout`` bounds the whole launch; ``faults`` maps rank -> number of plan
    actions after which that rank hard-exits (fault injection).
    """
    if repeat < 1:
        raise ValueError("repeat must be >= 1")
    pkgs = {}
    digests = set()
    for d in map(Path, packages):
        rank, sub, digest = _package_info(d)
        pkgs[rank] = (d, sub)
        digests.add(digest)
    if sorted(pkgs) != list(range(len(pkgs))) or not pkgs:
        raise ValidationError(f"packages must cover ranks 0..n-1, got {sorted(pkgs)}")
    if len(digests) != 1:
        raise ValidationError("packages carry different rankfiles")

    own_dir = run_dir is None
    run = Path(tempfile.mkdtemp(prefix="edgesplit-run-")) if own_dir else Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    shape = input_shape([d for d, _ in pkgs.values()])
    if input is None:
        input = np.random.default_rng(0).random(shape, dtype=np.float32)
    input = np.ascontiguousarray(input, dtype=np.float32)
    np.save(run / "input.npy", input)

    listeners = {}
    procs = {}
    t_launch = time.time()
    try:
        for r in pkgs:
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            s.bind(("127.0.0.1", 0))
            s.listen(64)
            listeners[r] = s
        endpoints = {r: s.getsockname() for r, s in listeners.items()}
        (run / "endpoints.json").write_text(dump_endpoints(endpoints), encoding="utf-8")

        base_env = dict(os.environ)
        base_env["PYTHONPATH"] = os.pathsep.join(p for p in (_SRC_ROOT, base_env.get("PYTHONPATH")) if p)
        base_env.update(OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1", MKL_NUM_THREADS="1")
        for r, (d, _) in sorted(pkgs.items()):
            env = dict(base_env)
            env.update(
                RANK=str(r),
                EDGESPLIT_ENDPOINTS=str(run / "endpoints.json"),
                EDGESPLIT_PACKAGE=str(d),
                EDGESPLIT_RUN_DIR=str(run),
                EDGESPLIT_INPUT=str(run / "input.npy"),
                EDGESPLIT_REPEAT=str(repeat),
                EDGESPLIT_LISTEN_FD=str(listeners[r].fileno()),
                EDGESPLIT_TIMEOUT=str(timeout),
                EDGESPLIT_CONNECT_TIMEOUT=str(connect_timeout),
                EDGESPLIT_BARRIER="1",
            )
            if faults and r in faults:
                env["EDGESPLIT_FAIL_AFTER"] = str(faults[r])
            err = open(run / f"rank_{r}.stderr", "wb")
            try:
                procs[r] = subprocess.Popen(
                    [sys.executable, "-m", "edgesplit.runtime.worker"],
                    env=env, stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=err,
                    pass_fds=(listeners[r].fileno(),),
                )
            except OSError as exc:
                raise SpawnError(f"cannot start rank {r}: {exc}") from None
            finally:
                err.close()
        for s in listeners.values():
            s.close()
        listeners.clear()

        deadline = time.monotonic() + timeout
        ready = {r: threading.Event() for r in procs}
        for r, p in procs.items():
            threading.Thread(target=_wait_ready, args=(p, ready[r]), daemon=True).start()
        while not all(e.is_set() for e in ready.values()):
            if any(p.poll() is not None for r, p in procs.items() if not ready[r].is_set()):
                break
            if time.monotonic() > deadline:
                raise Timeout("ranks did not come up before the deadline")
            time.sleep(0.005)
        for p in procs.values():
            try:
                p.stdin.write(b"GO\n")
                p.stdin.close()
            except OSError:
                pass

        while any(p.poll() is None for p in procs.values()):
            if time.monotonic() > deadline:
                running = sorted(r for r, p in procs.items() if p.poll() is None)
                raise Timeout(f"launch exceeded {timeout:.1f}s; ranks still running: {running}")
            time.sleep(0.01)
        wall = time.time() - t_launch

        stats, errors = {}, {}
        for r, p in sorted(procs.items()):
            status_file = run / f"rank_{r}.json"
            if status_file.exists():
                st = json.loads(status_file.read_text(encoding="utf-8"))
                if st.get("ok"):
                    stats[r] = st
                else:
                    errors[r] = st.get("error", "failed")
            else:
                errors[r] = f"exited with code {p.returncode} without reporting"
        if errors:
            raise LaunchError(errors)

        out_rank = next(r for r, (_, sub) in pkgs.items() if any(l["op"] == "Output" for l in sub["layers"]))
        in_rank = next(r for r, (_, sub) in pkgs.items() if any(l["op"] == "Input" for l in sub["layers"]))
        outputs = list(np.load(run / f"rank_{out_rank}_outputs.npy"))
        span = stats[out_rank]["iteration_ends"][-1] - stats[in_rank]["t_start"]
        fps = repeat / span if span > 0 else float("inf")
        return InferenceResult(outputs, fps, stats, wall)
    finally:
        for s in listeners.values():
            s.close()
        for p in procs.values():
            if p.poll() is None:
                p.kill()
                p.wait()
            for fh in (p.stdin, p.stdout):
                if fh is not None:
                    try:
                        fh.close()
                    except OSError:
                        pass
        if own_dir:
            shutil.rmtree(run, ignore_errors=True)
