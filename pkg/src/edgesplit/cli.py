"""Command-line front door: validate, split, commgen, plan, package, run, profile, dse.

Exit status: 0 success, 1 invalid input (model, mapping, platform, plan,
profile, GA settings), 2 file-system or I/O problem, 3 runtime failure while
executing packages.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import LaunchError, RuntimeFailure, ValidationError

log = logging.getLogger("edgesplit")

FORMATS = """\
file formats:
  model.json     {"name", "layers": [{"name", "op", "attrs", "inputs", "weights"}]}
  weights.bin    "ADCE", u32 version, u32 count, then per tensor: u16 name length,
                 name, u8 rank, u32 dims, float32 payload (all little-endian)
  platform.txt   one device per line: NAME cpu=ARCH slots=A-B [gpu=ARCH api=API]
  mapping.json   {"<device>_arm<slots>" | "<device>_gpu": [layer, ...], ...};
                 key order defines rank numbers
  profile.json   {"layers": {name: {"latency_ms": {kind: v}, "energy_mj": {kind: v},
                 "weight_bytes", "output_bytes"}}, "link": {"inter": {...}, "intra": {...}}}
  input files    binary PGM (P5, scaled to [0, 1]) or raw little-endian float32
"""

EXIT_VALIDATION, EXIT_IO, EXIT_RUNTIME = 1, 2, 3


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _load_model(args):
    from .model import load_model

    return load_model(args.model, args.weights)


def _load_platform(args):
    from .specio import parse_platform

    return parse_platform(args.platform) if getattr(args, "platform", None) else None


def _load_mapping(args, m, p):
    from .specio import parse_mapping

    return parse_mapping(args.mapping, m, p)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")


# -- subcommands --------------------------------------------------------------


def cmd_validate(args) -> int:
    m = _load_model(args)
    print(f"model {m.name}: {len(m.hidden_layers)} hidden layers, {m.weights.total_bytes} weight bytes")
    p = _load_platform(args)
    if p is not None:
        print(f"platform: {len(p.devices)} devices")
    if args.mapping:
        ms = _load_mapping(args, m, p)
        print(f"mapping: {len(ms)} ranks ({', '.join(k.text for k in ms.keys)})")
    return 0


def cmd_split(args) -> int:
    from .splitter import save_submodel
    from .toolchain import front_end

    m = _load_model(args)
    p = _load_platform(args)
    fe = front_end(m, _load_mapping(args, m, p), p)
    out = Path(args.out)
    for sm in fe.submodels:
        save_submodel(sm, out / f"submodel_{sm.rank}")
        print(f"rank {sm.rank} ({sm.key.text}): {len(sm.layers)} layers, "
              f"in {sorted(sm.input_buffers)}, out {sorted(sm.output_buffers)}")
    return 0


def cmd_commgen(args) -> int:
    from .commgen import write_tables
    from .toolchain import front_end

    m = _load_model(args)
    p = _load_platform(args)
    fe = front_end(m, _load_mapping(args, m, p), p)
    out = Path(args.out)
    write_tables(fe.senders, fe.receivers, out)
    (out / "rankfile.txt").write_text(fe.rankfile.format(), encoding="utf-8")
    print(fe.rankfile.format(), end="")
    return 0


def cmd_plan(args) -> int:
    from .plangen import render_pseudocode
    from .toolchain import back_end, front_end

    m = _load_model(args)
    p = _load_platform(args)
    plans = back_end(front_end(m, _load_mapping(args, m, p), p))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for plan in plans:
        (out / f"plan_{plan.rank}.json").write_text(plan.dumps(), encoding="utf-8")
    code = render_pseudocode(plans)
    (out / "program.txt").write_text(code, encoding="utf-8")
    print(code, end="")
    return 0


def cmd_package(args) -> int:
    from .toolchain import build_packages

    started = _now()
    t0 = time.perf_counter()
    m = _load_model(args)
    p = _load_platform(args)
    ms = _load_mapping(args, m, p)
    load_s = time.perf_counter() - t0
    out = Path(args.out)
    dirs, plans, timings = build_packages(m, ms, out, p)
    timings = {"load_s": load_s, **timings, "total_s": load_s + timings["total_s"]}
    inputs = {"model": args.model, "weights": args.weights, "platform": args.platform, "mapping": args.mapping}
    manifest = {
        "tool": "edgesplit",
        "version": __version__,
        "started": started,
        "finished": _now(),
        "ranks": len(plans),
        "parameters": m.weights.total_bytes // 4,
        "hidden_layers": len(m.hidden_layers),
        "timings": timings,
        "inputs": {k: {"path": str(v), "sha256": _sha256(Path(v))} for k, v in inputs.items() if v},
        "outputs": {
            str(f.relative_to(out)): _sha256(f) for d in dirs for f in sorted(Path(d).iterdir()) if f.is_file()
        },
    }
    _write_json(out / "manifest.json", manifest)
    print(f"{len(dirs)} packages in {out} (front end {timings['front_end_s']:.3f} s, "
          f"back end {timings['back_end_s']:.3f} s)")
    return 0


def _package_dirs(root: Path) -> list:
    dirs = sorted((d for d in root.glob("package_*") if d.is_dir()), key=lambda d: int(d.name.split("_")[1]))
    if not dirs and (root / "plan.json").exists():
        dirs = [root]
    if not dirs:
        raise FileNotFoundError(f"no packages under {root}")
    return dirs


def cmd_run(args) -> int:
    from .runtime.launch import input_shape, launch
    from .tensorio import read_input

    dirs = _package_dirs(Path(args.packages))
    shape = input_shape(dirs)
    if args.input:
        x = read_input(args.input, shape, args.input_format)
    else:
        x = np.random.default_rng(args.seed).random(shape, dtype=np.float32)
    res = launch(dirs, repeat=args.repeat, input=x, timeout=args.timeout)
    out = Path(args.out) if args.out else Path(args.packages) / "results.json"
    doc = res.to_json()
    doc["ranks_memory_estimate_bytes"] = {str(r): s["peak_memory_estimate"] for r, s in sorted(res.ranks.items())}
    _write_json(out, doc)
    top = np.asarray(res.outputs[-1]).reshape(-1)
    print(f"{len(res.outputs)} inferences, {res.throughput_fps:.2f} fps; argmax {int(top.argmax())}; wrote {out}")
    return 0


def cmd_profile(args) -> int:
    from .costmodel import profile_layers

    m = _load_model(args)
    p = _load_platform(args)
    threads = [int(t) for t in args.threads.split(",")] if args.threads else None
    gpu = args.gpu
    if p is not None:
        # cover every core count a mapping key on this platform can name
        threads = sorted(set(threads or []) | set(range(1, max(d.cores for d in p.devices) + 1)))
        gpu = gpu or any(d.has_gpu for d in p.devices)
    prof = profile_layers(m, repeats=args.repeats, thread_counts=threads, gpu=gpu,
                          cpu_core_power_w=args.cpu_power, gpu_power_w=args.gpu_power,
                          measure_link=not args.no_link, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(prof.dumps(), encoding="utf-8")
    print(f"profiled {len(m.hidden_layers)} layers into {out}")
    return 0


def cmd_dse(args) -> int:
    from .costmodel import load_profile
    from .dse import GAConfig, config_header, run_nsga2, write_results
    from .specio import resource_options

    try:
        cfg = GAConfig(args.population, args.mutation, args.crossover, args.generations, args.seed)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    m = _load_model(args)
    p = _load_platform(args)
    prof = load_profile(args.profile)
    prof.check_covers(m)
    options = resource_options(p)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "stats.jsonl", "w", encoding="utf-8") as fh:
        fh.write(config_header(cfg, options) + "\n")

        def on_gen(stats, pop, objs):
            fh.write(json.dumps(stats) + "\n")
            if stats["generation"] % 50 == 0:
                log.info("generation %d: archive %d", stats["generation"], stats["archive_size"])

        archive = run_nsga2(m, p, prof, cfg, options, on_generation=on_gen, live=args.live)
    path = write_results(archive, options, m, out)
    print(f"{len(archive)} Pareto points after {cfg.generations} generations; wrote {path}")
    return 0


# -- parser -------------------------------------------------------------------


def _add_model(sp, mapping=False, platform=False, platform_required=False):
    sp.add_argument("--model", required=True, help="model.json")
    sp.add_argument("--weights", required=True, help="weights.bin")
    if platform:
        sp.add_argument("--platform", required=platform_required, help="platform.txt")
    if mapping:
        sp.add_argument("--mapping", required=mapping == "required", help="mapping.json")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="edgesplit", description=__doc__.splitlines()[0], epilog=FORMATS,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--version", action="version", version=f"edgesplit {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help, description=help, epilog=FORMATS,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.set_defaults(func=fn)
        return sp

    sp = add("validate", cmd_validate, "check a model and optionally a platform and mapping")
    _add_model(sp, mapping=True, platform=True)

    for name, fn, help in (
        ("split", cmd_split, "write one sub-model directory per rank"),
        ("commgen", cmd_commgen, "write sender/receiver tables and the rankfile"),
        ("plan", cmd_plan, "write per-rank execution plans and the combined program listing"),
        ("package", cmd_package, "run front end and back end, write packages and manifest.json"),
    ):
        sp = add(name, fn, help)
        _add_model(sp, mapping="required", platform=True, platform_required=name == "package")
        sp.add_argument("--out", required=True, help="output directory")

    sp = add("run", cmd_run, "launch packages as a local process mesh and write results.json")
    sp.add_argument("packages", help="directory holding package_<rank> directories")
    sp.add_argument("--input", help="input tensor file (PGM or raw float32); random if omitted")
    sp.add_argument("--input-format", choices=("auto", "pgm", "raw"), default="auto")
    sp.add_argument("--repeat", type=int, default=20, help="pipelined inferences (default 20)")
    sp.add_argument("--timeout", type=float, default=60.0, help="seconds for the whole launch")
    sp.add_argument("--seed", type=int, default=0, help="seed for the random input")
    sp.add_argument("--out", help="results path (default <packages>/results.json)")

    sp = add("profile", cmd_profile, "time every layer locally and write profile.json")
    _add_model(sp, platform=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--threads", help="comma-separated thread counts (default 1 and all cores)")
    sp.add_argument("--gpu", action="store_true", help="add a modelled gpu entry per layer")
    sp.add_argument("--cpu-power", type=float, default=1.0, help="watts per busy core")
    sp.add_argument("--gpu-power", type=float, default=5.0, help="watts for the gpu")
    sp.add_argument("--no-link", action="store_true", help="skip the loopback bandwidth benchmark")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("dse", cmd_dse, "NSGA-II search for Pareto-optimal mappings")
    _add_model(sp, platform=True, platform_required=True)
    sp.add_argument("--profile", required=True, help="profile.json")
    sp.add_argument("--out", required=True, help="directory for pareto.csv, stats.jsonl, mappings/")
    sp.add_argument("--population", type=int, default=100)
    sp.add_argument("--generations", type=int, default=400)
    sp.add_argument("--mutation", type=float, default=0.1, help="per-gene mutation probability")
    sp.add_argument("--crossover", type=float, default=0.5, help="crossover probability")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--live", action="store_true",
                    help="measure throughput by launching each candidate (slow, not reproducible)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except LaunchError as exc:
        print(f"error: runtime failure: {exc}", file=sys.stderr)
        for rank, msg in sorted(exc.rank_errors.items()):
            print(f"  rank {rank}: {msg}", file=sys.stderr)
        return EXIT_RUNTIME
    except RuntimeFailure as exc:
        print(f"error: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
