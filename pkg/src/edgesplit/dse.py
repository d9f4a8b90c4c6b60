"""NSGA-II search over layer-to-resource mappings.

A chromosome holds one gene per hidden layer (topological order); a gene is an
index into the resource option list. Any chromosome decodes to a valid
mapping, so no repair step is needed.
"""

from __future__ import annotations

import csv
import json
import logging
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .costmodel import ObjectiveVector, Profile, _Evaluator
from .model import Model
from .specio import MappingSpec, PlatformSpec, resource_options

log = logging.getLogger(__name__)


@dataclass
class GAConfig:
    population_size: int = 100
    mutation_prob: float = 0.1
    crossover_prob: float = 0.5
    generations: int = 400
    seed: int = 0

    def __post_init__(self):
        for name in ("mutation_prob", "crossover_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")


def decode(genes, options, m: Model) -> MappingSpec:
    """Group hidden layers by gene value; keys appear in first-use order."""
    hidden = m.hidden_layers
    if len(genes) != len(hidden):
        raise ValueError(f"chromosome has {len(genes)} genes for {len(hidden)} hidden layers")
    groups = {}
    for layer, g in zip(hidden, genes):
        groups.setdefault(int(g), []).append(layer)
    if not groups:
        groups[0] = []
    return MappingSpec([(options[g], layers) for g, layers in groups.items()])


def _owner_from_genes(genes, hidden, input_name, output_name):
    keys_idx, owner = {}, {}
    for layer, g in zip(hidden, genes):
        owner[layer] = keys_idx.setdefault(int(g), len(keys_idx))
    owner[input_name] = owner[hidden[0]]
    owner[output_name] = owner[hidden[-1]]
    return list(keys_idx), owner


def random_mapping(m: Model, options, n_ranks: int, rng) -> MappingSpec:
    """Random consistent mapping using exactly ``n_ranks`` distinct options."""
    hidden = m.hidden_layers
    if not 1 <= n_ranks <= min(len(options), len(hidden)):
        raise ValueError(f"cannot use {n_ranks} ranks with {len(options)} options and {len(hidden)} layers")
    chosen = rng.choice(len(options), size=n_ranks, replace=False)
    genes = rng.integers(0, n_ranks, size=len(hidden))
    seed_layers = rng.choice(len(hidden), size=n_ranks, replace=False)
    genes[seed_layers] = np.arange(n_ranks)
    return decode([int(chosen[g]) for g in genes], options, m)


def _as_min_array(points) -> np.ndarray:
    rows = [p.minimized() if isinstance(p, ObjectiveVector) else tuple(p) for p in points]
    return np.asarray(rows, dtype=float)


def dominates(a, b) -> bool:
    """``a`` dominates ``b`` (all objectives minimized)."""
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def nondominated_sort(points) -> list:
    """Fronts of indices; front 0 is the non-dominated set."""
    f = _as_min_array(points)
    n = len(f)
    if n == 0:
        return []
    le = (f[:, None, :] <= f[None, :, :]).all(axis=2)
    lt = (f[:, None, :] < f[None, :, :]).any(axis=2)
    dom = le & lt  # dom[i, j]: i dominates j
    count = dom.sum(axis=0)
    fronts = []
    current = np.flatnonzero(count == 0)
    while current.size:
        fronts.append([int(i) for i in current])
        count = count - dom[current].sum(axis=0)
        count[current] = -1
        current = np.flatnonzero(count == 0)
    return fronts


def crowding_distance(front) -> list:
    f = _as_min_array(front)
    n = len(f)
    dist = np.zeros(n)
    if n <= 2:
        return [float("inf")] * n
    for k in range(f.shape[1]):
        order = np.argsort(f[:, k], kind="stable")
        lo, hi = f[order[0], k], f[order[-1], k]
        dist[order[0]] = dist[order[-1]] = np.inf
        if hi == lo:
            continue
        gaps = (f[order[2:], k] - f[order[:-2], k]) / (hi - lo)
        dist[order[1:-1]] += gaps
    return [float(d) for d in dist]


class ParetoArchive:
    """Mutually non-dominated (chromosome, objectives) pairs, one per objective vector."""

    def __init__(self):
        self._items = {}  # minimized tuple -> (genes tuple, ObjectiveVector)

    def update(self, genes, vec: ObjectiveVector) -> bool:
        key = vec.minimized()
        if key in self._items:
            return False
        if any(dominates(k, key) for k in self._items):
            return False
        for k in [k for k in self._items if dominates(key, k)]:
            del self._items[k]
        self._items[key] = (tuple(int(g) for g in genes), vec)
        return True

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(sorted(self._items.values(), key=lambda gv: gv[1].minimized()))

    def vectors(self) -> list:
        return [v for _, v in self]


class _Fitness:
    def __init__(self, m: Model, prof: Profile, options):
        self.m = m
        self.ev = _Evaluator(m, prof)
        self.options = options
        self.hidden = m.hidden_layers
        self.cache = {}

    def __call__(self, genes) -> ObjectiveVector:
        key = tuple(int(g) for g in genes)
        vec = self.cache.get(key)
        if vec is None:
            idx, owner = _owner_from_genes(key, self.hidden, self.m.input_name, self.m.output_name)
            vec = self.ev.evaluate([self.options[i] for i in idx], owner)
            vec = self.refine(key, vec)
            self.cache[key] = vec
        return vec

    def refine(self, genes, vec: ObjectiveVector) -> ObjectiveVector:
        return vec


class _LiveFitness(_Fitness):
    """Replaces modelled throughput with a measured local launch of the candidate.

    Slow and timing-dependent, so runs using it are not reproducible.
    """

    def __init__(self, m, prof, options, repeat: int = 5, timeout: float = 60.0):
        super().__init__(m, prof, options)
        self.repeat = repeat
        self.timeout = timeout

    def refine(self, genes, vec):
        from .runtime.launch import launch
        from .toolchain import build_packages

        with tempfile.TemporaryDirectory(prefix="edgesplit-dse-") as tmp:
            dirs, _, _ = build_packages(self.m, decode(genes, self.options, self.m), tmp)
            fps = launch(dirs, repeat=self.repeat, timeout=self.timeout).throughput_fps
        return ObjectiveVector(vec.max_device_energy_mj, fps, vec.max_device_memory_mb)


def _rank_and_crowd(objs):
    fronts = nondominated_sort(objs)
    rank = np.empty(len(objs), dtype=int)
    crowd = np.empty(len(objs))
    for r, front in enumerate(fronts):
        rank[front] = r
        crowd[front] = crowding_distance([objs[i] for i in front])
    return fronts, rank, crowd


def _tournament(rng, rank, crowd):
    a, b = rng.integers(0, len(rank), size=2)
    if rank[a] != rank[b]:
        return a if rank[a] < rank[b] else b
    return a if crowd[a] >= crowd[b] else b


def run_nsga2(m: Model, p: PlatformSpec, prof: Profile, cfg: GAConfig, options=None,
              on_generation=None, live: bool = False) -> ParetoArchive:
    """Seeded NSGA-II with an external elitist archive.

    ``on_generation(stats_dict, population, objectives)`` is called after the
    initial population (generation 0) and after every survival step. With
    ``live`` the throughput objective comes from real local launches.
    """
    options = list(options) if options is not None else resource_options(p)
    prof.check_covers(m)
    rng = np.random.default_rng(cfg.seed)
    n_genes, n_opt, size = len(m.hidden_layers), len(options), cfg.population_size
    fitness = (_LiveFitness if live else _Fitness)(m, prof, options)
    archive = ParetoArchive()

    pop = rng.integers(0, n_opt, size=(size, n_genes))
    objs = [fitness(g) for g in pop]
    for g, v in zip(pop, objs):
        archive.update(g, v)
    fronts, rank, crowd = _rank_and_crowd(objs)
    _report(on_generation, 0, fitness, archive, fronts, pop, objs)

    for gen in range(1, cfg.generations + 1):
        children = []
        while len(children) < size:
            p1 = pop[_tournament(rng, rank, crowd)]
            p2 = pop[_tournament(rng, rank, crowd)]
            if rng.random() < cfg.crossover_prob:
                mask = rng.random(n_genes) < 0.5
                c1, c2 = np.where(mask, p1, p2), np.where(mask, p2, p1)
            else:
                c1, c2 = p1.copy(), p2.copy()
            for c in (c1, c2):
                hit = rng.random(n_genes) < cfg.mutation_prob
                c[hit] = rng.integers(0, n_opt, size=int(hit.sum()))
                children.append(c)
        children = np.array(children[:size])
        child_objs = [fitness(g) for g in children]
        for g, v in zip(children, child_objs):
            archive.update(g, v)

        union = np.concatenate([pop, children])
        union_objs = objs + child_objs
        fronts = nondominated_sort(union_objs)
        keep = []
        for front in fronts:
            if len(keep) + len(front) <= size:
                keep.extend(front)
                continue
            d = crowding_distance([union_objs[i] for i in front])
            order = sorted(range(len(front)), key=lambda i: -d[i])
            keep.extend(front[i] for i in order[: size - len(keep)])
            break
        pop = union[keep]
        objs = [union_objs[i] for i in keep]
        fronts, rank, crowd = _rank_and_crowd(objs)
        _report(on_generation, gen, fitness, archive, fronts, pop, objs)
    return archive


def _report(cb, gen, fitness, archive, fronts, pop, objs):
    if cb is None:
        return
    vecs = archive.vectors()
    stats = {
        "generation": gen,
        "evaluations": len(fitness.cache),
        "archive_size": len(archive),
        "front0_size": len(fronts[0]) if fronts else 0,
        "best_energy_mj": min(v.max_device_energy_mj for v in vecs),
        "best_throughput_fps": max(v.throughput_fps for v in vecs),
        "best_memory_mb": min(v.max_device_memory_mb for v in vecs),
    }
    cb(stats, pop, objs)


def exhaustive_pareto(m: Model, prof: Profile, options) -> set:
    """True Pareto set of objective vectors by enumerating every chromosome."""
    fitness = _Fitness(m, prof, options)
    n = len(m.hidden_layers)
    vecs = set()
    for flat in range(len(options) ** n):
        genes = []
        for _ in range(n):
            flat, g = divmod(flat, len(options))
            genes.append(g)
        vecs.add(fitness(genes))
    vecs = sorted(vecs)
    front = nondominated_sort(vecs)[0]
    return {vecs[i] for i in front}


def write_results(archive: ParetoArchive, options, m: Model, out_dir) -> Path:
    """pareto.csv plus one mapping JSON per archive point."""
    out = Path(out_dir)
    (out / "mappings").mkdir(parents=True, exist_ok=True)
    path = out / "pareto.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["max_device_energy_mj", "throughput_fps", "max_device_memory_mb", "ranks", "mapping"])
        for i, (genes, vec) in enumerate(archive):
            ms = decode(genes, options, m)
            rel = f"mappings/pareto_{i:03d}.json"
            (out / rel).write_text(ms.format(), encoding="utf-8")
            w.writerow([repr(vec.max_device_energy_mj), repr(vec.throughput_fps),
                        repr(vec.max_device_memory_mb), len(ms), rel])
    return path


def config_header(cfg: GAConfig, options) -> str:
    return json.dumps({"config": asdict(cfg), "options": [k.text for k in options]})
