"""Instances, padding, normalization and corpus assembly.

A corpus directory holds ``manifest.json`` plus one ``NNNNNNN.tci`` container
per instance (see :mod:`lagcausal.container`).
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import container
from .graph import GraphConfig, LaggedGraph, sample_er_graph
from .rng import derive_seed, make_rng
from .tscm import (MechanismPolicy, SimConfig, SimulationError, TscmError, example_tscm, sample_tscm, simulate,
                   stability_screen)

log = logging.getLogger(__name__)

NORM_EPS = 1e-8
PAD_STD = 0.1  # N(0, 0.01) read as variance 0.01
INSTANCE_SUFFIX = ".tci"
SYNTHETIC = "synthetic"


class CorpusError(ValueError):
    pass


@dataclass
class SeriesInstance:
    series: np.ndarray
    graph: LaggedGraph
    id: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.series = np.asarray(self.series)
        if self.series.ndim != 2:
            raise CorpusError(f"series must be 2-D, got shape {self.series.shape}")
        if self.series.shape[1] != self.graph.num_vars:
            raise CorpusError(f"dimension mismatch: series has {self.series.shape[1]} columns, "
                              f"graph declares {self.graph.num_vars} variables")
        if not np.isfinite(self.series).all():
            raise CorpusError(f"instance {self.id!r} contains non-finite values")

    @property
    def num_vars(self) -> int:
        return self.graph.num_vars

    @property
    def length(self) -> int:
        return self.series.shape[0]


@dataclass
class PaddedInstance:
    series: np.ndarray      # (L_max, V_max)
    label: np.ndarray       # (V_max, V_max, max_lag)
    mask: np.ndarray        # (V_max,) True for real variables
    length: int             # real rows at the top of ``series``


def minmax_normalize(series: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """Per-column ``(x - min) / (max - min + eps)``; constant columns become 0."""
    x = np.asarray(series, dtype=np.float64)
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    return (x - lo) / (hi - lo + eps)


def pad_instance(inst: SeriesInstance, l_max: int, v_max: int, max_lag: int, seed: int) -> PaddedInstance:
    """Fit an instance into fixed ``(l_max, v_max)`` input and label shapes.

    Missing rows and columns are filled with N(0, 0.01) noise, the label is
    zero-padded, and series longer than ``l_max`` keep their last ``l_max``
    rows.

    Raises:
        CorpusError: the instance has more variables than ``v_max`` or edges
            beyond ``max_lag``; neither can be truncated without corrupting
            the label.
    """
    v = inst.num_vars
    if v > v_max:
        raise CorpusError(f"instance {inst.id!r} has {v} variables, more than v_max={v_max}")
    if inst.graph.max_lag > max_lag and any(lag > max_lag for _, _, lag in inst.graph.edges):
        raise CorpusError(f"instance {inst.id!r} has edges beyond max_lag={max_lag}")
    rng = make_rng(derive_seed(seed, "pad"))
    out = rng.normal(0.0, PAD_STD, size=(l_max, v_max))
    real = inst.series[-l_max:]
    n = real.shape[0]
    out[:n, :v] = real
    mask = np.zeros(v_max, dtype=bool)
    mask[:v] = True
    label = inst.graph.padded_adj(v_max, max_lag)
    return PaddedInstance(out, label, mask, n)


def unpad(p: PaddedInstance) -> np.ndarray:
    return p.series[:p.length, p.mask]


def instance_bytes(inst: SeriesInstance) -> bytes:
    meta = {
        "id": inst.id,
        "length": inst.length,
        "num_vars": inst.num_vars,
        "graph": inst.graph.to_json(),
        "provenance": inst.provenance,
    }
    return container.pack(container.KIND_INSTANCE, meta, inst.series)


def write_instance(inst: SeriesInstance, path) -> bytes:
    data = instance_bytes(inst)
    Path(path).write_bytes(data)
    return data


def read_instance(path) -> SeriesInstance:
    """Load and validate one instance container.

    Raises:
        container.ContainerError: truncated or corrupted file.
        CorpusError: metadata inconsistent with the payload or graph.
    """
    meta, payload = container.read_file(path, container.KIND_INSTANCE)
    try:
        length, v = int(meta["length"]), int(meta["num_vars"])
        graph = LaggedGraph.from_json(meta["graph"])
    except (KeyError, TypeError, ValueError) as exc:
        raise container.ContainerError("metadata", f"missing or invalid field: {exc}") from exc
    if payload.size != length * v:
        raise CorpusError(f"dimension mismatch: payload has {payload.size} values, "
                          f"metadata declares {length}x{v}")
    series = payload.reshape(length, v)
    return SeriesInstance(series, graph, str(meta.get("id", "")), meta.get("provenance", {}))


@dataclass(frozen=True)
class CorpusSpec:
    """Everything that determines a corpus.

    ``vars`` and ``density`` are inclusive ranges; the number of variables is
    drawn uniformly from the integers in ``vars`` and the density uniformly
    from the real interval.  ``mixture`` pairs source tags with proportions;
    any tag other than ``"synthetic"`` must appear in ``external`` pointing to
    a directory of instance containers.
    """

    count: int = 100
    vars: tuple[int, int] = (3, 5)
    density: tuple[float, float] = (0.1, 0.4)
    policy: MechanismPolicy = MechanismPolicy()
    num_steps: int = 500
    max_lag: int = 3
    min_lag: int = 1
    allow_self_lagged: bool = True
    warmup: int = 100
    mixture: tuple[tuple[str, float], ...] = ((SYNTHETIC, 1.0),)
    external: tuple[tuple[str, str], ...] = ()
    normalize: bool = True
    max_attempts: int = 1000
    max_drift: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        if self.count < 0:
            raise CorpusError("count must be >= 0")
        if not 2 <= self.vars[0] <= self.vars[1]:
            raise CorpusError(f"invalid variable range {self.vars}")
        if not 0 < self.density[0] <= self.density[1] <= 1:
            raise CorpusError(f"invalid density range {self.density}")
        if not self.policy.kinds:
            raise CorpusError("mechanism policy enables no kinds")
        if self.min_lag > self.max_lag or self.min_lag < 1:
            raise CorpusError(f"invalid lag range {self.min_lag}..{self.max_lag}")
        props = [p for _, p in self.mixture]
        if not self.mixture or any(not 0 <= p <= 1 for p in props) or not math.isclose(sum(props), 1.0, abs_tol=1e-9):
            raise CorpusError(f"mixture proportions must lie in [0, 1] and sum to 1, got {props}")
        ext = dict(self.external)
        for tag, p in self.mixture:
            if tag != SYNTHETIC and p > 0 and tag not in ext:
                raise CorpusError(f"mixture source {tag!r} has no external directory")
        try:
            SimConfig(self.num_steps, self.warmup).validate(self.max_lag)
        except TscmError as exc:
            raise CorpusError(str(exc)) from exc

    def to_json(self) -> dict:
        return {
            "count": self.count,
            "vars": list(self.vars),
            "density": list(self.density),
            "policy": self.policy.to_json(),
            "num_steps": self.num_steps,
            "max_lag": self.max_lag,
            "min_lag": self.min_lag,
            "allow_self_lagged": self.allow_self_lagged,
            "warmup": self.warmup,
            "mixture": [list(m) for m in self.mixture],
            "external": [list(e) for e in self.external],
            "normalize": self.normalize,
            "max_attempts": self.max_attempts,
            "max_drift": self.max_drift,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CorpusSpec":
        d = dict(d)
        kw = {}
        if "policy" in d:
            kw["policy"] = MechanismPolicy.from_json(d.pop("policy"))
        for key in ("mixture", "external"):
            if key in d:
                kw[key] = tuple((str(a), b) for a, b in d.pop(key))
        for key in ("vars", "density"):
            if key in d:
                kw[key] = tuple(d.pop(key))
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise CorpusError(f"unknown corpus spec fields: {sorted(unknown)}")
        return cls(**kw, **d)


def mixture_counts(count: int, mixture: Sequence[tuple[str, float]]) -> dict[str, int]:
    """Largest-remainder split of ``count`` across sources (ties go to the earlier source)."""
    raw = [(tag, p * count) for tag, p in mixture]
    counts = {tag: int(math.floor(x + 1e-9)) for tag, x in raw}
    left = count - sum(counts.values())
    order = sorted(range(len(raw)), key=lambda k: (-(raw[k][1] - counts[raw[k][0]]), k))
    for k in order[:left]:
        counts[raw[k][0]] += 1
    return counts


def source_plan(spec: CorpusSpec) -> list[str]:
    """Source tag for every instance index, shuffled deterministically."""
    counts = mixture_counts(spec.count, spec.mixture)
    tags = [tag for tag, _ in spec.mixture for _ in range(counts[tag])]
    perm = make_rng(derive_seed(spec.seed, "mixture")).permutation(len(tags))
    return [tags[k] for k in perm]


def synthetic_instance(spec: CorpusSpec, index: int) -> tuple[SeriesInstance, int]:
    """Generate instance ``index``; returns it with the number of rejected draws.

    Each attempt re-derives a seed from ``(spec.seed, index, attempt)`` and
    redraws the graph and mechanisms.
    """
    sc = SimConfig(spec.num_steps, spec.warmup)
    for attempt in range(spec.max_attempts):
        seed = derive_seed(spec.seed, "instance", index, attempt)
        rng = make_rng(derive_seed(seed, "dims"))
        v = int(rng.integers(spec.vars[0], spec.vars[1] + 1))
        p = float(rng.uniform(*spec.density))
        g = sample_er_graph(GraphConfig(v, spec.max_lag, p, spec.allow_self_lagged, spec.min_lag,
                                        derive_seed(seed, "graph")))
        model = sample_tscm(g, spec.policy, seed)
        diag = stability_screen(model, sc, spec.max_drift)
        if not diag.stable:
            log.debug("instance %d attempt %d rejected: %s", index, attempt, diag.to_json())
            continue
        try:
            x = simulate(model, sc)
        except SimulationError as exc:
            log.debug("instance %d attempt %d failed: %s", index, attempt, exc)
            continue
        if spec.normalize:
            x = minmax_normalize(x)
        prov = {"source": SYNTHETIC, "seed": seed, "attempt": attempt, "tscm": model.to_json()}
        return SeriesInstance(x.astype(np.float32), g, f"{index:07d}", prov), attempt
    raise CorpusError(f"instance {index}: no stable draw in {spec.max_attempts} attempts")


def _external_pool(directory) -> list[Path]:
    pool = sorted(Path(directory).glob(f"*{INSTANCE_SUFFIX}"))
    if not pool:
        raise CorpusError(f"external source directory {directory} has no {INSTANCE_SUFFIX} files")
    return pool


def iter_instances(spec: CorpusSpec, jobs: int = 1) -> Iterator[tuple[SeriesInstance, int]]:
    """Yield ``(instance, rejections)`` in index order.

    Synthetic draws may run on ``jobs`` worker processes; results are
    consumed in index order so the output does not depend on scheduling.
    """
    spec.validate()
    plan = source_plan(spec)
    ext = dict(spec.external)
    pools = {tag: _external_pool(ext[tag]) for tag in set(plan) if tag != SYNTHETIC}
    picks = {tag: make_rng(derive_seed(spec.seed, "pool", tag)).permutation(len(pool))
             for tag, pool in pools.items()}
    synth_idx = [k for k, tag in enumerate(plan) if tag == SYNTHETIC]
    if jobs > 1 and len(synth_idx) > 1:
        pool_ex = ProcessPoolExecutor(max_workers=jobs)
        synth = pool_ex.map(partial(synthetic_instance, spec), synth_idx, chunksize=max(1, len(synth_idx) // (4 * jobs)))
    else:
        pool_ex = None
        synth = map(partial(synthetic_instance, spec), synth_idx)
    seen = {tag: 0 for tag in pools}
    try:
        for index, tag in enumerate(plan):
            if tag == SYNTHETIC:
                yield next(synth)
                continue
            k = seen[tag]
            seen[tag] += 1
            path = pools[tag][picks[tag][k % len(pools[tag])]]
            src = read_instance(path)
            x = minmax_normalize(src.series) if spec.normalize else src.series
            prov = {"source": tag, "origin": src.id, "file": path.name, "provenance": src.provenance}
            yield SeriesInstance(x.astype(np.float32), src.graph, f"{index:07d}", prov), 0
    finally:
        if pool_ex is not None:
            pool_ex.shutdown(cancel_futures=True)


def save_corpus(items, out_dir, spec_json: dict | None = None, extra: dict | None = None) -> dict:
    """Serialize ``(instance, rejections)`` pairs and write ``manifest.json``.

    Files are named after the instance ids.  Returns the manifest.
    """
    out = Path(out_dir)
    if not out.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {out}")
    entries = []
    rejections = 0
    content = hashlib.sha256()
    for inst, rejected in items:
        name = f"{inst.id}{INSTANCE_SUFFIX}"
        data = write_instance(inst, out / name)
        digest = hashlib.sha256(data).hexdigest()
        content.update(digest.encode())
        rejections += rejected
        if rejected:
            log.info("instance %s: %d unstable draws regenerated", inst.id, rejected)
        entries.append({
            "index": len(entries),
            "file": name,
            "id": inst.id,
            "source": inst.provenance.get("source", SYNTHETIC),
            "seed": inst.provenance.get("seed"),
            "rejections": rejected,
            "num_vars": inst.num_vars,
            "num_edges": inst.graph.num_edges,
            "sha256": digest,
        })
    manifest = {
        "format": "lagcausal-corpus",
        "version": 1,
        "spec": spec_json,
        "count": len(entries),
        "rejections": rejections,
        "instances": entries,
        "content_hash": content.hexdigest(),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def build_corpus(spec: CorpusSpec, out_dir, jobs: int = 1, extra: dict | None = None) -> dict:
    """Generate, serialize and index a corpus; returns the manifest.

    ``extra`` is merged into the manifest (the CLI records its resolved run
    configuration there).  The output does not depend on ``jobs``.
    """
    if not Path(out_dir).is_dir():
        raise FileNotFoundError(f"output directory does not exist: {out_dir}")
    return save_corpus(iter_instances(spec, jobs), out_dir, spec.to_json(), extra)


def example_instance(seed: int = 0, num_steps: int = 500, warmup: int = 100) -> SeriesInstance:
    """Simulated series of the fixed 3-variable linear example (not normalized)."""
    model = example_tscm(seed)
    x = simulate(model, SimConfig(num_steps, warmup))
    return SeriesInstance(x, model.graph, "example", {"source": "example", "seed": seed})


def read_manifest(corpus_dir) -> dict:
    path = Path(corpus_dir) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}: invalid manifest JSON: {exc}") from exc


def read_corpus(corpus_dir) -> list[SeriesInstance]:
    """Load every instance listed in the manifest, checking file digests."""
    corpus_dir = Path(corpus_dir)
    out = []
    for entry in read_manifest(corpus_dir)["instances"]:
        path = corpus_dir / entry["file"]
        if "sha256" in entry and hashlib.sha256(path.read_bytes()).hexdigest() != entry["sha256"]:
            raise CorpusError(f"{path}: digest does not match manifest")
        out.append(read_instance(path))
    return out


def generate(spec: CorpusSpec) -> list[SeriesInstance]:
    """In-memory corpus (no files)."""
    return [inst for inst, _ in iter_instances(spec)]
