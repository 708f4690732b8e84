"""Random program sampling and deduplicated synthetic dataset generation."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .formats import read_programs, read_rasters, write_programs, write_rasters
from .lang import BoolOp, CSGError, GrammarConfig, Primitive, Program, format_program
from .render import ExecStack

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

# Program counts per length from the reference synthetic dataset.
REFERENCE_2D = {
    "train": {3: 25_000, 5: 100_000, 7: 150_000, 9: 250_000, 11: 350_000, 13: 350_000},
    "val": {3: 5_000, 5: 10_000, 7: 20_000, 9: 20_000, 11: 20_000, 13: 20_000},
    "test": {3: 5_000, 5: 50_000, 7: 50_000, 9: 50_000, 11: 100_000, 13: 100_000},
}
REFERENCE_3D = {
    "train": {3: 100_000, 5: 200_000, 7: 400_000},
    "val": {3: 10_000, 5: 20_000, 7: 40_000},
    "test": {3: 20_000, 5: 40_000, 7: 80_000},
}


class CapacityError(CSGError):
    pass


@dataclass
class DatasetSpec:
    counts: dict  # split -> {length: count}
    seed: int = 0
    grammar: GrammarConfig = field(default_factory=GrammarConfig)
    # drop programs whose result, or any intermediate result, is empty
    reject_degenerate: bool = True

    def __post_init__(self):
        for split, per_len in self.counts.items():
            if split not in SPLITS:
                raise ValueError(f"unknown split {split!r}")
            for length, n in per_len.items():
                if length % 2 == 0 or length < 1:
                    raise ValueError(f"program lengths must be odd and positive, got {length}")
                if length > self.grammar.max_length:
                    raise ValueError(f"length {length} exceeds max_length {self.grammar.max_length}")
                if n < 0:
                    raise ValueError("counts must be nonnegative")

    def total(self, length: int) -> int:
        return sum(per.get(length, 0) for per in self.counts.values())

    @property
    def lengths(self) -> list[int]:
        return sorted({length for per in self.counts.values() for length in per})


def preset(name: str, dim: int = 2, seed: int = 0, grammar: GrammarConfig | None = None) -> DatasetSpec:
    """``full`` (full table sizes), ``small`` (1%) or ``tiny``."""
    base = REFERENCE_2D if dim == 2 else REFERENCE_3D
    scale = {"full": 1.0, "small": 0.01, "tiny": 0.001}.get(name)
    if scale is None:
        raise ValueError(f"unknown preset {name!r}")
    counts = {s: {length: max(1, int(round(n * scale))) for length, n in per.items()}
              for s, per in base.items()}
    return DatasetSpec(counts, seed, grammar or GrammarConfig(dim=dim))


def _draw_primitive(rng: np.random.Generator, config: GrammarConfig) -> Primitive:
    kind = config.primitive_kinds[rng.integers(len(config.primitive_kinds))]
    L, R, H = config.location_grid, config.radius_grid, config.height_grid
    loc = tuple(int(L[rng.integers(len(L))]) for _ in range(config.dim))
    params = loc + (int(R[rng.integers(len(R))]),)
    if kind == "cylinder":
        params += (int(H[rng.integers(len(H))]),)
    return Primitive(kind, params)


def sample_program(length: int, rng: np.random.Generator, config: GrammarConfig) -> Program:
    """Random valid postfix program with exactly ``length`` instructions.

    At each position the class (primitive or op) is chosen uniformly among
    those that keep the program completable; the primitive kind, every
    parameter and the op kind are then drawn uniformly.
    """
    if length % 2 == 0 or length < 1 or length > config.max_length:
        raise ValueError(f"length must be odd and in [1, {config.max_length}], got {length}")
    n_prims = (length + 1) // 2
    n_ops = n_prims - 1
    used_p = used_o = 0
    out = []
    for _ in range(length):
        depth = used_p - used_o
        can_push = used_p < n_prims
        can_op = depth >= 2 and used_o < n_ops
        if can_push and can_op:
            push = rng.integers(2) == 0
        else:
            push = can_push
        if push:
            out.append(_draw_primitive(rng, config))
            used_p += 1
        else:
            out.append(BoolOp(config.op_kinds[rng.integers(len(config.op_kinds))]))
            used_o += 1
    return Program(tuple(out))


def count_programs(length: int, config: GrammarConfig) -> int:
    """Number of distinct valid programs of a given length (before any
    rendering-based filtering): Catalan(p-1) tree shapes times leaf and op
    choices."""
    p = (length + 1) // 2
    shapes = math.comb(2 * (p - 1), p - 1) // p
    n_prims = 0
    for k in config.primitive_kinds:
        n = len(config.location_grid) ** config.dim * len(config.radius_grid)
        if k == "cylinder":
            n *= len(config.height_grid)
        n_prims += n
    return shapes * n_prims ** p * len(config.op_kinds) ** (p - 1)


def _degenerate(p: Program, config: GrammarConfig):
    stack = ExecStack(config)
    for ins in p.body:
        stack.push(ins)
        if isinstance(ins, BoolOp) and not stack.top.any():
            return True, None
    return False, stack.top


def _record_rng(seed: int, split: int, length: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng([seed, split, length, attempt])


def _candidate(args):
    seed, split_idx, length, attempt, config, reject = args
    p = sample_program(length, _record_rng(seed, split_idx, length, attempt), config)
    bad, raster = _degenerate(p, config)
    if reject and bad:
        return None
    return p, raster


@dataclass
class Dataset:
    programs: dict  # split -> {length: [Program]}
    rasters: dict  # split -> {length: [ndarray]}

    def records(self, split: str):
        for length in sorted(self.programs.get(split, {})):
            for p, r in zip(self.programs[split][length], self.rasters[split][length]):
                yield p, r


def sample_dataset(spec: DatasetSpec, jobs: int = 1, block: int = 256, max_stall: int = 50) -> Dataset:
    """Rejection-sample every requested program; no canonical program text
    repeats anywhere in the dataset.  Deterministic given the seed, whatever
    ``jobs`` is."""
    config = spec.grammar
    for length in spec.lengths:
        cap = count_programs(length, config)
        if spec.total(length) > cap:
            raise CapacityError(f"{spec.total(length)} programs of length {length} requested, only {cap} exist")
    seen: set[str] = set()
    programs = {s: {} for s in spec.counts}
    rasters = {s: {} for s in spec.counts}
    pool = ProcessPoolExecutor(jobs) if jobs > 1 else None
    try:
        for split in SPLITS:
            if split not in spec.counts:
                continue
            split_idx = SPLITS.index(split)
            for length in sorted(spec.counts[split]):
                want = spec.counts[split][length]
                got_p, got_r = [], []
                attempt = 0
                stall = 0
                while len(got_p) < want:
                    args = [(spec.seed, split_idx, length, a, config, spec.reject_degenerate)
                            for a in range(attempt, attempt + block)]
                    attempt += block
                    results = list(pool.map(_candidate, args, chunksize=16)) if pool else map(_candidate, args)
                    before = len(got_p)
                    for res in results:
                        if res is None:
                            continue
                        p, r = res
                        key = format_program(p)
                        if key in seen:
                            continue
                        seen.add(key)
                        got_p.append(p)
                        got_r.append(r)
                        if len(got_p) == want:
                            break
                    stall = stall + 1 if len(got_p) == before else 0
                    if stall >= max_stall:
                        raise CapacityError(
                            f"could not find {want} distinct usable programs of length {length} "
                            f"for split {split} (found {len(got_p)})")
                programs[split][length] = got_p
                rasters[split][length] = got_r
    finally:
        if pool:
            pool.shutdown()
    return Dataset(programs, rasters)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def generate_dataset(spec: DatasetSpec, root, jobs: int = 1, with_rasters: bool = True) -> dict:
    """Sample and write a dataset under ``root``; return the manifest.

    Layout: ``<root>/<split>/programs_len<L>.csg`` and, optionally,
    ``<root>/<split>/rasters_len<L>.bin`` (packed bits), plus
    ``<root>/manifest.json`` and ``<root>/grammar.cfg``.
    """
    root = Path(root)
    ds = sample_dataset(spec, jobs=jobs)
    root.mkdir(parents=True, exist_ok=True)
    files = {}
    (root / "grammar.cfg").write_text(spec.grammar.to_text())
    for split, per_len in ds.programs.items():
        d = root / split
        d.mkdir(exist_ok=True)
        for length, progs in sorted(per_len.items()):
            f = d / f"programs_len{length}.csg"
            write_programs(f, progs)
            files[str(f.relative_to(root))] = _sha256(f)
            if with_rasters and progs:
                rf = d / f"rasters_len{length}.bin"
                write_rasters(rf, ds.rasters[split][length])
                files[str(rf.relative_to(root))] = _sha256(rf)
    cfg_text = spec.grammar.to_text()
    manifest = {
        "seed": spec.seed,
        "config": cfg_text,
        "config_hash": hashlib.sha256(cfg_text.encode()).hexdigest(),
        "reject_degenerate": spec.reject_degenerate,
        "counts": {s: {str(k): len(v) for k, v in sorted(per.items())} for s, per in ds.programs.items()},
        "files": dict(sorted(files.items())),
    }
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    (root / "manifest.json").write_text(text)
    log.info("wrote %d files under %s", len(files), root)
    return manifest


def manifest_hash(root) -> str:
    return _sha256(Path(root) / "manifest.json")


def load_dataset(root, split: str, config: GrammarConfig | None = None, lengths=None):
    """Return ``(programs, rasters)`` for one split.  Rasters are re-rendered
    when no raster file is present."""
    from .render import render

    root = Path(root)
    if config is None:
        cfg_file = root / "grammar.cfg"
        config = GrammarConfig.from_text(cfg_file.read_text()) if cfg_file.exists() else GrammarConfig()
    progs, rasts = [], []
    for f in sorted((root / split).glob("programs_len*.csg"), key=lambda f: int(f.stem.split("len")[1])):
        length = int(f.stem.split("len")[1])
        if lengths is not None and length not in lengths:
            continue
        ps = read_programs(f, config)
        rf = f.with_name(f"rasters_len{length}.bin")
        rs = read_rasters(rf) if rf.exists() else [render(p, config) for p in ps]
        progs += ps
        rasts += rs
    return progs, rasts
