"""Synthetic kernel corpus: generation, on-disk format, and splits.

A corpus is a set of kernels (id -> source text with pragma slots) plus
design points (kernel, concrete config, measured perf, validity).  The
on-disk layout is one directory per kernel holding `kernel.c` and
`points.jsonl`; perf = 0 encodes an invalid design.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernel as km
from . import latency as lat
from .kernel import (
    DEFAULT_MAX_FACTOR,
    Access,
    Affine,
    BinOp,
    Kernel,
    Loop,
    Param,
    PragmaSlot,
    PragmaValue,
    Statement,
    VarRef,
)


@dataclass
class DesignPoint:
    kernel_id: str
    point: dict[str, PragmaValue]
    perf: float
    res_util: dict[str, float]
    valid: bool
    extra: dict = field(default_factory=dict)


@dataclass
class Corpus:
    kernels: dict[str, str]  # kernel_id -> source text
    points: list[DesignPoint]

    def points_for(self, kernel_id: str) -> list[DesignPoint]:
        return [p for p in self.points if p.kernel_id == kernel_id]

    def kernel_ids(self) -> list[str]:
        return sorted(self.kernels)


# ---------------------------------------------------------------------------
# Generation


@dataclass(frozen=True)
class GenParams:
    n_kernels: int = 150
    n_configs: int = 20
    seed: int = 0
    max_factor: int = DEFAULT_MAX_FACTOR
    max_units: int = lat.DEFAULT_MAX_UNITS
    depth_weights: tuple[float, ...] = (0.35, 0.40, 0.25)  # depths 1, 2, 3
    trip_choices: tuple[int, ...] = (16, 32, 64, 128)
    min_stmts: int = 1
    max_stmts: int = 4
    tile_prob: float = 0.5


_LOOP_VARS = ("i", "j", "k")


class _ArrayPool:
    """Reuses array params by dimension signature to keep signatures short."""

    def __init__(self) -> None:
        self.params: list[Param] = []
        self._by_dims: dict[tuple[int, ...], list[str]] = {}

    def get(self, dims: tuple[int, ...], rng: np.random.Generator) -> str:
        names = self._by_dims.setdefault(dims, [])
        # grow the pool lazily; reuse an existing array half the time
        if names and rng.random() < 0.5:
            return str(rng.choice(names))
        name = f"v{len(self.params)}"
        self.params.append(Param(name=name, ctype="double", dims=dims))
        names.append(name)
        return name

    def scalar(self) -> str:
        for p in self.params:
            if not p.dims:
                return p.name
        name = f"v{len(self.params)}"
        self.params.append(Param(name=name, ctype="double", dims=()))
        return name


def _full_index(vars_: tuple[str, ...]) -> tuple[Affine, ...]:
    return tuple(Affine(terms=((1, v),)) for v in vars_)


def _random_statement(
    rng: np.random.Generator,
    pool: _ArrayPool,
    vars_: tuple[str, ...],
    trips: tuple[int, ...],
) -> Statement:
    d = len(vars_)
    full = _full_index(vars_)
    out = pool.get(trips, rng)
    a = pool.get(trips, rng)
    kind = int(rng.integers(0, 4))
    if kind == 0:
        b = pool.get(trips, rng)
        rhs: km.Expr = BinOp("+", Access(a, full), Access(b, full))
        return Statement(Access(out, full), "=", rhs)
    if kind == 1:
        perm = tuple(int(x) for x in rng.permutation(d))
        b_dims = tuple(trips[p] for p in perm)
        b_idx = tuple(full[p] for p in perm)
        b = pool.get(b_dims, rng)
        rhs = BinOp("*", Access(a, full), Access(b, b_idx))
        return Statement(Access(out, full), "+=", rhs)
    if kind == 2:
        s = pool.scalar()
        rhs = BinOp("*", Access(a, full), VarRef(s))
        return Statement(Access(out, full), "=", rhs)
    # reduction over the innermost variable when nested, plain add otherwise
    if d >= 2:
        red_out = pool.get(trips[:-1], rng)
        b = pool.get((trips[-1],), rng)
        rhs = BinOp("*", Access(a, full), Access(b, full[-1:]))
        return Statement(Access(red_out, full[:-1]), "+=", rhs)
    b = pool.get(trips, rng)
    rhs = BinOp("+", Access(a, full), BinOp("+", Access(b, full), km.Const(1)))
    return Statement(Access(out, full), "=", rhs)


def _build_kernel_ast(
    rng: np.random.Generator, kernel_id: str, params: GenParams, force_tile: bool
) -> Kernel:
    depth = 1 + int(rng.choice(len(params.depth_weights), p=params.depth_weights))
    trips = tuple(int(rng.choice(params.trip_choices)) for _ in range(depth))
    n_stmts = int(rng.integers(params.min_stmts, params.max_stmts + 1))
    tile = force_tile or bool(rng.random() < params.tile_prob)
    vars_ = _LOOP_VARS[:depth]

    pool = _ArrayPool()
    stmts = tuple(
        _random_statement(rng, pool, vars_, trips) for _ in range(n_stmts)
    )

    body: tuple[km.BodyItem, ...] = stmts
    for level in range(depth - 1, -1, -1):
        slots = [PragmaSlot(f"__PARA__L{level}", "PARALLEL")]
        if level == 0:
            if tile:
                slots.insert(0, PragmaSlot("__TILE__L0", "TILE"))
            slots.insert(0, PragmaSlot("__PIPE__L0", "PIPELINE"))
        body = (
            Loop(
                label=f"L{level}",
                var=vars_[level],
                trip_count=trips[level],
                slots=tuple(slots),
                applied=(),
                body=body,
            ),
        )
    return Kernel(name=kernel_id, params=tuple(pool.params), body=body)


def _synth_kernel(
    rng: np.random.Generator, kernel_id: str, params: GenParams
) -> tuple[str, Kernel]:
    ast = _build_kernel_ast(rng, kernel_id, params, force_tile=False)
    if km.space_size(ast, params.max_factor) < params.n_configs:
        # shallow single loops can have fewer configs than requested; a tile
        # slot multiplies the space enough without changing the shape draw
        ast = Kernel(
            name=ast.name,
            params=ast.params,
            body=_with_tile_slot(ast.body),
        )
    return km.serialize_kernel(ast), ast


def _with_tile_slot(body: tuple[km.BodyItem, ...]) -> tuple[km.BodyItem, ...]:
    out: list[km.BodyItem] = []
    for item in body:
        if isinstance(item, Loop) and not any(s.kind == "TILE" for s in item.slots):
            slots = list(item.slots)
            pos = 1 if slots and slots[0].kind == "PIPELINE" else 0
            slots.insert(pos, PragmaSlot("__TILE__L0", "TILE"))
            item = Loop(
                label=item.label,
                var=item.var,
                trip_count=item.trip_count,
                slots=tuple(slots),
                applied=item.applied,
                body=item.body,
            )
        out.append(item)
    return tuple(out)


def generate_synthetic(params: GenParams = GenParams()) -> Corpus:
    """Random kernels with pragma slots plus oracle-labeled design points.

    Per kernel: loop chain of depth 1-3, trips from {16, 32, 64, 128}, 1-4
    statements in the innermost body, a PARALLEL slot on every loop, a
    PIPELINE slot on the outermost, and a TILE slot on the outermost with
    probability tile_prob (always when the space would otherwise be smaller
    than n_configs).  Configs are sampled without replacement from the
    enumerated space; perf is oracle cycles for valid designs and 0
    otherwise.  Byte-reproducible from the seed, and each kernel draws from
    its own derived stream so results do not depend on generation order.
    """
    budget = lat.ResourceBudget(params.max_units)
    kernels: dict[str, str] = {}
    points: list[DesignPoint] = []
    streams = np.random.SeedSequence(params.seed).spawn(params.n_kernels)
    for idx in range(params.n_kernels):
        rng = np.random.Generator(np.random.PCG64(streams[idx]))
        kid = f"k{idx:03d}"
        source, ast = _synth_kernel(rng, kid, params)
        kernels[kid] = source
        size = km.space_size(ast, params.max_factor)
        chosen = rng.choice(size, size=min(params.n_configs, size), replace=False)
        for cfg_idx in chosen:
            cfg = km.config_from_index(ast, int(cfg_idx), params.max_factor)
            rep = lat.estimate(ast, cfg, budget, params.max_factor)
            points.append(
                DesignPoint(
                    kernel_id=kid,
                    point=cfg,
                    perf=float(rep.cycles) if rep.valid else 0.0,
                    res_util={"util-logic": round(rep.units / budget.max_units, 6)},
                    valid=rep.valid,
                )
            )
    return Corpus(kernels=kernels, points=points)


# ---------------------------------------------------------------------------
# Persistence


_POINT_KEYS = ("perf", "point", "res_util", "valid")


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """One directory per kernel: kernel.c plus points.jsonl.  Deterministic
    bytes for a given corpus (sorted ids, sorted JSON keys)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for kid in sorted(corpus.kernels):
        kdir = root / kid
        kdir.mkdir(parents=True, exist_ok=True)
        (kdir / "kernel.c").write_text(corpus.kernels[kid])
        lines = []
        for p in corpus.points:
            if p.kernel_id != kid:
                continue
            rec = {
                "perf": p.perf,
                "point": p.point,
                "res_util": p.res_util,
                "valid": p.valid,
                **p.extra,
            }
            lines.append(json.dumps(rec, sort_keys=True))
        (kdir / "points.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))


def _coerce_value(v: object) -> PragmaValue:
    if isinstance(v, str):
        return "off" if v == "" else v
    if isinstance(v, bool):
        raise ValueError(f"bad pragma value {v!r}")
    if isinstance(v, int):
        return v
    if isinstance(v, float) and v.is_integer():
        return int(v)
    raise ValueError(f"bad pragma value {v!r}")


def load_corpus(path: str | Path) -> Corpus:
    """Inverse of save_corpus.  Empty-string pipeline values are read as
    'off'; unknown record keys are preserved round-trip."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory {root} does not exist")
    kernels: dict[str, str] = {}
    points: list[DesignPoint] = []
    for kdir in sorted(p for p in root.iterdir() if p.is_dir()):
        kid = kdir.name
        src_file = kdir / "kernel.c"
        pts_file = kdir / "points.jsonl"
        if not src_file.is_file() or not pts_file.is_file():
            raise FileNotFoundError(f"kernel dir {kdir} missing kernel.c/points.jsonl")
        kernels[kid] = src_file.read_text()
        for lineno, line in enumerate(pts_file.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{pts_file}:{lineno}: bad JSON: {exc}") from None
            missing = [k for k in _POINT_KEYS if k not in rec]
            if missing:
                raise ValueError(f"{pts_file}:{lineno}: missing keys {missing}")
            point = {k: _coerce_value(v) for k, v in rec["point"].items()}
            points.append(
                DesignPoint(
                    kernel_id=kid,
                    point=point,
                    perf=float(rec["perf"]),
                    res_util={k: float(v) for k, v in rec["res_util"].items()},
                    valid=bool(rec["valid"]),
                    extra={k: v for k, v in rec.items() if k not in _POINT_KEYS},
                )
            )
    return Corpus(kernels=kernels, points=points)


# ---------------------------------------------------------------------------
# Splitting


def split_corpus(
    corpus: Corpus,
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15),
    seed: int = 0,
) -> dict[str, Corpus]:
    """Partition by kernel into train/validation/test.

    Bucket sizes are floor(fraction * n) with the remainder distributed one
    kernel at a time in bucket order.  The kernel permutation is seeded, so
    equal inputs give equal splits.
    """
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be non-negative and sum to 1")
    ids = sorted(corpus.kernels)
    n_buckets = sum(1 for f in fractions if f > 0)
    if len(ids) < n_buckets:
        raise ValueError(
            f"fewer kernels ({len(ids)}) than buckets ({n_buckets})"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    order = [ids[int(t)] for t in rng.permutation(len(ids))]
    counts = [int(math.floor(f * len(ids))) for f in fractions]
    rem = len(ids) - sum(counts)
    for b in range(len(counts)):
        if rem == 0:
            break
        counts[b] += 1
        rem -= 1
    out: dict[str, Corpus] = {}
    start = 0
    for name, cnt in zip(("train", "validation", "test"), counts):
        chosen = set(order[start : start + cnt])
        start += cnt
        out[name] = Corpus(
            kernels={k: corpus.kernels[k] for k in sorted(chosen)},
            points=[p for p in corpus.points if p.kernel_id in chosen],
        )
    return out
