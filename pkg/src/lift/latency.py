"""Analytic latency and resource oracle.

A deterministic stand-in for an HLS toolchain: given a kernel AST and a
complete pragma configuration it reports cycle count, abstract resource
units, and validity against a resource budget.  The rules are exact and
documented on `estimate`; they are intentionally simple but reproduce the
central trade-off that aggressive parallelization lowers cycles while
multiplying resource usage until the design stops fitting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Mapping, Union

from .kernel import (
    DEFAULT_MAX_FACTOR,
    AppliedPragma,
    ConfigError,
    Kernel,
    Loop,
    PragmaValue,
    Statement,
    enumerate_space,
    validate_config,
)

DEFAULT_MAX_UNITS = 512


@dataclass(frozen=True)
class ResourceBudget:
    max_units: int = DEFAULT_MAX_UNITS

    def __post_init__(self) -> None:
        if self.max_units < 1:
            raise ValueError("max_units must be >= 1")


@dataclass(frozen=True)
class OracleReport:
    cycles: int
    units: int
    valid: bool


@dataclass(frozen=True)
class ResolvedLoop:
    """One loop after pragma values are applied.

    Tiling with factor t > 1 splits the original loop into an outer loop of
    ceil(N/t) trips (carrying the TILE pragma) over an inner loop of t trips
    (carrying the original PIPELINE/PARALLEL pragmas and body).  A factor of
    1 is the identity and splits nothing.  `pragmas` lists the pragma nodes
    present at this loop; absent pragmas and PIPELINE off produce none.
    """

    label: str
    var: str
    trips: int
    parallel: int
    pipeline: str  # 'off' | 'cg' | 'flatten'
    depth: int
    pragmas: tuple[AppliedPragma, ...]
    body: tuple[Union[Statement, "ResolvedLoop"], ...]

    @property
    def stmts(self) -> tuple[Statement, ...]:
        return tuple(x for x in self.body if isinstance(x, Statement))

    @property
    def children(self) -> tuple["ResolvedLoop", ...]:
        return tuple(x for x in self.body if isinstance(x, ResolvedLoop))


ResolvedItem = Union[Statement, ResolvedLoop]


def _loop_values(loop: Loop, config: Mapping[str, PragmaValue]) -> dict[str, PragmaValue]:
    vals: dict[str, PragmaValue] = {ap.kind: ap.value for ap in loop.applied}
    for sl in loop.slots:
        if sl.id not in config:
            raise ConfigError(f"missing assignment for slot {sl.id}")
        vals[sl.kind] = config[sl.id]
    return vals


def _resolve_loop(
    loop: Loop, config: Mapping[str, PragmaValue], depth: int
) -> ResolvedLoop:
    vals = _loop_values(loop, config)
    tile = vals.get("TILE")
    par = vals.get("PARALLEL")
    pipe = vals.get("PIPELINE", "off")
    if pipe not in ("off", "cg", "flatten"):
        raise ConfigError(f"bad PIPELINE value {pipe!r} on loop {loop.label}")
    for name, f in (("TILE", tile), ("PARALLEL", par)):
        if f is not None and (not isinstance(f, int) or f < 1):
            raise ConfigError(f"bad {name} factor {f!r} on loop {loop.label}")

    split = tile is not None and tile > 1
    body_depth = depth + (2 if split else 1)
    body = tuple(
        _resolve_loop(x, config, body_depth) if isinstance(x, Loop) else x
        for x in loop.body
    )

    inner_pragmas: list[AppliedPragma] = []
    if pipe != "off":
        inner_pragmas.append(AppliedPragma("PIPELINE", pipe))
    if not split and tile is not None:
        inner_pragmas.append(AppliedPragma("TILE", tile))
    if par is not None:
        inner_pragmas.append(AppliedPragma("PARALLEL", par))

    if not split:
        return ResolvedLoop(
            label=loop.label,
            var=loop.var,
            trips=loop.trip_count,
            parallel=par or 1,
            pipeline=pipe,
            depth=depth,
            pragmas=tuple(inner_pragmas),
            body=body,
        )
    inner = ResolvedLoop(
        label=loop.label + ".t",
        var=loop.var,
        trips=tile,
        parallel=par or 1,
        pipeline=pipe,
        depth=depth + 1,
        pragmas=tuple(inner_pragmas),
        body=body,
    )
    return ResolvedLoop(
        label=loop.label,
        var=loop.var + ".o",
        trips=math.ceil(loop.trip_count / tile),
        parallel=1,
        pipeline="off",
        depth=depth,
        pragmas=(AppliedPragma("TILE", tile),),
        body=(inner,),
    )


def resolve_nest(
    ast: Kernel, config: Mapping[str, PragmaValue]
) -> tuple[ResolvedItem, ...]:
    """Apply a complete config to the AST: tile splits performed, pragma
    values attached, source item order preserved."""
    return tuple(
        _resolve_loop(x, config, 1) if isinstance(x, Loop) else x for x in ast.body
    )


def walk_resolved(items: tuple[ResolvedItem, ...]) -> Iterator[ResolvedLoop]:
    """All resolved loops in preorder."""
    for item in items:
        if isinstance(item, ResolvedLoop):
            yield item
            yield from walk_resolved(item.body)


def _effective_trips(rl: ResolvedLoop) -> int:
    return math.ceil(rl.trips / rl.parallel)


def _innermost(rl: ResolvedLoop) -> ResolvedLoop:
    deepest = rl
    for lp in walk_resolved(rl.body):
        if lp.depth > deepest.depth:
            deepest = lp
    return deepest


def _loop_cycles(rl: ResolvedLoop) -> int:
    body = len(rl.stmts) + sum(_loop_cycles(c) for c in rl.children)
    eff = _effective_trips(rl)
    if rl.pipeline == "off":
        return eff * body
    if rl.pipeline == "cg":
        ii = 1 if not rl.children else body
        return body + (eff - 1) * ii
    # flatten: collapse the whole subtree into one loop whose trip count is
    # the product of every effective trip count below; nested pipeline modes
    # (including further flattens) are subsumed.  The innermost loop is the
    # deepest in the subtree, first in preorder on ties.
    total = eff
    for lp in walk_resolved(rl.body):
        total *= _effective_trips(lp)
    inner = _innermost(rl)
    inner_body = len(inner.stmts) + (
        0 if not inner.children else sum(_loop_cycles(c) for c in inner.children)
    )
    return inner_body + (total - 1)


def count_statements(ast: Kernel) -> int:
    def rec(items) -> int:
        n = 0
        for x in items:
            if isinstance(x, Statement):
                n += 1
            else:
                n += rec(x.body)
        return n

    return rec(ast.body)


def estimate(
    ast: Kernel,
    config: Mapping[str, PragmaValue],
    budget: ResourceBudget = ResourceBudget(),
    max_factor: int = DEFAULT_MAX_FACTOR,
) -> OracleReport:
    """Cycle/resource estimate under these exact rules:

    - every statement costs 1 cycle; a loop body costs the sum of its
      statements plus its child loops' cycles
    - TILE t (t > 1) rewrites the loop into ceil(N/t) outer trips over t
      inner trips; PIPELINE/PARALLEL of the original loop move to the inner
    - PARALLEL p divides trips (ceil) and multiplies resources by p
    - PIPELINE off: cycles = trips x body
    - PIPELINE cg: cycles = body + (trips - 1) x II with II = 1 for leaf
      loops and II = body otherwise
    - PIPELINE flatten: one loop of (product of effective trips in the
      subtree) trips; cycles = innermost body + (trips - 1)
    - units = total statement count x product of all parallel factors;
      valid means units <= budget.max_units (cycles reported regardless)
    """
    problems = validate_config(ast, config, max_factor)
    if problems:
        raise ConfigError("; ".join(problems))
    items = resolve_nest(ast, config)
    cycles = sum(1 for x in items if isinstance(x, Statement))
    cycles += sum(_loop_cycles(x) for x in items if isinstance(x, ResolvedLoop))
    units = count_statements(ast)
    for rl in walk_resolved(items):
        units *= rl.parallel
    return OracleReport(cycles=cycles, units=units, valid=units <= budget.max_units)


def best_config(
    ast: Kernel,
    budget: ResourceBudget = ResourceBudget(),
    max_factor: int = DEFAULT_MAX_FACTOR,
    cap: int = 10_000,
) -> tuple[dict[str, PragmaValue], OracleReport] | None:
    """Exhaustive min-cycles valid config (first wins on ties), or None when
    no valid config exists.  Raises SpaceTooLargeError above the cap."""
    best: tuple[dict[str, PragmaValue], OracleReport] | None = None
    for cfg in enumerate_space(ast, max_factor, cap):
        rep = estimate(ast, cfg, budget, max_factor)
        if rep.valid and (best is None or rep.cycles < best[1].cycles):
            best = (cfg, rep)
    return best
