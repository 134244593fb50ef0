"""Hierarchical program graphs for pragma-substituted kernels.

A kernel plus a complete pragma config lowers to a typed graph: instruction
nodes (loop headers as phi/cmp/branch, statements as loads/arithmetic/store),
one pragma node per applied pragma attached to its loop's branch, and pseudo
nodes (one per loop, one for the function) that give a two-level hierarchy.
Tiling with factor > 1 splits a loop into two nested header regions, so it
changes topology; other pragma values only change features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

from .kernel import (
    DEFAULT_MAX_FACTOR,
    Access,
    BinOp,
    ConfigError,
    Const,
    Expr,
    Kernel,
    PragmaValue,
    Statement,
    VarRef,
    validate_config,
)
from .latency import ResolvedItem, ResolvedLoop, resolve_nest

NODE_KINDS = (
    "entry",
    "phi",
    "cmp",
    "branch",
    "load",
    "store",
    "add",
    "mul",
    "pragma_pipeline",
    "pragma_tile",
    "pragma_parallel",
    "pseudo",
)
EDGE_KINDS = ("control", "data", "call", "pragma_attach", "hierarchy")

# one-hot kind block, then pipeline-value one-hot (cg, flatten), log-factor,
# normalized depth
FEATURE_DIM = len(NODE_KINDS) + 4
_PIPE_CG = len(NODE_KINDS)
_PIPE_FLATTEN = len(NODE_KINDS) + 1
_FACTOR = len(NODE_KINDS) + 2
_DEPTH = len(NODE_KINDS) + 3

_MAX_RESOLVED_DEPTH = 8  # source depth cap 4, doubled by tile splits


@dataclass
class ProgramGraph:
    kinds: list[str]  # display label per node, index = node id
    features: np.ndarray  # [n_nodes, FEATURE_DIM] float64
    edges: list[tuple[int, int, str]]

    @property
    def n_nodes(self) -> int:
        return len(self.kinds)


def graphs_equal(a: ProgramGraph, b: ProgramGraph) -> bool:
    return (
        a.kinds == b.kinds
        and a.features.shape == b.features.shape
        and bool(np.array_equal(a.features, b.features))
        and a.edges == b.edges
    )


def dump_graph(g: ProgramGraph) -> str:
    """One node per line then one edge per line; stable golden format."""
    out = []
    for i, kind in enumerate(g.kinds):
        feats = " ".join(repr(float(v)) for v in g.features[i])
        out.append(f"node {i} {kind} {feats}")
    for src, dst, kind in g.edges:
        out.append(f"edge {src} {dst} {kind}")
    return "\n".join(out) + "\n"


class _Builder:
    def __init__(self, max_factor: int):
        self.kinds: list[str] = []
        self.features: list[np.ndarray] = []
        self.edges: list[tuple[int, int, str]] = []
        self._edge_seen: set[tuple[int, int, str]] = set()
        self.log_den = max(math.log2(max_factor), 1.0)
        self.prev: int | None = None  # tail of the control chain
        self.first_instr: int | None = None
        self.phi_of: dict[str, int] = {}
        # per-loop pseudo groups as (depth, member ids), preorder
        self.members: list[tuple[int, list[int]] | None] = []

    def node(self, base_kind: str, label: str, depth: int, **extras: float) -> int:
        f = np.zeros(FEATURE_DIM, dtype=np.float64)
        f[NODE_KINDS.index(base_kind)] = 1.0
        f[_DEPTH] = depth / _MAX_RESOLVED_DEPTH
        for col, val in extras.items():
            f[int(col)] = val
        self.kinds.append(label)
        self.features.append(f)
        return len(self.kinds) - 1

    def edge(self, src: int, dst: int, kind: str) -> None:
        e = (src, dst, kind)
        if e not in self._edge_seen:
            self._edge_seen.add(e)
            self.edges.append(e)

    def instr(self, base_kind: str, depth: int, label: str | None = None) -> int:
        nid = self.node(base_kind, label or base_kind, depth)
        if self.prev is not None:
            self.edge(self.prev, nid, "control")
        if self.first_instr is None:
            self.first_instr = nid
        self.prev = nid
        return nid

    # -- statements ---------------------------------------------------------

    def index_edges(self, access: Access, nid: int) -> None:
        for ix in access.indices:
            for _, var in ix.terms:
                phi = self.phi_of.get(var)
                if phi is not None:
                    self.edge(phi, nid, "data")

    def lower_expr(self, e: Expr, depth: int, group: list[int]) -> int | None:
        """Returns the producing node id, or None for constants."""
        if isinstance(e, Const):
            return None
        if isinstance(e, VarRef):
            if e.name in self.phi_of:
                return self.phi_of[e.name]  # induction value used directly
            nid = self.instr("load", depth, f"load {e.name}")
            group.append(nid)
            return nid
        if isinstance(e, Access):
            nid = self.instr("load", depth, f"load {e.name}")
            group.append(nid)
            self.index_edges(e, nid)
            return nid
        assert isinstance(e, BinOp)
        left = self.lower_expr(e.left, depth, group)
        right = self.lower_expr(e.right, depth, group)
        op_kind = "mul" if e.op == "*" else "add"  # '-' lowers as an add unit
        nid = self.instr(op_kind, depth, op_kind)
        group.append(nid)
        for side in (left, right):
            if side is not None:
                self.edge(side, nid, "data")
        return nid

    def lower_statement(self, st: Statement, depth: int, group: list[int]) -> None:
        val = self.lower_expr(st.value, depth, group)
        if st.op == "+=":
            tname = st.target.name
            acc = self.instr("load", depth, f"load {tname}")
            group.append(acc)
            if isinstance(st.target, Access):
                self.index_edges(st.target, acc)
            add = self.instr("add", depth, "add")
            group.append(add)
            self.edge(acc, add, "data")
            if val is not None:
                self.edge(val, add, "data")
            val = add
        store = self.instr("store", depth, f"store {st.target.name}")
        group.append(store)
        if val is not None:
            self.edge(val, store, "data")
        if isinstance(st.target, Access):
            self.index_edges(st.target, store)

    # -- loops --------------------------------------------------------------

    def lower_loop(self, rl: ResolvedLoop) -> None:
        slot = len(self.members)  # reserve now so pseudo order is preorder
        self.members.append(None)
        phi = self.instr("phi", rl.depth, f"phi {rl.var}")
        cmp_ = self.instr("cmp", rl.depth, f"cmp {rl.var}<{rl.trips}")
        branch = self.instr("branch", rl.depth, "branch")
        group = [phi, cmp_, branch]
        for ap in rl.pragmas:
            extras: dict[str, float] = {}
            if ap.kind == "PIPELINE":
                base = "pragma_pipeline"
                extras[str(_PIPE_CG if ap.value == "cg" else _PIPE_FLATTEN)] = 1.0
            else:
                base = "pragma_tile" if ap.kind == "TILE" else "pragma_parallel"
                extras[str(_FACTOR)] = math.log2(int(ap.value)) / self.log_den
            pid = self.node(base, f"pragma {ap.kind}={ap.value}", rl.depth, **extras)
            group.append(pid)
            self.edge(pid, branch, "pragma_attach")
        self.phi_of[rl.var] = phi
        self.lower_body(rl.body, rl.depth, group)
        del self.phi_of[rl.var]
        if self.prev is not None and self.prev != branch:
            self.edge(self.prev, phi, "control")  # backedge from body end
        self.members[slot] = (rl.depth, group)
        self.prev = branch  # successors continue from the loop exit

    def lower_body(
        self, items: Sequence[ResolvedItem], depth: int, group: list[int]
    ) -> None:
        for item in items:
            if isinstance(item, Statement):
                self.lower_statement(item, depth, group)
            else:
                self.lower_loop(item)


def build_graph(
    ast: Kernel,
    config: Mapping[str, PragmaValue],
    max_factor: int = DEFAULT_MAX_FACTOR,
) -> ProgramGraph:
    """Lower (ast, config) to a ProgramGraph; deterministic node order:
    entry, then per resolved loop in preorder its header, pragma nodes, and
    body, then one pseudo node per loop (preorder) and the function pseudo
    last."""
    problems = validate_config(ast, config, max_factor)
    if problems:
        raise ConfigError("; ".join(problems))
    items = resolve_nest(ast, config)
    b = _Builder(max_factor)
    entry = b.node("entry", "entry", 0)
    top_group: list[int] = []
    for item in items:
        if isinstance(item, Statement):
            b.lower_statement(item, 0, top_group)
        else:
            b.lower_loop(item)
    if b.first_instr is not None:
        b.edge(entry, b.first_instr, "call")
    pseudo_ids = []
    for entry_group in b.members:
        assert entry_group is not None
        depth, group = entry_group
        pid = b.node("pseudo", f"pseudo L{depth}", depth)
        pseudo_ids.append(pid)
        for m in group:
            b.edge(pid, m, "hierarchy")
    fn = b.node("pseudo", "pseudo fn", 0)
    b.edge(fn, entry, "hierarchy")
    for m in top_group:
        b.edge(fn, m, "hierarchy")
    for pid in pseudo_ids:
        b.edge(fn, pid, "hierarchy")
    return ProgramGraph(
        kinds=b.kinds, features=np.stack(b.features), edges=b.edges
    )
