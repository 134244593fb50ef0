"""Parser, serializer, and pragma-slot utilities for the kernel C dialect.

The dialect is deliberately small: one void function, constant-bound
counted loops nested up to depth 4, and assignment/accumulation statements
over affine array accesses.  Pragma lines sit immediately before a loop
and are either slots (``auto{__PARA__L2}``) or concrete values.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence, Union

DEFAULT_MAX_FACTOR = 64
DEFAULT_SPACE_CAP = 100_000

PIPELINE_VALUES = ("off", "cg", "flatten")
MAX_LOOP_DEPTH = 4

PragmaValue = Union[int, str]

SLOT_ID_RE = re.compile(r"__(PIPE|PARA|TILE)__L\d+")
_ID_PREFIX = {"PIPELINE": "PIPE", "PARALLEL": "PARA", "TILE": "TILE"}


class KernelError(Exception):
    """Base class for kernel-text and pragma-config errors."""


class KernelSyntaxError(KernelError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{message} (line {line}, col {col})")
        self.line = line
        self.col = col


class ConfigError(KernelError):
    """A pragma assignment is missing, unknown, or out of domain."""


class SpaceTooLargeError(KernelError):
    """Raised by enumerate_space when the product of domains exceeds the cap."""


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Param:
    name: str
    ctype: str
    dims: tuple[int, ...] = ()


@dataclass(frozen=True)
class Affine:
    """Linear index expression: sum of coef*var terms plus a constant."""

    terms: tuple[tuple[int, str], ...] = ()
    const: int = 0

    def variables(self) -> set[str]:
        return {v for _, v in self.terms}


@dataclass(frozen=True)
class Const:
    value: int


@dataclass(frozen=True)
class VarRef:
    name: str


@dataclass(frozen=True)
class Access:
    name: str
    indices: tuple[Affine, ...]


@dataclass(frozen=True)
class BinOp:
    op: str  # '+', '-', '*'
    left: "Expr"
    right: "Expr"


Expr = Union[Const, VarRef, Access, BinOp]


@dataclass(frozen=True)
class Statement:
    target: Union[VarRef, Access]
    op: str  # '=' or '+='
    value: Expr


@dataclass(frozen=True)
class PragmaSlot:
    id: str
    kind: str  # 'PIPELINE' | 'PARALLEL' | 'TILE'


@dataclass(frozen=True)
class AppliedPragma:
    kind: str
    value: PragmaValue


@dataclass(frozen=True)
class Loop:
    label: str
    var: str
    trip_count: int
    slots: tuple[PragmaSlot, ...] = ()
    applied: tuple[AppliedPragma, ...] = ()
    body: tuple[Union[Statement, "Loop"], ...] = ()


BodyItem = Union[Statement, Loop]


@dataclass(frozen=True)
class Kernel:
    name: str
    params: tuple[Param, ...]
    body: tuple[BodyItem, ...]


# ---------------------------------------------------------------------------
# Pragma line recognition (shared by the lexer and textual substitution)


@dataclass(frozen=True)
class PragmaLine:
    kind: str
    slot_id: str | None  # None when the line carries a concrete value
    value: PragmaValue | None


_PRAGMA_HEAD_RE = re.compile(r"\s*#pragma\s+ACCEL\s+(PIPELINE|PARALLEL|TILE)\s+(.*?)\s*$")
_AUTO_RE = re.compile(r"auto\{([^}]*)\}$")


def parse_pragma_line(text: str) -> PragmaLine | None:
    """Parse one source line as a pragma, or return None if it is not one.

    Malformed pragma lines (anything starting with '#' that does not match
    the dialect) raise KernelError so typos never pass silently.
    """
    if not text.lstrip().startswith("#"):
        return None
    m = _PRAGMA_HEAD_RE.match(text)
    if m is None:
        raise KernelError(f"malformed pragma line: {text.strip()!r}")
    kind, rest = m.group(1), m.group(2)
    if kind in ("PARALLEL", "TILE"):
        if not rest.startswith("FACTOR="):
            raise KernelError(f"{kind} pragma requires FACTOR=: {text.strip()!r}")
        rest = rest[len("FACTOR=") :]
    auto = _AUTO_RE.match(rest)
    if auto is not None:
        slot_id = auto.group(1)
        full = SLOT_ID_RE.fullmatch(slot_id)
        if full is None:
            raise KernelError(f"bad slot id {slot_id!r} in pragma: {text.strip()!r}")
        if full.group(1) != _ID_PREFIX[kind]:
            raise KernelError(
                f"slot id {slot_id!r} does not match pragma kind {kind}"
            )
        return PragmaLine(kind=kind, slot_id=slot_id, value=None)
    if kind == "PIPELINE":
        if rest not in ("cg", "flatten"):
            raise KernelError(f"bad PIPELINE value {rest!r}: {text.strip()!r}")
        return PragmaLine(kind=kind, slot_id=None, value=rest)
    if not rest.isdigit() or int(rest) < 1:
        raise KernelError(f"bad {kind} factor {rest!r}: {text.strip()!r}")
    return PragmaLine(kind=kind, slot_id=None, value=int(rest))


# ---------------------------------------------------------------------------
# Lexer


@dataclass(frozen=True)
class _Tok:
    kind: str  # 'name' | 'int' | 'punct' | 'pragma' | 'eof'
    text: str
    line: int
    col: int
    pragma: PragmaLine | None = None


_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z_0-9]*")
_INT_RE = re.compile(r"[0-9]+")
_PUNCTS = ("+=", "++", "(", ")", "[", "]", "{", "}", ";", ",", "=", "<", "+", "-", "*")


def _lex(source: str) -> list[_Tok]:
    toks: list[_Tok] = []
    i, line, line_start = 0, 1, 0
    n = len(source)
    while i < n:
        ch = source[i]
        if ch == "\n":
            i += 1
            line += 1
            line_start = i
            continue
        if ch in " \t\r":
            i += 1
            continue
        col = i - line_start + 1
        if ch == "#":
            if source[line_start:i].strip():
                raise KernelSyntaxError("pragma must start its own line", line, col)
            end = source.find("\n", i)
            end = n if end < 0 else end
            try:
                pl = parse_pragma_line(source[i:end])
            except KernelError as exc:
                raise KernelSyntaxError(str(exc), line, col) from None
            toks.append(_Tok("pragma", source[i:end], line, col, pragma=pl))
            i = end
            continue
        m = _NAME_RE.match(source, i)
        if m:
            toks.append(_Tok("name", m.group(), line, col))
            i = m.end()
            continue
        m = _INT_RE.match(source, i)
        if m:
            toks.append(_Tok("int", m.group(), line, col))
            i = m.end()
            continue
        for p in _PUNCTS:
            if source.startswith(p, i):
                toks.append(_Tok("punct", p, line, col))
                i += len(p)
                break
        else:
            raise KernelSyntaxError(f"unexpected character {ch!r}", line, col)
    toks.append(_Tok("eof", "", line, (n - line_start) + 1))
    return toks


# ---------------------------------------------------------------------------
# Parser


class _Parser:
    def __init__(self, source: str):
        self.toks = _lex(source)
        self.pos = 0
        self.params: dict[str, Param] = {}
        self.loop_vars: list[str] = []
        self.loop_counter = 0
        self.slot_ids: set[str] = set()

    def peek(self) -> _Tok:
        return self.toks[self.pos]

    def next(self) -> _Tok:
        t = self.toks[self.pos]
        self.pos += 1
        return t

    def fail(self, message: str, tok: _Tok | None = None) -> None:
        tok = tok or self.peek()
        raise KernelSyntaxError(message, tok.line, tok.col)

    def expect(self, kind: str, text: str | None = None) -> _Tok:
        t = self.peek()
        if t.kind != kind or (text is not None and t.text != text):
            want = text if text is not None else kind
            self.fail(f"expected {want!r}, got {t.text!r}")
        return self.next()

    # -- grammar productions ------------------------------------------------

    def parse(self) -> Kernel:
        self.expect("name", "void")
        name = self.expect("name").text
        self.expect("punct", "(")
        params = [self.param()]
        while self.peek().text == ",":
            self.next()
            params.append(self.param())
        self.expect("punct", ")")
        self.expect("punct", "{")
        body = self.body(depth=0)
        self.expect("punct", "}")
        self.expect("eof")
        return Kernel(name=name, params=tuple(params), body=body)

    def param(self) -> Param:
        ctype_tok = self.expect("name")
        if ctype_tok.text not in ("double", "float", "int"):
            self.fail(f"unknown parameter type {ctype_tok.text!r}", ctype_tok)
        name_tok = self.expect("name")
        if name_tok.text in self.params:
            self.fail(f"duplicate parameter {name_tok.text!r}", name_tok)
        dims = []
        while self.peek().text == "[":
            self.next()
            d = self.expect("int")
            if int(d.text) < 1:
                self.fail("array dimension must be >= 1", d)
            dims.append(int(d.text))
            self.expect("punct", "]")
        p = Param(name=name_tok.text, ctype=ctype_tok.text, dims=tuple(dims))
        self.params[p.name] = p
        return p

    def body(self, depth: int) -> tuple[BodyItem, ...]:
        items: list[BodyItem] = []
        while self.peek().text != "}" and self.peek().kind != "eof":
            items.append(self.item(depth))
        if not items:
            self.fail("empty body")
        return tuple(items)

    def item(self, depth: int) -> BodyItem:
        slots: list[PragmaSlot] = []
        applied: list[AppliedPragma] = []
        seen_kinds: set[str] = set()
        while self.peek().kind == "pragma":
            t = self.next()
            pl = t.pragma
            assert pl is not None
            if pl.kind in seen_kinds:
                self.fail(f"duplicate {pl.kind} pragma on one loop", t)
            seen_kinds.add(pl.kind)
            if pl.slot_id is not None:
                if pl.slot_id in self.slot_ids:
                    self.fail(f"duplicate slot id {pl.slot_id!r}", t)
                self.slot_ids.add(pl.slot_id)
                slots.append(PragmaSlot(id=pl.slot_id, kind=pl.kind))
            else:
                assert pl.value is not None
                applied.append(AppliedPragma(kind=pl.kind, value=pl.value))
        if slots or applied:
            if self.peek().text != "for":
                self.fail("pragma must be immediately followed by a for loop")
        if self.peek().text == "for":
            return self.loop(depth, tuple(slots), tuple(applied))
        return self.statement()

    def loop(
        self,
        depth: int,
        slots: tuple[PragmaSlot, ...],
        applied: tuple[AppliedPragma, ...],
    ) -> Loop:
        if depth + 1 > MAX_LOOP_DEPTH:
            self.fail(f"loop nesting exceeds depth {MAX_LOOP_DEPTH}")
        self.expect("name", "for")
        self.expect("punct", "(")
        self.expect("name", "int")
        var_tok = self.expect("name")
        var = var_tok.text
        if var in self.params or var in self.loop_vars:
            self.fail(f"loop variable {var!r} shadows another name", var_tok)
        self.expect("punct", "=")
        lo = self.expect("int")
        if int(lo.text) != 0:
            self.fail("loop lower bound must be 0", lo)
        self.expect("punct", ";")
        self.expect("name", var)
        self.expect("punct", "<")
        trip_tok = self.expect("int")
        trip = int(trip_tok.text)
        if trip < 1:
            self.fail("trip count must be >= 1", trip_tok)
        self.expect("punct", ";")
        self.expect("name", var)
        self.expect("punct", "++")
        self.expect("punct", ")")
        self.expect("punct", "{")
        label = f"L{self.loop_counter}"
        self.loop_counter += 1
        self.loop_vars.append(var)
        body = self.body(depth + 1)
        self.loop_vars.pop()
        self.expect("punct", "}")
        return Loop(
            label=label,
            var=var,
            trip_count=trip,
            slots=slots,
            applied=applied,
            body=body,
        )

    def statement(self) -> Statement:
        target = self.lvalue()
        op_tok = self.peek()
        if op_tok.text not in ("=", "+="):
            self.fail("expected '=' or '+='")
        self.next()
        value = self.expr()
        self.expect("punct", ";")
        return Statement(target=target, op=op_tok.text, value=value)

    def lvalue(self) -> Union[VarRef, Access]:
        tok = self.expect("name")
        node = self.name_ref(tok)
        if isinstance(node, Const) or (
            isinstance(node, VarRef) and node.name in self.loop_vars
        ):
            self.fail(f"cannot assign to {tok.text!r}", tok)
        return node

    def name_ref(self, tok: _Tok) -> Union[VarRef, Access]:
        name = tok.text
        indices: list[Affine] = []
        while self.peek().text == "[":
            self.next()
            indices.append(self.affine())
            self.expect("punct", "]")
        if name in self.loop_vars:
            if indices:
                self.fail(f"loop variable {name!r} is not an array", tok)
            return VarRef(name)
        p = self.params.get(name)
        if p is None:
            self.fail(f"unknown variable {name!r}", tok)
        if len(indices) != len(p.dims):
            self.fail(
                f"{name!r} has {len(p.dims)} dimension(s), got {len(indices)} index(es)",
                tok,
            )
        if indices:
            return Access(name=name, indices=tuple(indices))
        return VarRef(name)

    def expr(self) -> Expr:
        node = self.term()
        while self.peek().text in ("+", "-"):
            op = self.next().text
            node = BinOp(op=op, left=node, right=self.term())
        return node

    def term(self) -> Expr:
        node = self.atom()
        while self.peek().text == "*":
            self.next()
            node = BinOp(op="*", left=node, right=self.atom())
        return node

    def atom(self) -> Expr:
        t = self.peek()
        if t.kind == "int":
            self.next()
            return Const(int(t.text))
        if t.kind == "name":
            self.next()
            return self.name_ref(t)
        self.fail(f"expected operand, got {t.text!r}")
        raise AssertionError  # unreachable

    def affine(self) -> Affine:
        terms: list[tuple[int, str]] = []
        const = 0
        sign = 1
        if self.peek().text == "-":
            self.next()
            sign = -1
        while True:
            coef, var = self.affine_term()
            if var is None:
                const += sign * coef
            else:
                if var not in self.loop_vars:
                    self.fail(f"index uses non-loop variable {var!r}")
                terms.append((sign * coef, var))
            nxt = self.peek().text
            if nxt == "+":
                self.next()
                sign = 1
            elif nxt == "-":
                self.next()
                sign = -1
            else:
                break
        return Affine(terms=tuple(terms), const=const)

    def affine_term(self) -> tuple[int, str | None]:
        t = self.peek()
        if t.kind == "int":
            self.next()
            coef = int(t.text)
            if self.peek().text == "*":
                self.next()
                var = self.expect("name").text
                return coef, var
            return coef, None
        if t.kind == "name":
            self.next()
            return 1, t.text
        self.fail(f"expected index term, got {t.text!r}")
        raise AssertionError  # unreachable


def parse_kernel(source: str) -> Kernel:
    """Parse kernel source into an AST, raising KernelSyntaxError on any
    departure from the dialect."""
    return _Parser(source).parse()


# ---------------------------------------------------------------------------
# Serializer


def _fmt_affine(a: Affine) -> str:
    parts: list[str] = []
    for coef, var in a.terms:
        mag = var if abs(coef) == 1 else f"{abs(coef)}*{var}"
        if not parts:
            parts.append(mag if coef > 0 else "-" + mag)
        else:
            parts.append(("+ " if coef > 0 else "- ") + mag)
    if a.const != 0 or not parts:
        if not parts:
            parts.append(str(a.const))
        else:
            parts.append(("+ " if a.const > 0 else "- ") + str(abs(a.const)))
    return " ".join(parts)


def _fmt_expr(e: Expr, parent_op: str | None = None) -> str:
    if isinstance(e, Const):
        return str(e.value)
    if isinstance(e, VarRef):
        return e.name
    if isinstance(e, Access):
        return e.name + "".join(f"[{_fmt_affine(ix)}]" for ix in e.indices)
    if isinstance(e, BinOp):
        return f"{_fmt_expr(e.left, e.op)} {e.op} {_fmt_expr(e.right, e.op)}"
    raise TypeError(f"not an expression: {e!r}")


def _fmt_pragma(kind: str, slot_id: str | None, value: PragmaValue | None) -> str:
    if slot_id is not None:
        payload = f"auto{{{slot_id}}}"
    else:
        payload = str(value)
    if kind == "PIPELINE":
        return f"#pragma ACCEL PIPELINE {payload}"
    return f"#pragma ACCEL {kind} FACTOR={payload}"


def _serialize_items(items: Sequence[BodyItem], depth: int, out: list[str]) -> None:
    pad = "  " * depth
    for item in items:
        if isinstance(item, Statement):
            lhs = _fmt_expr(item.target)
            out.append(f"{pad}{lhs} {item.op} {_fmt_expr(item.value)};")
        else:
            for sl in item.slots:
                out.append(pad + _fmt_pragma(sl.kind, sl.id, None))
            for ap in item.applied:
                out.append(pad + _fmt_pragma(ap.kind, None, ap.value))
            out.append(
                f"{pad}for (int {item.var} = 0; {item.var} < {item.trip_count}; "
                f"{item.var}++) {{"
            )
            _serialize_items(item.body, depth + 1, out)
            out.append(pad + "}")


def serialize_kernel(ast: Kernel) -> str:
    """Render an AST back to canonical source text.

    parse_kernel(serialize_kernel(a)) == a for every valid AST.
    """
    sig = ", ".join(
        p.ctype + " " + p.name + "".join(f"[{d}]" for d in p.dims) for p in ast.params
    )
    out = [f"void {ast.name}({sig}) {{"]
    _serialize_items(ast.body, 1, out)
    out.append("}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Slot and loop utilities


def walk_loops(ast: Kernel) -> Iterator[tuple[Loop, int]]:
    """Yield (loop, depth) in preorder; depth of outermost loops is 1."""

    def rec(items: Sequence[BodyItem], depth: int) -> Iterator[tuple[Loop, int]]:
        for item in items:
            if isinstance(item, Loop):
                yield item, depth
                yield from rec(item.body, depth + 1)

    yield from rec(ast.body, 1)


def extract_slots(ast: Kernel) -> list[PragmaSlot]:
    """All pragma slots in source (preorder) order."""
    out: list[PragmaSlot] = []
    for loop, _ in walk_loops(ast):
        out.extend(loop.slots)
    return out


def slot_loops(ast: Kernel) -> dict[str, Loop]:
    """Map slot id -> the loop the slot is attached to (insertion ordered)."""
    out: dict[str, Loop] = {}
    for loop, _ in walk_loops(ast):
        for sl in loop.slots:
            out[sl.id] = loop
    return out


def factor_domain(trip_count: int, max_factor: int = DEFAULT_MAX_FACTOR) -> list[int]:
    """Powers of two up to min(trip_count, max_factor) dividing the trip
    count, plus the trip count itself, ascending."""
    dom = {trip_count}
    p = 1
    while p <= min(trip_count, max_factor):
        if trip_count % p == 0:
            dom.add(p)
        p *= 2
    return sorted(dom)


def slot_domains(
    ast: Kernel, max_factor: int = DEFAULT_MAX_FACTOR
) -> dict[str, tuple[PragmaValue, ...]]:
    """Per-slot value domains in slot order."""
    out: dict[str, tuple[PragmaValue, ...]] = {}
    for sl_id, loop in slot_loops(ast).items():
        kind = next(sl.kind for sl in loop.slots if sl.id == sl_id)
        if kind == "PIPELINE":
            out[sl_id] = PIPELINE_VALUES
        else:
            out[sl_id] = tuple(factor_domain(loop.trip_count, max_factor))
    return out


def validate_config(
    ast: Kernel,
    config: Mapping[str, PragmaValue],
    max_factor: int = DEFAULT_MAX_FACTOR,
) -> list[str]:
    """Return a list of violations; empty means the config is complete and
    every value is in its slot's domain."""
    domains = slot_domains(ast, max_factor)
    problems = []
    for sl_id, dom in domains.items():
        if sl_id not in config:
            problems.append(f"missing assignment for slot {sl_id}")
        elif config[sl_id] not in dom:
            problems.append(
                f"value {config[sl_id]!r} for slot {sl_id} not in domain {list(dom)}"
            )
    for key in config:
        if key not in domains:
            problems.append(f"unknown slot {key}")
    return problems


def space_size(ast: Kernel, max_factor: int = DEFAULT_MAX_FACTOR) -> int:
    n = 1
    for dom in slot_domains(ast, max_factor).values():
        n *= len(dom)
    return n


def enumerate_space(
    ast: Kernel,
    max_factor: int = DEFAULT_MAX_FACTOR,
    cap: int = DEFAULT_SPACE_CAP,
) -> list[dict[str, PragmaValue]]:
    """All complete configs in deterministic order: slots in source order,
    per-slot domain order, last slot varying fastest."""
    size = space_size(ast, max_factor)
    if size > cap:
        raise SpaceTooLargeError(f"space-too-large: {size} configs exceeds cap {cap}")
    domains = slot_domains(ast, max_factor)
    keys = list(domains)
    return [
        dict(zip(keys, combo)) for combo in itertools.product(*domains.values())
    ]


def config_from_index(
    ast: Kernel, index: int, max_factor: int = DEFAULT_MAX_FACTOR
) -> dict[str, PragmaValue]:
    """The index-th config of enumerate_space without materializing the list."""
    domains = slot_domains(ast, max_factor)
    sizes = [len(d) for d in domains.values()]
    total = 1
    for s in sizes:
        total *= s
    if not 0 <= index < total:
        raise IndexError(f"config index {index} out of range [0, {total})")
    out: dict[str, PragmaValue] = {}
    for key, dom in reversed(list(domains.items())):
        out[key] = dom[index % len(dom)]
        index //= len(dom)
    return {k: out[k] for k in domains}


# ---------------------------------------------------------------------------
# Textual substitution


def substitute(
    source: str,
    config: Mapping[str, PragmaValue],
    max_factor: int = DEFAULT_MAX_FACTOR,
) -> str:
    """Replace every pragma slot in the source with the configured value.

    PIPELINE 'off' deletes the pragma line entirely.  All non-pragma text is
    preserved byte for byte.  The config must cover every slot exactly and
    stay inside each slot's domain.
    """
    ast = parse_kernel(source)
    problems = validate_config(ast, config, max_factor)
    if problems:
        raise ConfigError("; ".join(problems))
    out_lines: list[str] = []
    for raw in source.splitlines(keepends=True):
        stripped = raw.rstrip("\r\n")
        ending = raw[len(stripped) :]
        try:
            pl = parse_pragma_line(stripped) if stripped.lstrip().startswith("#") else None
        except KernelError:
            pl = None  # parse_kernel above already validated pragma lines
        if pl is None or pl.slot_id is None:
            out_lines.append(raw)
            continue
        value = config[pl.slot_id]
        if pl.kind == "PIPELINE" and value == "off":
            continue
        indent = stripped[: len(stripped) - len(stripped.lstrip())]
        out_lines.append(indent + _fmt_pragma(pl.kind, None, value) + ending)
    return "".join(out_lines)
