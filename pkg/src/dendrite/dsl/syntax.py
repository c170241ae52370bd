"""Lexer, parser, AST and formatter for the tree description language.

The surface form is small: named tree blocks with coordinate expressions,
a branch rule, fork arities and accessory declarations, plus top-level
constant definitions and tree compositions with the << operator.
Comments start with # and run to end of line; those directly above a
definition travel with it through the formatter.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from ..errors import DslError

COORD_KEYS = ("dr", "dphi", "dpsi") + tuple(f"dv{k}" for k in range(3, 9))
SCALAR_FIELDS = ("dim", "s_max", "delta_s")
FUNCTIONS = ("exp", "sin", "cos", "abs", "floor", "rad", "piecewise", "at_nodes")

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<number>\d+(\.\d*)?([eE][+-]?\d+)?|\.\d+([eE][+-]?\d+)?)
  | (?P<op><<|<=|>=|==|!=|[{}()\[\],:;=+\-*/^<>])
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
""",
    re.VERBOSE,
)


@dataclass
class Diagnostic:
    severity: str
    message: str
    line: int
    column: int
    excerpt: str

    def __str__(self):
        return f"{self.line}:{self.column}: {self.severity}: {self.message}"


@dataclass
class Token:
    kind: str
    text: str
    line: int
    column: int


def tokenize(source: str):
    """Tokens plus standalone comments (with positions); raises nothing.

    Unknown characters become error tokens so the parser can report them
    with positions and keep going.
    """
    tokens: list[Token] = []
    comments: list[Token] = []
    line, col, pos = 1, 1, 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            tokens.append(Token("error", source[pos], line, col))
            pos += 1
            col += 1
            continue
        kind = m.lastgroup
        text = m.group()
        if kind == "nl":
            line += 1
            col = 1
        elif kind == "ws":
            col += len(text)
        elif kind == "comment":
            comments.append(Token("comment", text, line, col))
            col += len(text)
        else:
            tokens.append(Token(kind, text, line, col))
            col += len(text)
        pos = m.end()
    tokens.append(Token("eof", "", line, col))
    return tokens, comments


# ----------------------------------------------------------------- AST


@dataclass
class Expr:
    line: int = field(default=0, compare=False, kw_only=True)
    column: int = field(default=0, compare=False, kw_only=True)


@dataclass
class Num(Expr):
    text: str
    value: float


@dataclass
class Name(Expr):
    id: str


@dataclass
class Unary(Expr):
    op: str
    operand: Expr


@dataclass
class Binary(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass
class Compare(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass
class Call(Expr):
    fn: str
    args: list


@dataclass
class PiecewiseCase(Expr):
    cond: Expr
    value: Expr


@dataclass
class Concat(Expr):
    left: Expr
    right: Expr


@dataclass
class BranchRule:
    line: int = field(default=0, compare=False, kw_only=True)
    column: int = field(default=0, compare=False, kw_only=True)


@dataclass
class EveryRule(BranchRule):
    spacing: Expr


@dataclass
class AtRule(BranchRule):
    points: list


@dataclass
class PatternRule(BranchRule):
    lengths: list


@dataclass
class AccessoryDecl:
    name: str
    kind: str  # "deriv" | "abs"
    expr: Expr
    start: Expr | None = None
    line: int = field(default=0, compare=False, kw_only=True)
    column: int = field(default=0, compare=False, kw_only=True)


@dataclass
class TreeDef:
    name: str
    dim: Expr | None = None
    s_max: Expr | None = None
    delta_s: Expr | None = None
    coords: dict = field(default_factory=dict)
    branches: BranchRule | None = None
    forks: list = field(default_factory=list)
    axes: list | None = None
    accessories: list = field(default_factory=list)
    comments: list = field(default_factory=lambda: [], compare=False)
    line: int = field(default=0, compare=False, kw_only=True)
    column: int = field(default=0, compare=False, kw_only=True)


@dataclass
class AssignDef:
    name: str
    expr: Expr
    comments: list = field(default_factory=lambda: [], compare=False)
    line: int = field(default=0, compare=False, kw_only=True)
    column: int = field(default=0, compare=False, kw_only=True)


@dataclass
class TreeProgram:
    definitions: list

    def names(self):
        return [d.name for d in self.definitions]

    def get(self, name):
        for d in self.definitions:
            if d.name == name:
                return d
        raise KeyError(name)

    @property
    def entry(self) -> str:
        if any(d.name == "main" for d in self.definitions):
            return "main"
        trees = [d for d in self.definitions if isinstance(d, TreeDef)]
        if len(trees) == 1:
            return trees[0].name
        raise KeyError("no entry definition: add `main = ...;` or a single tree block")


# -------------------------------------------------------------- parser


class _Parser:
    def __init__(self, source: str):
        self.source_lines = source.splitlines() or [""]
        self.tokens, self.comments = tokenize(source)
        self.pos = 0
        self.diagnostics: list[Diagnostic] = []
        self._concat_ok = False

    # --- token plumbing

    def peek(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def at(self, kind, text=None) -> bool:
        tok = self.peek()
        return tok.kind == kind and (text is None or tok.text == text)

    def accept(self, kind, text=None):
        if self.at(kind, text):
            return self.advance()
        return None

    def expect(self, kind, text=None, what=None) -> Token:
        if self.at(kind, text):
            return self.advance()
        tok = self.peek()
        want = what or (text or kind)
        raise _ParseFail(self.error(f"expected {want}, found {tok.text or tok.kind!r}", tok))

    def error(self, message, tok: Token) -> Diagnostic:
        line = min(tok.line, len(self.source_lines))
        excerpt = self.source_lines[line - 1] if self.source_lines else ""
        d = Diagnostic("error", message, tok.line, tok.column, excerpt)
        self.diagnostics.append(d)
        return d

    def sync(self, stop_texts=(";", "}")):
        """Skip ahead so parsing can continue after an error."""
        depth = 0
        while not self.at("eof"):
            tok = self.peek()
            if tok.kind == "op" and tok.text == "{":
                depth += 1
            elif tok.kind == "op" and tok.text == "}" and depth > 0:
                depth -= 1
            elif depth == 0 and tok.kind == "op" and tok.text in stop_texts:
                self.advance()
                return
            elif depth == 0 and tok.kind == "ident" and tok.text == "tree":
                return
            self.advance()

    # --- grammar

    def parse_program(self) -> TreeProgram:
        defs = []
        while not self.at("eof"):
            start = self.pos
            try:
                defs.append(self.parse_definition())
            except _ParseFail:
                self.sync()
                if self.pos == start:  # guarantee progress
                    self.advance()
        self.attach_comments(defs)
        return TreeProgram(defs)

    def attach_comments(self, defs):
        """Comments become leading trivia of the next definition below them."""
        for c in self.comments:
            target = None
            for d in defs:
                if d.line > c.line:
                    target = d
                    break
            if target is not None:
                target.comments.append(c.text)

    def parse_definition(self):
        self._concat_ok = False  # never leaks across an error recovery
        tok = self.peek()
        if self.at("ident", "tree"):
            return self.parse_tree_def()
        if tok.kind == "ident":
            name = self.advance()
            self.expect("op", "=")
            expr = self.parse_expr(allow_concat=True)
            self.expect("op", ";")
            return AssignDef(name.text, expr, line=name.line, column=name.column)
        raise _ParseFail(
            self.error(f"expected a definition, found {tok.text or tok.kind!r}", tok)
        )

    def parse_tree_def(self) -> TreeDef:
        kw = self.expect("ident", "tree")
        name = self.expect("ident", what="tree name")
        out = TreeDef(name.text, line=kw.line, column=kw.column)
        self.expect("op", "{")
        while not self.at("op", "}") and not self.at("eof"):
            try:
                self.parse_field(out)
            except _ParseFail:
                self.sync(stop_texts=(";",))
                if self.at("op", "}"):
                    break
        self.expect("op", "}")
        return out

    def parse_field(self, out: TreeDef):
        tok = self.peek()
        if tok.kind != "ident":
            raise _ParseFail(self.error(f"expected a field, found {tok.text!r}", tok))
        key = self.advance()

        if key.text == "accessory":
            name = self.expect("ident", what="accessory name")
            kind = self.expect("ident", what="deriv or abs")
            if kind.text not in ("deriv", "abs"):
                raise _ParseFail(
                    self.error(f"accessory kind must be deriv or abs, found {kind.text!r}", kind)
                )
            start = None
            if kind.text == "deriv" and self.accept("op", "("):
                start = self.parse_expr()
                self.expect("op", ")")
            self.expect("op", ":")
            expr = self.parse_expr()
            self.expect("op", ";")
            out.accessories.append(
                AccessoryDecl(name.text, kind.text, expr, start, line=key.line, column=key.column)
            )
            return

        self.expect("op", ":")
        if key.text == "branches":
            out.branches = self.parse_branch_rule()
        elif key.text == "forks":
            out.forks = self.parse_int_list()
        elif key.text == "axes":
            out.axes = self.parse_int_list()
        elif key.text in SCALAR_FIELDS:
            setattr(out, key.text, self.parse_expr())
        elif key.text in COORD_KEYS:
            out.coords[key.text] = self.parse_expr()
        else:
            raise _ParseFail(self.error(f"unknown field {key.text!r}", key))
        self.expect("op", ";")

    def parse_branch_rule(self) -> BranchRule:
        tok = self.expect("ident", what="every, at or pattern")
        if tok.text == "every":
            self.expect("op", "(")
            spacing = self.parse_expr()
            self.expect("op", ")")
            return EveryRule(spacing, line=tok.line, column=tok.column)
        if tok.text == "at":
            self.expect("op", "(")
            points = [self.parse_expr()]
            while self.accept("op", ","):
                points.append(self.parse_expr())
            self.expect("op", ")")
            return AtRule(points, line=tok.line, column=tok.column)
        if tok.text == "pattern":
            self.expect("op", "(")
            self.expect("op", "[")
            lengths = [self.parse_expr()]
            while self.accept("op", ","):
                lengths.append(self.parse_expr())
            self.expect("op", "]")
            self.expect("op", ",")
            self.expect("ident", "repeat")
            self.expect("op", ")")
            return PatternRule(lengths, line=tok.line, column=tok.column)
        raise _ParseFail(
            self.error(f"unknown branch rule {tok.text!r} (every/at/pattern)", tok)
        )

    def parse_int_list(self):
        self.expect("op", "[")
        items = [self.parse_expr()]
        while self.accept("op", ","):
            items.append(self.parse_expr())
        self.expect("op", "]")
        return items

    # expression grammar, loosest to tightest:
    #   concat: <<        (top-level right-hand sides only)
    #   compare: < <= > >= == !=   (piecewise conditions only)
    #   add: + -   mul: * /   unary -   power: ^ (right assoc)

    def parse_expr(self, allow_concat=False) -> Expr:
        if allow_concat:
            self._concat_ok = True
        e = self.parse_add()
        if self._concat_ok:
            while self.at("op", "<<"):
                op = self.advance()
                right = self.parse_add()
                e = Concat(e, right, line=op.line, column=op.column)
        if allow_concat:
            self._concat_ok = False
        return e

    def parse_condition(self) -> Expr:
        left = self.parse_add()
        tok = self.peek()
        if tok.kind == "op" and tok.text in ("<", "<=", ">", ">=", "==", "!="):
            self.advance()
            right = self.parse_add()
            return Compare(tok.text, left, right, line=tok.line, column=tok.column)
        raise _ParseFail(self.error("expected a comparison", tok))

    def parse_add(self) -> Expr:
        e = self.parse_mul()
        while self.peek().kind == "op" and self.peek().text in ("+", "-"):
            op = self.advance()
            e = Binary(op.text, e, self.parse_mul(), line=op.line, column=op.column)
        return e

    def parse_mul(self) -> Expr:
        e = self.parse_unary()
        while self.peek().kind == "op" and self.peek().text in ("*", "/"):
            op = self.advance()
            e = Binary(op.text, e, self.parse_unary(), line=op.line, column=op.column)
        return e

    def parse_unary(self) -> Expr:
        if self.at("op", "-"):
            op = self.advance()
            return Unary("-", self.parse_unary(), line=op.line, column=op.column)
        return self.parse_power()

    def parse_power(self) -> Expr:
        base = self.parse_atom()
        if self.at("op", "^"):
            op = self.advance()
            return Binary("^", base, self.parse_unary(), line=op.line, column=op.column)
        return base

    def parse_atom(self) -> Expr:
        tok = self.peek()
        if tok.kind == "number":
            self.advance()
            return Num(tok.text, float(tok.text), line=tok.line, column=tok.column)
        if tok.kind == "ident":
            self.advance()
            if self.at("op", "("):
                return self.parse_call(tok)
            return Name(tok.text, line=tok.line, column=tok.column)
        if self.accept("op", "("):
            e = self.parse_expr()
            self.expect("op", ")")
            return e
        raise _ParseFail(
            self.error(f"expected an expression, found {tok.text or tok.kind!r}", tok)
        )

    def parse_call(self, name: Token) -> Expr:
        self.expect("op", "(")
        args: list[Expr] = []
        if name.text == "piecewise":
            while True:
                self.expect("op", "(")
                cond = self.parse_condition()
                self.expect("op", ",")
                value = self.parse_expr()
                self.expect("op", ")")
                args.append(PiecewiseCase(cond, value, line=cond.line, column=cond.column))
                if not self.accept("op", ","):
                    break
        elif not self.at("op", ")"):
            args.append(self.parse_expr())
            while self.accept("op", ","):
                args.append(self.parse_expr())
        self.expect("op", ")")
        return Call(name.text, args, line=name.line, column=name.column)


class _ParseFail(Exception):
    pass


def parse(source: str) -> TreeProgram:
    """Parse a program, collecting every diagnostic before failing."""
    p = _Parser(source)
    program = p.parse_program()
    seen = set()
    for d in program.definitions:
        if d.name in seen:
            p.error(
                f"duplicate definition of {d.name!r}",
                Token("ident", d.name, d.line, d.column),
            )
        seen.add(d.name)
    if p.diagnostics:
        raise DslError(p.diagnostics)
    return program


# ----------------------------------------------------------- formatter

_LEVEL_ATOM = 7
_LEVEL_POW = 6
_LEVEL_UNARY = 5
_LEVEL_MUL = 4
_LEVEL_ADD = 3
_LEVEL_CMP = 2
_LEVEL_CONCAT = 1


def _level(e: Expr) -> int:
    if isinstance(e, (Num, Name, Call)):
        return _LEVEL_ATOM
    if isinstance(e, Unary):
        return _LEVEL_UNARY
    if isinstance(e, Compare):
        return _LEVEL_CMP
    if isinstance(e, Concat):
        return _LEVEL_CONCAT
    if isinstance(e, Binary):
        if e.op == "^":
            return _LEVEL_POW
        if e.op in ("*", "/"):
            return _LEVEL_MUL
        return _LEVEL_ADD
    raise TypeError(f"no precedence for {type(e).__name__}")


def _fmt(e: Expr, minimum: int) -> str:
    text = _fmt_inner(e)
    if _level(e) < minimum:
        return f"({text})"
    return text


def _fmt_inner(e: Expr) -> str:
    if isinstance(e, Num):
        return e.text
    if isinstance(e, Name):
        return e.id
    if isinstance(e, Unary):
        return f"-{_fmt(e.operand, _LEVEL_UNARY)}"
    if isinstance(e, Compare):
        return f"{_fmt(e.left, _LEVEL_ADD)} {e.op} {_fmt(e.right, _LEVEL_ADD)}"
    if isinstance(e, Concat):
        return f"{_fmt(e.left, _LEVEL_CONCAT)} << {_fmt(e.right, _LEVEL_CONCAT + 1)}"
    if isinstance(e, Binary):
        if e.op == "^":
            return f"{_fmt(e.left, _LEVEL_ATOM)}^{_fmt(e.right, _LEVEL_POW)}"
        lvl = _LEVEL_MUL if e.op in ("*", "/") else _LEVEL_ADD
        return f"{_fmt(e.left, lvl)} {e.op} {_fmt(e.right, lvl + 1)}"
    if isinstance(e, PiecewiseCase):
        return f"({_fmt_inner(e.cond)}, {_fmt(e.value, 0)})"
    if isinstance(e, Call):
        return f"{e.fn}({', '.join(_fmt_inner(a) if isinstance(a, PiecewiseCase) else _fmt(a, 0) for a in e.args)})"
    raise TypeError(f"cannot format {type(e).__name__}")


def _fmt_branch_rule(rule: BranchRule) -> str:
    if isinstance(rule, EveryRule):
        return f"every({_fmt(rule.spacing, 0)})"
    if isinstance(rule, AtRule):
        return f"at({', '.join(_fmt(p, 0) for p in rule.points)})"
    if isinstance(rule, PatternRule):
        return f"pattern([{', '.join(_fmt(p, 0) for p in rule.lengths)}], repeat)"
    raise TypeError(f"cannot format {type(rule).__name__}")


def format_program(program: TreeProgram) -> str:
    """Canonical pretty-print; parsing the result rebuilds the same AST."""
    chunks = []
    for d in program.definitions:
        lines = [c if c.startswith("#") else f"# {c}" for c in d.comments]
        if isinstance(d, AssignDef):
            lines.append(f"{d.name} = {_fmt(d.expr, 0)};")
        else:
            lines.append(f"tree {d.name} {{")
            if d.dim is not None:
                lines.append(f"  dim: {_fmt(d.dim, 0)};")
            if d.s_max is not None:
                lines.append(f"  s_max: {_fmt(d.s_max, 0)};")
            if d.delta_s is not None:
                lines.append(f"  delta_s: {_fmt(d.delta_s, 0)};")
            for key in COORD_KEYS:
                if key in d.coords:
                    lines.append(f"  {key}: {_fmt(d.coords[key], 0)};")
            if d.branches is not None:
                lines.append(f"  branches: {_fmt_branch_rule(d.branches)};")
            if d.forks:
                lines.append(f"  forks: [{', '.join(_fmt(x, 0) for x in d.forks)}];")
            if d.axes is not None:
                lines.append(f"  axes: [{', '.join(_fmt(x, 0) for x in d.axes)}];")
            for acc in d.accessories:
                head = f"  accessory {acc.name} {acc.kind}"
                if acc.start is not None:
                    head += f"({_fmt(acc.start, 0)})"
                lines.append(f"{head}: {_fmt(acc.expr, 0)};")
            lines.append("}")
        chunks.append("\n".join(lines))
    return "\n\n".join(chunks) + "\n"
