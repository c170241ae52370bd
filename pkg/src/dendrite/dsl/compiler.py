"""Compilation of parsed tree programs into enhanced tree specs.

Closed-form expressions are sampled onto the grid at compile time, so the
result is bit-deterministic for a given source and grid.  Scalar constants
fold first; tree references inline; the concatenation operator lowers to
the accessory-level concatenate.
"""

from __future__ import annotations

import math

import numpy as np

from ..accessories import ABSOLUTE, DERIVATIVE, AccessoryFn, EnhancedTree, concatenate
from ..curves import DerivativeCoords, ScalarFn, SGrid
from ..errors import DslError
from ..trees import BranchPointSet, ForkSchedule, TreeSpec
from .syntax import (
    COORD_KEYS,
    AssignDef,
    AtRule,
    Binary,
    Call,
    Compare,
    Concat,
    Diagnostic,
    EveryRule,
    Expr,
    Name,
    Num,
    PatternRule,
    PiecewiseCase,
    TreeDef,
    TreeProgram,
    Unary,
    parse,
)

__all__ = ["compile_program", "compile_source"]

_NUMERIC_FUNCTIONS = {
    "exp": np.exp,
    "sin": np.sin,
    "cos": np.cos,
    "abs": np.abs,
    "floor": np.floor,
    "rad": lambda x: x * (math.pi / 180.0),
}

_COMPARATORS = {
    "<": np.less,
    "<=": np.less_equal,
    ">": np.greater,
    ">=": np.greater_equal,
    "==": np.equal,
    "!=": np.not_equal,
}


class CompileContext:
    """Name resolution and error collection for one compilation."""

    def __init__(self, program: TreeProgram, source_lines=None):
        self.program = program
        self.source_lines = source_lines or [""]
        self.diagnostics: list[Diagnostic] = []
        self.constants: dict[str, float] = {}
        self.trees: dict[str, EnhancedTree] = {}
        self.resolving: list[str] = []

    def error(self, message, node) -> Diagnostic:
        line = getattr(node, "line", 0) or 1
        excerpt = (
            self.source_lines[line - 1] if 0 < line <= len(self.source_lines) else ""
        )
        d = Diagnostic("error", message, line, getattr(node, "column", 0) or 1, excerpt)
        self.diagnostics.append(d)
        return d

    def fail(self, message, node):
        raise _CompileFail(self.error(message, node))


class _CompileFail(Exception):
    pass


def _eval(expr: Expr, ctx: CompileContext, s=None, env=None, branch_ctx=None):
    """Evaluate an expression to a float or an array over s."""
    if isinstance(expr, Num):
        return expr.value
    if isinstance(expr, Name):
        if expr.id == "s":
            if s is None:
                ctx.fail("s is only available inside coordinate or accessory expressions", expr)
            return s
        if expr.id == "pi":
            return math.pi
        if expr.id in ctx.constants:
            return ctx.constants[expr.id]
        if env is not None and expr.id in env:
            return env[expr.id]
        if any(d.name == expr.id for d in ctx.program.definitions):
            ctx.fail(f"{expr.id!r} names a tree, not a number", expr)
        ctx.fail(f"unknown identifier {expr.id!r}", expr)
    if isinstance(expr, Unary):
        return -_eval(expr.operand, ctx, s, env, branch_ctx)
    if isinstance(expr, Binary):
        a = _eval(expr.left, ctx, s, env, branch_ctx)
        b = _eval(expr.right, ctx, s, env, branch_ctx)
        if expr.op == "+":
            return a + b
        if expr.op == "-":
            return a - b
        if expr.op == "*":
            return a * b
        if expr.op == "/":
            with np.errstate(divide="ignore", invalid="ignore"):
                out = np.true_divide(a, b)
            _check_finite(out, ctx, expr, s, "division")
            return out
        if expr.op == "^":
            with np.errstate(invalid="ignore", over="ignore"):
                out = np.power(np.asarray(a, dtype=float), b)
            _check_finite(out, ctx, expr, s, "power")
            return out if np.ndim(a) or np.ndim(b) else float(out)
        ctx.fail(f"unknown operator {expr.op!r}", expr)
    if isinstance(expr, Compare):
        a = _eval(expr.left, ctx, s, env, branch_ctx)
        b = _eval(expr.right, ctx, s, env, branch_ctx)
        return _COMPARATORS[expr.op](a, b)
    if isinstance(expr, Concat):
        ctx.fail("<< composes trees and cannot appear inside a numeric expression", expr)
    if isinstance(expr, Call):
        return _eval_call(expr, ctx, s, env, branch_ctx)
    ctx.fail(f"cannot evaluate {type(expr).__name__}", expr)


def _check_finite(out, ctx, expr, s, what):
    arr = np.asarray(out)
    if np.all(np.isfinite(arr)):
        return
    if arr.ndim and s is not None:
        bad = int(np.flatnonzero(~np.isfinite(arr))[0])
        ctx.fail(f"{what} produced a non-finite value at s={np.asarray(s)[bad]!r}", expr)
    ctx.fail(f"{what} produced a non-finite value", expr)


def _eval_call(expr: Call, ctx: CompileContext, s, env, branch_ctx):
    if expr.fn == "piecewise":
        if s is None:
            ctx.fail("piecewise needs the s variable context", expr)
        out = np.zeros_like(np.asarray(s, dtype=float))
        unset = np.ones(out.shape, dtype=bool)
        for case in expr.args:
            if not isinstance(case, PiecewiseCase):
                ctx.fail("piecewise takes (condition, value) pairs", expr)
            cond = np.broadcast_to(
                np.asarray(_eval(case.cond, ctx, s, env, branch_ctx), dtype=bool),
                out.shape,
            )
            val = np.broadcast_to(
                np.asarray(_eval(case.value, ctx, s, env, branch_ctx), dtype=float),
                out.shape,
            )
            take = cond & unset
            out[take] = val[take]
            unset &= ~cond
        return out

    if expr.fn == "at_nodes":
        if branch_ctx is None:
            ctx.fail("at_nodes is only available in tree coordinate and accessory expressions", expr)
        if len(expr.args) != 1:
            ctx.fail("at_nodes takes exactly one argument", expr)
        points, delta_s = branch_ctx
        if s is None:
            ctx.fail("at_nodes needs the s variable context", expr)
        s_arr = np.asarray(s, dtype=float)
        out = np.zeros_like(s_arr)
        if len(points) == 0:
            return out
        amounts = np.broadcast_to(
            np.asarray(_eval(expr.args[0], ctx, points, env, branch_ctx), dtype=float),
            points.shape,
        )
        for p, amount in zip(points, amounts):
            hit = np.flatnonzero(np.abs(s_arr - p) <= 0.25 * delta_s)
            if len(hit):
                out[hit[0]] = amount / delta_s
        return out

    if expr.fn in _NUMERIC_FUNCTIONS:
        if len(expr.args) != 1:
            ctx.fail(f"{expr.fn} takes exactly one argument", expr)
        val = _eval(expr.args[0], ctx, s, env, branch_ctx)
        out = _NUMERIC_FUNCTIONS[expr.fn](np.asarray(val, dtype=float))
        _check_finite(out, ctx, expr, s, expr.fn)
        return out if np.ndim(val) else float(out)

    ctx.fail(f"unknown function {expr.fn!r}", expr)


def _const(expr, ctx, what, node=None) -> float:
    val = _eval(expr, ctx)
    if np.ndim(val) != 0:
        ctx.fail(f"{what} must be a constant", node or expr)
    return float(val)


def _branch_points(rule, ctx, s_min, s_max) -> np.ndarray:
    if isinstance(rule, EveryRule):
        spacing = _const(rule.spacing, ctx, "branch spacing", rule)
        if spacing <= 0:
            ctx.fail("branch spacing must be positive", rule)
        n = int(np.floor((s_max - s_min) / spacing + 1e-9))
        pts = s_min + spacing * np.arange(n)
        return pts[pts < s_max - 1e-12]
    if isinstance(rule, AtRule):
        return np.array(sorted(_const(p, ctx, "branch point", rule) for p in rule.points))
    if isinstance(rule, PatternRule):
        lengths = [_const(p, ctx, "interval length", rule) for p in rule.lengths]
        if any(l <= 0 for l in lengths):
            ctx.fail("pattern interval lengths must be positive", rule)
        pts = [s_min]
        k = 0
        while True:
            nxt = pts[-1] + lengths[k % len(lengths)]
            if nxt >= s_max - 1e-12:
                break
            pts.append(nxt)
            k += 1
        return np.array(pts)
    ctx.fail(f"unhandled branch rule {type(rule).__name__}", rule)


def _compile_tree_def(
    block: TreeDef, ctx: CompileContext, grid: SGrid | None, delta_s: float | None
) -> EnhancedTree:
    dim = 2 if block.dim is None else int(_const(block.dim, ctx, "dim", block))
    if dim < 2:
        ctx.fail(f"dim must be >= 2, got {dim}", block)

    s_min = grid.s_min if grid is not None else 0.0
    if grid is not None:
        s_max = grid.s_max
    elif block.s_max is not None:
        s_max = _const(block.s_max, ctx, "s_max", block)
    else:
        ctx.fail(f"tree {block.name!r} needs s_max (or compile with an explicit grid)", block)
    if delta_s is not None:
        ds = delta_s
    elif grid is not None:
        ds = grid.delta_s
    elif block.delta_s is not None:
        ds = _const(block.delta_s, ctx, "delta_s", block)
    else:
        ctx.fail(f"tree {block.name!r} needs delta_s (or compile with an explicit grid)", block)
    try:
        block_grid = SGrid(s_min, s_max, ds)
    except Exception as exc:
        ctx.fail(str(exc), block)

    if block.branches is not None:
        points = _branch_points(block.branches, ctx, s_min, s_max)
        branch_sets = (BranchPointSet(points, block_grid),) if len(points) else ()
    else:
        branch_sets = ()
    branch_ctx = (
        branch_sets[0].points if branch_sets else np.empty(0),
        block_grid.delta_s,
    )

    if "dr" not in block.coords:
        ctx.fail(f"tree {block.name!r} is missing the dr coordinate", block)
    s = block_grid.samples()
    needed = list(COORD_KEYS[: dim - 1 + 1])  # dr plus dim-1 angles
    arrays = {}
    for key in needed:
        if key == "dr" or key in block.coords:
            expr = block.coords.get(key)
            if expr is None:
                ctx.fail(f"tree {block.name!r} is missing the dr coordinate", block)
            val = _eval(expr, ctx, s=s, branch_ctx=branch_ctx)
            arrays[key] = np.broadcast_to(np.asarray(val, dtype=float), s.shape).astype(float)
        else:
            arrays[key] = np.zeros_like(s)
    for key in block.coords:
        if key not in needed:
            ctx.fail(
                f"coordinate {key!r} needs dim >= {COORD_KEYS.index(key) + 2}", block
            )

    dr = arrays["dr"]
    if np.any(dr < 0):
        bad = int(np.flatnonzero(dr < 0)[0])
        ctx.fail(
            f"radial rate must be non-negative; dr is {dr[bad]:.6g} at s={s[bad]!r}",
            block.coords["dr"],
        )
    if not np.all(np.isfinite(dr)):
        bad = int(np.flatnonzero(~np.isfinite(dr))[0])
        ctx.fail(f"dr is non-finite at s={s[bad]!r}", block.coords["dr"])

    coords = DerivativeCoords.from_arrays(
        dr, [arrays[k] for k in needed[1:]], block_grid
    )

    arities = tuple(int(_const(x, ctx, "fork arity", block)) for x in block.forks) or (2,)
    axes = None
    if block.axes is not None:
        axes = tuple(int(_const(x, ctx, "fork axis", block)) for x in block.axes)
        if any(not (0 <= ax <= dim - 2) for ax in axes):
            ctx.fail(f"axes entries must be in [0, {dim - 2}]", block)
    if any(a < 2 for a in arities):
        ctx.fail("fork arities must be >= 2", block)
    generations = max(len(branch_sets[0].points), 1) if branch_sets else 1
    spec = TreeSpec(coords, branch_sets, ForkSchedule(arities, axes), generations)
    tree = EnhancedTree(spec)

    declared = set(tree.accessories.names())
    for acc in block.accessories:
        if acc.name in declared:
            ctx.fail(f"duplicate accessory {acc.name!r}", acc)
        _validate_refs(acc.expr, ctx, declared, acc)
        kind = DERIVATIVE if acc.kind == "deriv" else ABSOLUTE
        h = _const(acc.start, ctx, "accessory start", acc) if acc.start is not None else 0.0
        fn = _accessory_closure(acc.expr, ctx, branch_ctx)
        tree.accessories.add(AccessoryFn(acc.name, kind, fn))
        if kind == DERIVATIVE:
            tree.continuity_constants[acc.name] = h
        declared.add(acc.name)
    return tree


def _validate_refs(expr: Expr, ctx: CompileContext, declared, where):
    """Accessory expressions may reference only earlier channels and constants."""
    if isinstance(expr, Name):
        if expr.id in ("s", "pi") or expr.id in ctx.constants or expr.id in declared:
            return
        if any(d.name == expr.id for d in ctx.program.definitions):
            ctx.fail(f"{expr.id!r} names a tree, not a value", expr)
        ctx.fail(
            f"unknown reference {expr.id!r} (accessories may only use channels "
            "declared above them)",
            expr,
        )
    for child in getattr(expr, "__dict__", {}).values():
        if isinstance(child, Expr):
            _validate_refs(child, ctx, declared, where)
        elif isinstance(child, list):
            for c in child:
                if isinstance(c, Expr):
                    _validate_refs(c, ctx, declared, where)


def _accessory_closure(expr: Expr, ctx: CompileContext, branch_ctx):
    def fn(s, env):
        val = _eval(expr, ctx, s=s, env=env, branch_ctx=branch_ctx)
        return np.broadcast_to(np.asarray(val, dtype=float), np.shape(s))

    return ScalarFn.closed(fn, takes_env=True)


def _compile_tree_expr(expr, ctx, grid, delta_s) -> EnhancedTree:
    if isinstance(expr, Name):
        return _compile_named(expr.id, ctx, grid, delta_s, expr)
    if isinstance(expr, Concat):
        left = _compile_tree_expr(expr.left, ctx, grid, delta_s)
        right = _compile_tree_expr(expr.right, ctx, grid, delta_s)
        return concatenate(left, right)
    ctx.fail("expected a tree name or a << composition", expr)


def _compile_named(name, ctx: CompileContext, grid, delta_s, where) -> EnhancedTree:
    if name in ctx.trees:
        return ctx.trees[name]
    if name in ctx.resolving:
        ctx.fail(f"definition cycle through {name!r}", where)
    try:
        d = ctx.program.get(name)
    except KeyError:
        ctx.fail(f"unknown tree {name!r}", where)
    ctx.resolving.append(name)
    try:
        if isinstance(d, TreeDef):
            tree = _compile_tree_def(d, ctx, grid, delta_s)
        elif isinstance(d, AssignDef) and isinstance(d.expr, (Concat, Name)):
            tree = _compile_tree_expr(d.expr, ctx, grid, delta_s)
        else:
            ctx.fail(f"{name!r} is a constant, not a tree", where)
    finally:
        ctx.resolving.pop()
    ctx.trees[name] = tree
    return tree


def compile_program(
    program: TreeProgram,
    grid: SGrid | None = None,
    delta_s: float | None = None,
    source: str | None = None,
) -> EnhancedTree:
    """Compile a parsed program into the enhanced tree of its entry.

    An explicit grid overrides the blocks' own s_max/delta_s hints; the
    delta_s argument overrides just the step.  All scalar definitions fold
    before any tree compiles.
    """
    ctx = CompileContext(program, (source or "").splitlines() or [""])
    try:
        for d in program.definitions:
            if isinstance(d, AssignDef) and not isinstance(d.expr, (Concat, Name)):
                ctx.constants[d.name] = _const(d.expr, ctx, f"constant {d.name!r}", d)
            elif isinstance(d, AssignDef) and isinstance(d.expr, Name):
                # alias: a bare name may point at a constant or a tree
                if d.expr.id in ctx.constants:
                    ctx.constants[d.name] = ctx.constants[d.expr.id]
        try:
            entry = program.entry
        except KeyError as exc:
            ctx.fail(str(exc.args[0]), program.definitions[0] if program.definitions else Num("0", 0.0))
        tree = _compile_named(entry, ctx, grid, delta_s, program.get(entry))
    except _CompileFail:
        raise DslError(ctx.diagnostics) from None
    if ctx.diagnostics:
        raise DslError(ctx.diagnostics)
    return tree


def compile_source(
    source: str, grid: SGrid | None = None, delta_s: float | None = None
) -> EnhancedTree:
    """Parse then compile; diagnostics from either stage carry positions."""
    program = parse(source)
    return compile_program(program, grid, delta_s, source=source)
