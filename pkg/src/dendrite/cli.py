"""Command-line surface: render, analyze, compare, bench.

Exit codes: 0 success, 1 I/O failure, 2 parse diagnostics, 3 configuration
or compile problems (including output/dimension mismatches), 4 evaluation
or analysis failures.  All outputs are deterministic; bench timings are the
only thing that varies between runs.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .accessories import EnhancedTree, evaluate_accessories, perimeter_feedback
from .curves import Pose, SGrid, load_coords_csv
from .dsl import compile_program, parse
from .dsl.compiler import CompileContext, _branch_points
from .dsl.syntax import TreeProgram, _Parser
from .errors import (
    DendriteError,
    DslError,
    EvaluationError,
    ExportError,
    GridError,
    NodeBudgetError,
    TopologyError,
)
from .export import TubeParams, project, to_json, to_stl, to_svg
from .trees import (
    DEFAULT_NODE_CAP,
    BranchPointSet,
    TreeSpec,
    bounding_radius,
    classify_self_similarity,
    compare_canopies,
    estimate_box_dimension,
    evaluate_tree,
    evaluate_via_transform_stack,
)

EXIT_OK = 0
EXIT_IO = 1
EXIT_PARSE = 2
EXIT_CONFIG = 3
EXIT_EVAL = 4

DEFAULT_STYLE_MAP = {
    "width": "stroke-width",
    "opacity": "stroke-opacity",
    "glow": "stroke-opacity",
    "tint": "stroke-opacity",
    "color": "stroke",
}

MIN_BENCH_SEGMENTS = 2**14


class CliFailure(Exception):
    def __init__(self, code, message):
        self.code = code
        self.message = message
        super().__init__(message)


@dataclass
class RunConfig:
    input: Path
    delta_s: float | None = None
    s_max: float | None = None
    generations: int | None = None
    branches: str | None = None
    output: Path | None = None
    fmt: str | None = None
    tube_segments: int = 12
    tube_radius: str = "width"
    gain: float | None = None
    falloff: float = 0.5
    perimeter: Path | None = None
    node_cap: int = DEFAULT_NODE_CAP
    json_mode: bool = False
    box_dim: bool = False


def _node_cap_from_env() -> int:
    raw = os.environ.get("DENDRITE_MAX_NODES")
    if raw is None:
        return DEFAULT_NODE_CAP
    try:
        cap = int(raw)
        if cap < 1:
            raise ValueError
        return cap
    except ValueError:
        raise CliFailure(EXIT_CONFIG, f"DENDRITE_MAX_NODES must be a positive integer, got {raw!r}")


def _print_diagnostics(path, diags):
    for d in diags:
        print(f"{path}:{d}", file=sys.stderr)
        if d.excerpt:
            print(f"  {d.excerpt}", file=sys.stderr)
            print("  " + " " * (d.column - 1) + "^", file=sys.stderr)


def _read_text(path: Path) -> str:
    try:
        return path.read_text()
    except OSError as exc:
        raise CliFailure(EXIT_IO, f"cannot read {path}: {exc}")


def _parse_branch_rule_text(text: str, grid: SGrid) -> np.ndarray:
    p = _Parser(text)
    try:
        rule = p.parse_branch_rule()
    except Exception:
        raise CliFailure(EXIT_CONFIG, f"cannot parse --branches rule {text!r}")
    if p.diagnostics:
        raise CliFailure(EXIT_CONFIG, f"cannot parse --branches rule {text!r}")
    ctx = CompileContext(TreeProgram([]))
    try:
        return _branch_points(rule, ctx, grid.s_min, grid.s_max)
    except Exception:
        raise CliFailure(EXIT_CONFIG, f"--branches rule {text!r} is invalid for the grid")


def load_enhanced_tree(cfg: RunConfig) -> EnhancedTree:
    """Build the enhanced tree from a DSL program or a coordinate CSV."""
    path = cfg.input
    if path.suffix.lower() == ".csv":
        try:
            coords = load_coords_csv(path)
        except OSError as exc:
            raise CliFailure(EXIT_IO, f"cannot read {path}: {exc}")
        except (GridError, EvaluationError) as exc:
            raise CliFailure(EXIT_CONFIG, f"{path}: {exc}")
        if cfg.delta_s is not None:
            from .curves import resample

            bp = None
            if cfg.branches:
                bp = _parse_branch_rule_text(cfg.branches, coords.grid)
            coords = resample(coords, cfg.delta_s, branch_points=bp)
        branch_sets = ()
        if cfg.branches:
            pts = _parse_branch_rule_text(cfg.branches, coords.grid)
            if len(pts):
                branch_sets = (BranchPointSet(pts, coords.grid),)
        gens = cfg.generations or (len(branch_sets[0].points) if branch_sets else 1)
        try:
            return EnhancedTree(TreeSpec(coords, branch_sets, max_generations=max(gens, 1)))
        except DendriteError as exc:
            raise CliFailure(EXIT_CONFIG, f"{path}: {exc}")

    source = _read_text(path)
    try:
        program = parse(source)
    except DslError as exc:
        _print_diagnostics(path, exc.diagnostics)
        raise CliFailure(EXIT_PARSE, f"{path}: parse failed")
    grid = None
    if cfg.s_max is not None:
        if cfg.delta_s is None:
            raise CliFailure(EXIT_CONFIG, "--s-max also needs --delta-s")
        grid = SGrid(0.0, cfg.s_max, cfg.delta_s)
    try:
        tree = compile_program(program, grid=grid, delta_s=cfg.delta_s, source=source)
    except DslError as exc:
        _print_diagnostics(path, exc.diagnostics)
        raise CliFailure(EXIT_CONFIG, f"{path}: compile failed")
    if cfg.generations is not None:
        tree.spec.max_generations = cfg.generations
    return tree


def _apply_feedback(cfg: RunConfig, tree: EnhancedTree) -> EnhancedTree:
    if cfg.perimeter is None:
        return tree
    try:
        rows = np.loadtxt(cfg.perimeter, delimiter=",", skiprows=1, ndmin=2)
    except OSError as exc:
        raise CliFailure(EXIT_IO, f"cannot read {cfg.perimeter}: {exc}")
    except ValueError as exc:
        raise CliFailure(EXIT_CONFIG, f"{cfg.perimeter}: {exc}")
    gain = cfg.gain if cfg.gain is not None else 1.0
    try:
        return perimeter_feedback(tree, rows, gain=gain, falloff=cfg.falloff)
    except DendriteError as exc:
        raise CliFailure(EXIT_CONFIG, str(exc))


def _decorate(cfg: RunConfig, tree: EnhancedTree):
    try:
        return evaluate_accessories(tree, node_cap=cfg.node_cap)
    except NodeBudgetError as exc:
        raise CliFailure(EXIT_EVAL, str(exc))
    except (EvaluationError, GridError) as exc:
        raise CliFailure(EXIT_EVAL, f"evaluation failed: {exc}")


def cmd_render(cfg: RunConfig) -> int:
    tree = load_enhanced_tree(cfg)
    tree = _apply_feedback(cfg, tree)
    deco = _decorate(cfg, tree)

    fmt = cfg.fmt
    if fmt is None and cfg.output is not None:
        fmt = cfg.output.suffix.lstrip(".").lower() or None
    if fmt not in ("svg", "stl", "json"):
        raise CliFailure(EXIT_CONFIG, f"choose --format svg|stl|json (got {fmt!r})")
    if cfg.output is None:
        raise CliFailure(EXIT_CONFIG, "render needs -o/--output")

    try:
        if fmt == "svg":
            style = {
                name: attr
                for name, attr in DEFAULT_STYLE_MAP.items()
                if name in deco.per_edge_values
            }
            payload = to_svg(deco, style).encode()
        elif fmt == "stl":
            params = TubeParams(
                radial_segments=cfg.tube_segments, radius_source=_radius_source(cfg)
            )
            payload = to_stl(deco, params)
        else:
            payload = to_json(deco).encode()
    except ExportError as exc:
        raise CliFailure(EXIT_CONFIG, f"cannot export: {exc}")

    try:
        cfg.output.write_bytes(payload)
    except OSError as exc:
        raise CliFailure(EXIT_IO, f"cannot write {cfg.output}: {exc}")
    print(f"wrote {cfg.output} ({len(payload)} bytes)")
    return EXIT_OK


def _radius_source(cfg: RunConfig):
    try:
        return float(cfg.tube_radius)
    except ValueError:
        return cfg.tube_radius


def cmd_analyze(cfg: RunConfig) -> int:
    tree = load_enhanced_tree(cfg)
    spec = tree.spec
    bound = bounding_radius(spec)
    bound_truncated = bounding_radius(spec, extrapolate=False)
    report = {
        "bound": bound,
        "bound_truncated": bound_truncated,
        "generations": spec.generations(),
        "nodes": spec.planned_node_count(),
    }
    try:
        rep = classify_self_similarity(spec)
        report.update(
            {
                "classification": rep.classification,
                "rho": rep.rho,
                "rho_condition_met": rep.rho_condition_met,
                "phi_condition_met": rep.phi_condition_met,
                "equidistant_met": rep.equidistant_met,
                "pattern_period": rep.pattern_period,
                "tolerance": rep.tolerance_used,
            }
        )
    except GridError as exc:
        report.update({"classification": "not_a_tree", "reason": str(exc)})

    if cfg.box_dim:
        deco = _decorate(cfg, tree)
        if deco.tree.dim != 2:
            raise CliFailure(EXIT_CONFIG, "--box-dim needs a 2D tree")
        _, half = _extent_for_box(deco.tree)
        scales = [half / 2**k for k in range(2, 7)]
        report["box_dimension"] = estimate_box_dimension(deco.tree, scales)

    if cfg.json_mode:
        import json

        print(json.dumps(report, indent=2, default=_json_default))
        return EXIT_OK

    if report["classification"] == "not_a_tree":
        print(f"not_a_tree, bound={bound:.4f}")
        print(f"  reason: {report['reason']}")
        return EXIT_OK
    rho = report["rho"]
    rho_text = f"{rho:.4f}" if rho is not None else "n/a"
    print(f"{report['classification']}, rho={rho_text}, bound={bound:.4f}")
    print(
        f"  conditions: rho={_yn(report['rho_condition_met'])} "
        f"phi={_yn(report['phi_condition_met'])} "
        f"equidistant={_yn(report['equidistant_met'])} "
        f"pattern_period={report['pattern_period']}"
    )
    print(
        f"  generations={report['generations']} nodes={report['nodes']} "
        f"bound_truncated={bound_truncated:.4f}"
    )
    if "box_dimension" in report:
        print(f"  box_dimension={report['box_dimension']:.3f}")
    return EXIT_OK


def _yn(flag):
    return "yes" if flag else "no"


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"not JSON-serializable: {type(x)}")


def _extent_for_box(tree):
    pts = np.concatenate([e.polyline.points for e in tree.edges])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    return (lo + hi) / 2, max(float(np.max(hi - lo)) / 2, 1e-9)


def cmd_compare(cfg_a: RunConfig, cfg_b: RunConfig, generations: int | None) -> int:
    tree_a = load_enhanced_tree(cfg_a)
    tree_b = load_enhanced_tree(cfg_b)
    a = _decorate(cfg_a, tree_a).tree
    b = _decorate(cfg_b, tree_b).tree
    gens = generations or min(a.generations(), b.generations())
    try:
        rep = compare_canopies(a, b, generations=gens)
    except (TopologyError, EvaluationError, GridError) as exc:
        raise CliFailure(EXIT_EVAL, f"cannot compare: {exc}")
    print(f"scale: {rep.scale:.6f}")
    print("generation distances:")
    for i, d in enumerate(rep.per_generation_distance, start=1):
        print(f"  g{i}: {d:.6e}")
    print(f"fitted ratio: {rep.fitted_rho:.4f}")
    print(f"converged: {_yn(rep.converged)}")
    return EXIT_OK


def cmd_bench(cfg: RunConfig, repeat: int) -> int:
    tree = load_enhanced_tree(cfg)
    spec = tree.spec
    if spec.dim not in (2, 3):
        raise CliFailure(EXIT_CONFIG, "bench supports dim 2 or 3 (both backends)")

    fast = evaluate_tree(spec, node_cap=cfg.node_cap)
    segments = sum(len(e.polyline.points) - 1 for e in fast.edges)
    if segments < MIN_BENCH_SEGMENTS:
        raise CliFailure(
            EXIT_CONFIG,
            f"benchmark needs >= {MIN_BENCH_SEGMENTS} total segments, got {segments}; "
            "use a finer --delta-s or more generations",
        )
    stack = evaluate_via_transform_stack(spec, node_cap=cfg.node_cap)
    worst = 0.0
    for na, nb in zip(fast.nodes, stack.nodes):
        worst = max(worst, float(np.max(np.abs(na.position - nb.position))))
    if worst > 1e-6:
        raise CliFailure(
            EXIT_EVAL,
            f"backend agreement failed: max node delta {worst:.3e} > 1e-6; "
            "no timings reported",
        )

    def best_time(fn):
        best = float("inf")
        for _ in range(repeat):
            t0 = time.perf_counter()
            fn(spec, node_cap=cfg.node_cap)
            best = min(best, time.perf_counter() - t0)
        return best

    t_fast = best_time(evaluate_tree)
    t_stack = best_time(evaluate_via_transform_stack)
    print(f"agreement: max node delta {worst:.3e} (<= 1e-6)")
    print(f"{'backend':<24} {'segments':>9} {'total_s':>10} {'us_per_seg':>11}")
    for name, t in (
        ("derivative-accumulation", t_fast),
        ("transform-stack", t_stack),
    ):
        print(f"{name:<24} {segments:>9} {t:>10.4f} {1e6 * t / segments:>11.3f}")
    print(f"ratio (transform-stack / derivative-accumulation): {t_stack / t_fast:.2f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="dendrite",
        description="Evaluate, analyze, compose and export analytic tree fractals.",
    )
    ap.add_argument("--version", action="version", version=f"dendrite {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("input", type=Path, help="tree program (.ftree) or coordinate CSV")
        p.add_argument("--delta-s", type=float, default=None, help="override the grid step")
        p.add_argument("--s-max", type=float, default=None, help="override the domain end (needs --delta-s)")
        p.add_argument("--generations", type=int, default=None, help="truncate the tree depth")
        p.add_argument("--branches", default=None, help="branch rule for CSV input, e.g. 'every(1)'")

    r = sub.add_parser("render", help="evaluate and export svg/stl/json")
    add_common(r)
    r.add_argument("-o", "--output", type=Path, required=True)
    r.add_argument("--format", dest="fmt", choices=("svg", "stl", "json"), default=None)
    r.add_argument("--tube-segments", type=int, default=12, help="cross-section sides for stl")
    r.add_argument("--tube-radius", default="width", help="accessory channel or constant radius")
    r.add_argument("--gain", type=float, default=None, help="perimeter feedback gain")
    r.add_argument("--falloff", type=float, default=0.5, help="perimeter feedback falloff distance")
    r.add_argument("--perimeter", type=Path, default=None, help="closed boundary CSV (x,y header)")

    a = sub.add_parser("analyze", help="classification, bounding radius, box dimension")
    add_common(a)
    a.add_argument("--json", dest="json_mode", action="store_true")
    a.add_argument("--box-dim", dest="box_dim", action="store_true")

    c = sub.add_parser("compare", help="canopy equivalence of two trees")
    c.add_argument("input_a", type=Path)
    c.add_argument("input_b", type=Path)
    c.add_argument("--delta-s", type=float, default=None)
    c.add_argument("--generations", type=int, default=None)

    b = sub.add_parser("bench", help="time both evaluation backends on one spec")
    add_common(b)
    b.add_argument("--repeat", type=int, default=3)
    return ap


def _config_from(args, **extra) -> RunConfig:
    cfg = RunConfig(
        input=args.input,
        delta_s=getattr(args, "delta_s", None),
        s_max=getattr(args, "s_max", None),
        generations=getattr(args, "generations", None),
        branches=getattr(args, "branches", None),
        node_cap=_node_cap_from_env(),
        **extra,
    )
    if cfg.input.suffix.lower() not in (".ftree", ".csv"):
        raise CliFailure(
            EXIT_CONFIG, f"input must be a .ftree program or a .csv file, got {cfg.input}"
        )
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "render":
            cfg = _config_from(
                args,
                output=args.output,
                fmt=args.fmt,
                tube_segments=args.tube_segments,
                tube_radius=args.tube_radius,
                gain=args.gain,
                falloff=args.falloff,
                perimeter=args.perimeter,
            )
            return cmd_render(cfg)
        if args.command == "analyze":
            cfg = _config_from(args, json_mode=args.json_mode, box_dim=args.box_dim)
            return cmd_analyze(cfg)
        if args.command == "compare":
            cap = _node_cap_from_env()
            cfg_a = RunConfig(input=args.input_a, delta_s=args.delta_s, node_cap=cap)
            cfg_b = RunConfig(input=args.input_b, delta_s=args.delta_s, node_cap=cap)
            return cmd_compare(cfg_a, cfg_b, args.generations)
        if args.command == "bench":
            cfg = _config_from(args)
            return cmd_bench(cfg, args.repeat)
        raise CliFailure(EXIT_CONFIG, f"unknown command {args.command!r}")
    except CliFailure as f:
        print(f"error: {f.message}", file=sys.stderr)
        return f.code
    except DendriteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EVAL


if __name__ == "__main__":
    sys.exit(main())
