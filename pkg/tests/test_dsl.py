import math
from pathlib import Path

import numpy as np
import pytest

from dendrite import DslError, SGrid
from dendrite.dsl import compile_program, compile_source, format_program, parse
from dendrite.trees import (
    EXACT_FRACTAL,
    bounding_radius,
    classify_self_similarity,
)

PROGRAMS = Path(__file__).resolve().parent.parent / "programs"
INVALID = Path(__file__).resolve().parent / "fixtures" / "invalid"

MINIMAL = """
tree t {
  dim: 2;
  s_max: 2;
  delta_s: 1/8;
  dr: 1;
  dphi: 0.5;
  branches: every(1);
}
"""


# ----------------------------------------------------------------- parse


def test_parse_minimal_program():
    p = parse(MINIMAL)
    assert p.names() == ["t"]
    assert p.entry == "t"  # single tree block serves as the entry
    tree = p.get("t")
    assert "dr" in tree.coords and "dphi" in tree.coords


def test_parse_concat_definition():
    p = parse("a = b << c << d;")
    d = p.definitions[0]
    # left-associative chain: (b << c) << d
    assert type(d.expr).__name__ == "Concat"
    assert type(d.expr.left).__name__ == "Concat"
    assert d.expr.right.id == "d"


def test_parse_unknown_identifier_is_compile_diagnostic():
    src = (INVALID / "unknown_ident.ftree").read_text()
    program = parse(src)  # syntactically fine
    with pytest.raises(DslError) as err:
        compile_program(program, source=src)
    (diag,) = err.value.diagnostics
    assert "wobble" in diag.message
    assert diag.line == 5
    assert diag.column == 7
    assert "wobble" in diag.excerpt


def test_parse_collects_multiple_errors():
    src = "tree t {\n  dim 2;\n  dr: ;\n}\nmain = ;\n"
    with pytest.raises(DslError) as err:
        parse(src)
    assert len(err.value.diagnostics) >= 2
    for d in err.value.diagnostics:
        assert d.line >= 1 and d.column >= 1
        assert d.excerpt in src.splitlines()[d.line - 1] or d.excerpt == src.splitlines()[d.line - 1]


@pytest.mark.parametrize("name", sorted(p.name for p in INVALID.glob("*.ftree")))
def test_invalid_fixture_produces_positioned_diagnostic(name):
    src = (INVALID / name).read_text()
    with pytest.raises(DslError) as err:
        compile_source(src)
    assert err.value.diagnostics
    for d in err.value.diagnostics:
        lines = src.splitlines()
        assert 1 <= d.line <= len(lines)
        assert 1 <= d.column <= len(lines[d.line - 1]) + 1


# ----------------------------------------------------------------- format


@pytest.mark.parametrize("path", sorted(PROGRAMS.glob("*.ftree")))
def test_format_round_trip_on_shipped_programs(path):
    src = path.read_text()
    p1 = parse(src)
    text1 = format_program(p1)
    p2 = parse(text1)
    assert p2 == p1  # structural equality, spans excluded
    assert format_program(p2) == text1  # idempotent


def test_format_preserves_leading_comments():
    src = "# the entry point\n# spans two lines\nmain = a << b;\ntree a { dr: 1; dphi: 0; }\ntree b { dr: 1; dphi: 0; }\n"
    out = format_program(parse(src))
    assert out.startswith("# the entry point\n# spans two lines\nmain = ")


def test_format_keeps_explicit_grouping():
    src = "x = a << (b << c);"
    out = format_program(parse(src))
    assert "a << (b << c)" in out
    again = format_program(parse(out))
    assert again == out


# ---------------------------------------------------------------- compile


def test_compile_smooth_program_classifies_exact():
    src = (PROGRAMS / "smooth_pi3.ftree").read_text()
    tree = compile_source(src)
    rep = classify_self_similarity(tree.spec)
    assert rep.classification == EXACT_FRACTAL
    assert rep.rho == pytest.approx(2.0 / 3.0, abs=1e-9)
    assert tree.spec.planned_node_count() == 510


def test_compile_straight_program_bound_is_three():
    src = (PROGRAMS / "straight_pi3.ftree").read_text()
    tree = compile_source(src)
    assert bounding_radius(tree.spec) == pytest.approx(3.0, abs=1e-6)
    rep = classify_self_similarity(tree.spec)
    assert rep.classification == EXACT_FRACTAL


def test_compile_negative_radial_rejected():
    with pytest.raises(DslError) as err:
        compile_source("tree t { s_max: 1; delta_s: 1/4; dr: -1; dphi: 0; }")
    assert "non-negative" in err.value.diagnostics[0].message


def test_compile_golden_alpha_value():
    src = (PROGRAMS / "golden_koch.ftree").read_text()
    tree = compile_source(src)
    alpha = -1.0 / (2.0 * math.cos(math.radians(144.0)))
    assert alpha == pytest.approx(0.6180339887498949)
    # first radial sample is alpha^0 = 1, one branch later it is alpha
    n = round(1.0 / tree.spec.grid.delta_s)
    assert tree.spec.coords.radial_values[0] == pytest.approx(1.0)
    assert tree.spec.coords.radial_values[n] == pytest.approx(alpha, abs=1e-12)


def test_compile_is_deterministic():
    src = (PROGRAMS / "hybrid_koch_h.ftree").read_text()
    a = compile_source(src)
    b = compile_source(src)
    assert np.array_equal(a.spec.coords.radial_values, b.spec.coords.radial_values)
    assert np.array_equal(
        a.spec.coords.angular_values[0], b.spec.coords.angular_values[0]
    )
    assert np.array_equal(a.spec.branch_sets[0].points, b.spec.branch_sets[0].points)


def test_compile_with_explicit_grid_overrides_hints():
    tree = compile_source(MINIMAL, grid=SGrid(0.0, 4.0, 1.0 / 16))
    assert tree.spec.grid.s_max == 4.0
    assert tree.spec.grid.delta_s == pytest.approx(1.0 / 16)
    assert len(tree.spec.branch_sets[0].points) == 4


def test_compile_delta_s_override():
    tree = compile_source(MINIMAL, delta_s=1.0 / 32)
    assert tree.spec.grid.delta_s == pytest.approx(1.0 / 32)
    assert tree.spec.grid.s_max == 2.0


def test_compile_missing_domain_is_diagnosed():
    with pytest.raises(DslError) as err:
        compile_source("tree t { dr: 1; dphi: 0; }")
    assert "s_max" in err.value.diagnostics[0].message


def test_compile_hybrid_program_concatenates():
    src = (PROGRAMS / "hybrid_koch_h.ftree").read_text()
    tree = compile_source(src)
    assert tree.spec.grid.s_max == pytest.approx(8.0)
    assert len(tree.junctions) == 1
    assert tree.junctions[0].s == pytest.approx(4.0)
    assert "width" in tree.accessories and "tint" in tree.accessories


def test_compile_cycle_detected():
    with pytest.raises(DslError) as err:
        compile_source("a = b;\nb = a;\nmain = a;")
    assert any("cycle" in d.message for d in err.value.diagnostics)


def test_compile_scalar_used_as_tree_is_diagnosed():
    with pytest.raises(DslError) as err:
        compile_source("k = 2;\nmain = k << k;")
    assert any("not a tree" in d.message for d in err.value.diagnostics)


def test_compile_piecewise_and_floor():
    src = """
tree t {
  dim: 2;
  s_max: 2;
  delta_s: 1/4;
  dr: piecewise((s < 1, 1), (s >= 1, 2));
  dphi: floor(s);
  branches: every(1);
}
"""
    tree = compile_source(src)
    r = tree.spec.coords.radial_values
    assert r[0] == 1.0 and r[3] == 1.0 and r[4] == 2.0 and r[-1] == 2.0
    assert tree.spec.coords.angular_values[0][0] == 0.0
    assert tree.spec.coords.angular_values[0][4] == 1.0


def test_compile_3d_block():
    src = (PROGRAMS / "spiral3d.ftree").read_text()
    tree = compile_source(src)
    assert tree.spec.dim == 3
    assert tree.accessories.names()[:3] == ["dr", "dphi", "dpsi"]
    assert tree.spec.forks.dimension_axis_per_generation == (0, 1, 0)
