import cmath
import math

import numpy as np
import pytest

from dendrite import DerivativeCoords, EvaluationError, GridError, Pose, SGrid, integrate_path
from dendrite.errors import NodeBudgetError, TopologyError
from dendrite.trees import (
    EXACT_FRACTAL,
    NON_FRACTAL,
    QUASI_FRACTAL,
    BranchPointSet,
    ForkSchedule,
    TreeSpec,
    bounding_radius,
    branch_multipliers,
    canopy_scale,
    classify_self_similarity,
    compare_canopies,
    estimate_box_dimension,
    evaluate_tree,
    evaluate_via_transform_stack,
)
from conftest import smooth_spec, straight_spec


# ------------------------------------------------------------- oracles


def straight_tree_positions(lengths, turn, root_heading):
    """Independent complex-number recursion for straight-line binary trees.

    Each branch id maps to its endpoint: z = sum of l_k * e^(i theta_k)
    where theta accumulates +-turn per generation (digit 0 -> +turn).
    """
    out = {}

    def rec(branch_id, z, theta, g):
        if g == len(lengths):
            return
        for digit, sign in ((0, +1.0), (1, -1.0)):
            t = theta + sign * turn
            zz = z + lengths[g] * cmath.exp(1j * t)
            out[branch_id + (digit,)] = zz
            rec(branch_id + (digit,), zz, t, g + 1)

    rec((), 0j, root_heading, 0)
    return out


# --------------------------------------------------- branch point sets


def test_branch_points_snap_with_warning():
    grid = SGrid(0.0, 2.0, 0.25)
    with pytest.warns(UserWarning, match="moved"):
        bs = BranchPointSet([0.6], grid)
    assert bs.points[0] == 0.5


def test_branch_points_validated():
    grid = SGrid(0.0, 2.0, 0.25)
    with pytest.raises(GridError):
        BranchPointSet([2.5], grid)
    with pytest.raises(GridError):
        BranchPointSet([0.5, 0.5], grid)


def test_branch_multipliers():
    grid = SGrid(0.0, 2.0, 0.25)
    bs = BranchPointSet([1.0], grid)
    assert branch_multipliers(bs, 1.0) is None  # single-valued node
    assert set(branch_multipliers(bs, 0.5)) == {1.0, -1.0}
    assert sorted(branch_multipliers(bs, 0.5, arity=3)) == [-1.0, 0.0, 1.0]
    with pytest.raises(GridError):
        branch_multipliers(bs, 5.0)


def test_fork_schedule_cycles():
    f = ForkSchedule((4, 2, 3))
    assert [f.arity(g) for g in range(6)] == [4, 2, 3, 4, 2, 3]
    with pytest.raises(GridError):
        ForkSchedule((1,))


# --------------------------------------------------------- evaluation


def test_no_branches_reduces_to_integrate_path():
    grid = SGrid(0.0, 2.0, 0.01)
    rng = np.random.default_rng(2)
    coords = DerivativeCoords.from_arrays(
        0.5 + rng.random(grid.count), [rng.standard_normal(grid.count)], grid
    )
    spec = TreeSpec(coords, (), max_generations=4)
    tree = evaluate_tree(spec)
    path = integrate_path(coords)
    assert len(tree.edges) == 1
    assert np.array_equal(tree.edges[0].polyline.points, path.points)
    assert np.array_equal(tree.edges[0].polyline.cum_arc, path.cum_arc)


def test_straight_binary_tree_matches_complex_oracle():
    gens = 4
    spec = straight_spec(generations=gens, steps_per_branch=8)
    tree = evaluate_tree(spec, Pose([0.0, 0.0], [np.pi / 2]))
    lengths = [(2.0 / 3.0) ** g for g in range(gens)]
    expected = straight_tree_positions(lengths, np.pi / 3, np.pi / 2)
    assert len(tree.nodes) == sum(2**g for g in range(1, gens + 1))
    for node in tree.nodes:
        want = expected[node.id]
        assert node.position[0] == pytest.approx(want.real, abs=1e-12)
        assert node.position[1] == pytest.approx(want.imag, abs=1e-12)


def test_straight_tree_frozen_tip_value():
    # Two generations, lengths 1 and 2/3, turns -pi/3 each from heading pi/2:
    # the all-minus path lands on (1.4433756729740643, 0.1666666666666668).
    spec = straight_spec(generations=2, steps_per_branch=4)
    tree = evaluate_tree(spec, Pose([0.0, 0.0], [np.pi / 2]))
    tip = tree.node_by_id((1, 1)).position
    assert tip[0] == pytest.approx(1.4433756729740643, abs=1e-12)
    assert tip[1] == pytest.approx(0.1666666666666668, abs=1e-12)


def test_node_counts_and_order(smooth8):
    tree = evaluate_tree(smooth8)
    assert len(tree.nodes) == 510  # 2 + 4 + ... + 256
    ids = [e.child_id for e in tree.edges]
    assert ids == sorted(ids)  # canonical lexicographic order
    assert [n.id for n in tree.nodes] == ids


def test_continuity_children_start_at_parent(smooth8):
    tree = evaluate_tree(smooth8)
    pos = {(): tree.root.position}
    for n in tree.nodes:
        pos[n.id] = n.position
    for e in tree.edges:
        parent = pos[e.child_id[:-1]]
        assert np.max(np.abs(e.polyline.points[0] - parent)) <= 1e-12


def reflect_about_heading(points, origin, theta):
    # reflection across the line through origin at angle theta
    d = points - origin
    c, s = np.cos(2 * theta), np.sin(2 * theta)
    R = np.array([[c, s], [s, -c]])
    return origin + d @ R.T


def test_binary_tree_mirror_symmetry(smooth8):
    start = Pose([0.3, -0.2], [0.9])
    tree = evaluate_tree(smooth8, start)
    pts = tree.node_positions()
    mirrored = reflect_about_heading(pts, start.position, 0.9)
    a = pts[np.lexsort(np.round(pts, 7).T)]
    b = mirrored[np.lexsort(np.round(mirrored, 7).T)]
    assert np.max(np.abs(a - b)) <= 1e-9


def test_three_way_fork_has_straight_middle():
    grid = SGrid(0.0, 2.0, 0.125)
    coords = DerivativeCoords.from_arrays(
        np.ones(grid.count), [np.full(grid.count, 0.6)], grid
    )
    spec = TreeSpec(coords, (BranchPointSet([0.0, 1.0], grid),), ForkSchedule((3,)), 2)
    tree = evaluate_tree(spec)
    assert len(tree.ids_at_generation(1)) == 3
    # middle child multiplies the turn by zero: straight along +x
    mid = tree.node_by_id((1,))
    assert mid.position[1] == pytest.approx(0.0, abs=1e-12)
    assert mid.position[0] == pytest.approx(1.0, abs=1e-12)


def test_mixed_arity_schedule():
    grid = SGrid(0.0, 3.0, 0.125)
    coords = DerivativeCoords.from_arrays(
        np.ones(grid.count), [np.full(grid.count, 0.4)], grid
    )
    spec = TreeSpec(
        coords, (BranchPointSet([0.0, 1.0, 2.0], grid),), ForkSchedule((4, 2, 3)), 3
    )
    tree = evaluate_tree(spec)
    assert len(tree.ids_at_generation(1)) == 4
    assert len(tree.ids_at_generation(2)) == 8
    assert len(tree.ids_at_generation(3)) == 24
    assert len(tree.nodes) == 4 + 8 + 24


def test_node_cap_enforced(smooth8):
    with pytest.raises(NodeBudgetError):
        evaluate_tree(smooth8, node_cap=100)


def test_max_generations_truncates():
    spec = smooth_spec(generations=8)
    spec.max_generations = 3
    tree = evaluate_tree(spec)
    assert tree.generations() == 3
    assert len(tree.nodes) == 2 + 4 + 8


def test_leading_trunk_when_smin_is_not_a_branch_point():
    # canonical trees fork at the root; a first branch point above s_min
    # leaves a single unforked lead-in instead
    grid = SGrid(0.0, 2.0, 0.125)
    coords = DerivativeCoords.from_arrays(
        np.ones(grid.count), [np.full(grid.count, 0.3)], grid
    )
    spec = TreeSpec(coords, (BranchPointSet([0.75, 1.5], grid),), max_generations=3)
    tree = evaluate_tree(spec)
    assert len(tree.ids_at_generation(1)) == 1  # the trunk
    assert tree.node_by_id((0,)).s == pytest.approx(0.75)
    assert sorted(tree.ids_at_generation(2)) == [(0, 0), (0, 1)]
    assert len(tree.ids_at_generation(3)) == 4


# ------------------------------------------------- transform-stack oracle


@pytest.mark.parametrize("builder", [smooth_spec, straight_spec])
def test_backends_agree_2d(builder):
    spec = builder(generations=6, steps_per_branch=16)
    a = evaluate_tree(spec, Pose([0.1, 0.2], [0.7]))
    b = evaluate_via_transform_stack(spec, Pose([0.1, 0.2], [0.7]))
    assert [n.id for n in a.nodes] == [n.id for n in b.nodes]
    for na, nb in zip(a.nodes, b.nodes):
        assert np.max(np.abs(na.position - nb.position)) < 1e-6


def test_backends_agree_identity_line():
    grid = SGrid(0.0, 1.0, 0.01)
    coords = DerivativeCoords.from_arrays(
        np.ones(grid.count), [np.zeros(grid.count)], grid
    )
    spec = TreeSpec(coords, ())
    a = evaluate_tree(spec)
    b = evaluate_via_transform_stack(spec)
    assert np.max(np.abs(a.edges[0].polyline.points - b.edges[0].polyline.points)) < 1e-9


def test_backends_agree_3d():
    grid = SGrid(0.0, 2.0, 0.0625)
    coords = DerivativeCoords.from_arrays(
        np.full(grid.count, 0.8),
        [np.full(grid.count, 0.9), np.full(grid.count, 0.35)],
        grid,
    )
    spec = TreeSpec(
        coords,
        (BranchPointSet([0.0, 1.0], grid),),
        ForkSchedule((2,), (0, 1)),
        2,
    )
    a = evaluate_tree(spec)
    b = evaluate_via_transform_stack(spec)
    assert len(a.nodes) == 2 + 4
    for na, nb in zip(a.nodes, b.nodes):
        assert np.max(np.abs(na.position - nb.position)) < 1e-6


def test_transform_stack_rejects_high_dims():
    grid = SGrid(0.0, 1.0, 0.25)
    coords = DerivativeCoords.from_arrays(
        np.ones(grid.count), [np.zeros(grid.count)] * 3, grid
    )
    with pytest.raises(GridError):
        evaluate_via_transform_stack(TreeSpec(coords, ()))


# ------------------------------------------------------ bounding radius


def test_bounding_radius_geometric_series():
    spec = straight_spec(generations=8, steps_per_branch=8)
    assert bounding_radius(spec) == pytest.approx(3.0, abs=1e-6)


def test_bounding_radius_plain_path():
    grid = SGrid(0.0, 2.0, 0.001)
    coords = DerivativeCoords.from_arrays(
        np.ones(grid.count), [np.zeros(grid.count)], grid
    )
    assert bounding_radius(TreeSpec(coords, ())) == pytest.approx(2.0)


def test_bounding_radius_golden_ratio():
    alpha = -1.0 / (2.0 * math.cos(math.radians(144.0)))
    spec = straight_spec(generations=10, steps_per_branch=8, ratio=alpha,
                         turn=math.radians(144.0))
    # geometric-series oracle: sum of alpha^k over all generations
    oracle = sum(alpha**k for k in range(10_000))
    assert bounding_radius(spec) == pytest.approx(oracle, rel=1e-9)
    assert bounding_radius(spec) == pytest.approx(1.0 / (1.0 - alpha), rel=1e-9)


def test_all_nodes_within_bound(smooth8):
    tree = evaluate_tree(smooth8)
    bound = bounding_radius(smooth8)
    slack = smooth8.grid.delta_s * float(np.max(smooth8.coords.radial_values))
    dist = np.linalg.norm(tree.node_positions() - tree.root.position, axis=1)
    assert float(dist.max()) <= bound + slack


# ------------------------------------------------------- classification


def test_classify_smooth_exact(smooth8):
    rep = classify_self_similarity(smooth8)
    assert rep.classification == EXACT_FRACTAL
    assert rep.rho == pytest.approx(2.0 / 3.0, abs=1e-9)
    assert rep.rho_condition_met and rep.phi_condition_met and rep.equidistant_met


def test_classify_straight_exact(straight8):
    rep = classify_self_similarity(straight8)
    assert rep.classification == EXACT_FRACTAL
    assert rep.rho == pytest.approx(2.0 / 3.0, abs=1e-9)


def test_classify_scale_invariance(smooth8):
    scaled = TreeSpec(
        DerivativeCoords.from_arrays(
            smooth8.coords.radial_values * 17.0,
            [smooth8.coords.angular_values[0]],
            smooth8.grid,
        ),
        smooth8.branch_sets,
        smooth8.forks,
        smooth8.max_generations,
    )
    a = classify_self_similarity(smooth8)
    b = classify_self_similarity(scaled)
    assert a.classification == b.classification == EXACT_FRACTAL
    assert b.rho == pytest.approx(a.rho, abs=1e-12)


def test_classify_perturbed_phi_is_quasi():
    spec = smooth_spec()
    dphi = spec.coords.angular_values[0].copy()
    n = 32
    dphi[3 * n : 4 * n] += 1e-3  # one interval off
    spec2 = TreeSpec(
        DerivativeCoords.from_arrays(spec.coords.radial_values, [dphi], spec.grid),
        spec.branch_sets,
        spec.forks,
        spec.max_generations,
    )
    rep = classify_self_similarity(spec2)
    assert rep.classification == QUASI_FRACTAL
    assert rep.rho_condition_met and not rep.phi_condition_met


def test_classify_rho_only_is_quasi():
    # radial scales by a constant; angular program differs across intervals
    grid = SGrid(0.0, 4.0, 0.125)
    s = grid.samples()
    dr = 0.5**s
    dphi = 0.3 + 0.2 * np.floor(s % 2)  # alternates per interval
    spec = TreeSpec(
        DerivativeCoords.from_arrays(dr, [dphi], grid),
        (BranchPointSet([0.0, 1.0, 2.0, 3.0], grid),),
        max_generations=4,
    )
    rep = classify_self_similarity(spec)
    assert rep.classification == QUASI_FRACTAL
    assert rep.rho_condition_met and not rep.phi_condition_met


def test_classify_arbitrary_branch_points_non_fractal():
    # same smooth coordinate functions, irregular never-repeating forks
    grid = SGrid(0.0, 8.0, 1.0 / 64)
    s = grid.samples()
    coords = DerivativeCoords.from_arrays(
        (2.0 / 3.0) ** s, [np.full(grid.count, np.pi / 3)], grid
    )
    bs = BranchPointSet([0.0, 0.5, 1.75, 2.25, 4.0, 6.5], grid)
    rep = classify_self_similarity(TreeSpec(coords, (bs,), max_generations=6))
    assert rep.classification == NON_FRACTAL
    assert rep.rho_condition_met and rep.phi_condition_met
    assert not rep.equidistant_met and rep.pattern_period is None


def test_classify_repeated_pattern_is_exact():
    # intervals of lengths 0.5, 1.0 repeated; radial halves once per period
    # (the domain end completes the final interval of the pattern)
    grid = SGrid(0.0, 4.5, 1.0 / 64)
    s = grid.samples()
    lam = math.log(0.5) / 1.5  # rho = 0.5 per 1.5-long period
    coords = DerivativeCoords.from_arrays(
        np.exp(lam * s), [np.full(grid.count, 0.7)], grid
    )
    pts = np.cumsum([0.0, 0.5, 1.0, 0.5, 1.0, 0.5])
    rep = classify_self_similarity(
        TreeSpec(coords, (BranchPointSet(pts, grid),), max_generations=6)
    )
    assert rep.classification == EXACT_FRACTAL
    assert rep.pattern_period == 2 and not rep.equidistant_met
    assert rep.rho == pytest.approx(0.5, abs=1e-9)


def test_classify_needs_enough_branch_points():
    grid = SGrid(0.0, 2.0, 0.125)
    coords = DerivativeCoords.from_arrays(
        np.ones(grid.count), [np.zeros(grid.count)], grid
    )
    with pytest.raises(GridError):
        classify_self_similarity(TreeSpec(coords, (BranchPointSet([0.0], grid),)))


# ------------------------------------------------------ canopy analysis


def test_canopy_scale_self_and_scaled(smooth8):
    tree = evaluate_tree(smooth8)
    assert canopy_scale(tree, tree) == pytest.approx(1.0)

    doubled = TreeSpec(
        DerivativeCoords.from_arrays(
            2.0 * smooth8.coords.radial_values,
            [smooth8.coords.angular_values[0]],
            smooth8.grid,
        ),
        smooth8.branch_sets,
        smooth8.forks,
        smooth8.max_generations,
    )
    big = evaluate_tree(doubled)
    assert canopy_scale(big, tree) == pytest.approx(2.0)
    assert canopy_scale(tree, big) * canopy_scale(big, tree) == pytest.approx(
        1.0, abs=1e-9
    )


def test_canopy_scale_smooth_vs_straight_matches_fine_oracle():
    # brute-force oracle: evaluate both very finely and take the chord ratio
    fine_a = evaluate_tree(smooth_spec(generations=2, steps_per_branch=4096))
    fine_b = evaluate_tree(straight_spec(generations=2, steps_per_branch=4096))
    oracle = np.linalg.norm(fine_a.node_by_id((0,)).position) / np.linalg.norm(
        fine_b.node_by_id((0,)).position
    )
    a = evaluate_tree(smooth_spec(generations=2, steps_per_branch=512))
    b = evaluate_tree(straight_spec(generations=2, steps_per_branch=512))
    assert canopy_scale(a, b) == pytest.approx(oracle, rel=1e-3)


def test_compare_canopies_identical(smooth8):
    tree = evaluate_tree(smooth8)
    rep = compare_canopies(tree, tree, generations=6)
    assert rep.scale == pytest.approx(1.0)
    assert np.max(rep.per_generation_distance) <= 1e-9
    assert rep.converged


def test_compare_canopies_smooth_vs_straight_tracks_ratio():
    gens = 8
    a = evaluate_tree(smooth_spec(generations=gens, steps_per_branch=2048))
    b = evaluate_tree(straight_spec(generations=gens, steps_per_branch=2048))
    rep = compare_canopies(a, b, generations=gens)
    d = rep.per_generation_distance
    assert rep.converged
    for i in range(2, gens + 1):
        ratio = d[i - 1] / d[0]
        assert ratio == pytest.approx((2.0 / 3.0) ** (i - 1), rel=0.10)


def test_compare_canopies_unequal_turns_not_converged():
    a = evaluate_tree(smooth_spec(generations=5, steps_per_branch=64, turn=np.pi / 3))
    b = evaluate_tree(smooth_spec(generations=5, steps_per_branch=64, turn=np.pi / 2))
    rep = compare_canopies(a, b, generations=5)
    assert not rep.converged


def test_compare_canopies_topology_mismatch():
    a = evaluate_tree(smooth_spec(generations=4, steps_per_branch=16))
    b = evaluate_tree(smooth_spec(generations=5, steps_per_branch=16))
    with pytest.raises(TopologyError):
        compare_canopies(a, b, generations=4)


def test_compare_canopies_requires_exact_input():
    grid = SGrid(0.0, 4.0, 1.0 / 32)
    s = grid.samples()
    coords = DerivativeCoords.from_arrays(
        (2.0 / 3.0) ** s, [np.full(grid.count, np.pi / 3)], grid
    )
    irregular = TreeSpec(
        coords, (BranchPointSet([0.0, 0.625, 1.9375, 2.8125], grid),), max_generations=4
    )
    t = evaluate_tree(irregular)
    good = evaluate_tree(smooth_spec(generations=4, steps_per_branch=32))
    with pytest.raises(TopologyError):
        compare_canopies(good, t, generations=4)


# ---------------------------------------------------------- box counting


def synthetic_tree_from_points(points):
    from dendrite.curves import PathPolyline
    from dendrite.trees import EvaluatedTree, TreeEdge, TreeNode

    pts = np.asarray(points, dtype=float)
    n = len(pts)
    grid = SGrid(0.0, float(n - 1), 1.0)
    poly = PathPolyline(pts, np.zeros((n, 1)), np.zeros(n), grid)
    root = TreeNode((), pts[0], Pose(pts[0], [0.0]), 0.0)
    node = TreeNode((0,), pts[-1], Pose(pts[-1], [0.0]), float(n - 1))
    return EvaluatedTree(root, [node], [TreeEdge((0,), poly)], 2, None)


def test_box_dimension_straight_segment():
    t = np.linspace(0.0, 1.0, 4001)
    tree = synthetic_tree_from_points(np.column_stack([t, 0.3 * t]))
    scales = [0.1 / 2**k for k in range(5)]
    d = estimate_box_dimension(tree, scales)
    assert abs(d - 1.0) <= 0.1


def test_box_dimension_filled_square():
    k = np.arange(500 * 500)
    col = k % 500
    row = k // 500
    col = np.where(row % 2 == 1, 499 - col, col)  # serpentine, no row jumps
    tree = synthetic_tree_from_points(np.column_stack([col / 499.0, row / 499.0]))
    scales = [0.2 / 2**k for k in range(5)]
    d = estimate_box_dimension(tree, scales)
    assert abs(d - 2.0) <= 0.1


def test_box_dimension_tree_in_fractal_range():
    tree = evaluate_tree(smooth_spec(generations=8, steps_per_branch=256))
    scales = [0.4 / 2**k for k in range(6)]
    d = estimate_box_dimension(tree, scales)
    assert 1.1 < d < 2.0


def test_box_dimension_needs_two_scales():
    tree = synthetic_tree_from_points(np.array([[0.0, 0.0], [1.0, 0.0]]))
    with pytest.raises(GridError):
        estimate_box_dimension(tree, [0.1])
