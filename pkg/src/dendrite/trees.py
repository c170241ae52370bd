"""Tree evaluation and analysis on top of derivative coordinates.

Branching works by multiplying an angular rate by a per-branch sign (or,
for wider forks, an evenly spaced multiplier in [-1, +1]).  At every fork
the multiplier set is re-applied per child, so a subtree forks afresh
rather than inheriting a global mirror; whole-tree symmetry then holds as
a set property over sign sequences.

Trees never carry a trunk: the root itself forks, and the first segment
runs from s_min to the first interior branch point.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .curves import (
    DerivativeCoords,
    PathPolyline,
    Pose,
    SGrid,
    _integrate_arrays,
)
from .errors import EvaluationError, GridError, NodeBudgetError, TopologyError

__all__ = [
    "BranchPointSet",
    "ForkSchedule",
    "TreeSpec",
    "TreeNode",
    "TreeEdge",
    "EvaluatedTree",
    "SimilarityReport",
    "EquivalenceReport",
    "branch_multipliers",
    "evaluate_tree",
    "evaluate_via_transform_stack",
    "bounding_radius",
    "classify_self_similarity",
    "canopy_scale",
    "compare_canopies",
    "estimate_box_dimension",
    "DEFAULT_NODE_CAP",
]

DEFAULT_NODE_CAP = 2**20

EXACT_FRACTAL = "exact_fractal"
QUASI_FRACTAL = "quasi_fractal"
NON_FRACTAL = "non_fractal"


@dataclass
class BranchPointSet:
    """Strictly increasing s values where a tree forks, snapped to the grid."""

    points: np.ndarray
    grid: SGrid

    def __post_init__(self):
        pts = np.atleast_1d(np.asarray(self.points, dtype=float))
        snapped = np.empty_like(pts)
        span = self.grid.s_max - self.grid.s_min
        for k, p in enumerate(pts):
            if p < self.grid.s_min or p > self.grid.s_max:
                raise GridError(
                    f"branch point {p} outside [{self.grid.s_min}, {self.grid.s_max}]"
                )
            i = self.grid.index_of(p)
            snapped[k] = self.grid.s_min + i * self.grid.delta_s
            if abs(snapped[k] - p) > 1e-9 * max(1.0, span):
                warnings.warn(
                    f"branch point {p} moved to grid sample {snapped[k]}",
                    stacklevel=3,
                )
        if len(snapped) > 1 and np.any(np.diff(snapped) <= 0):
            raise GridError("branch points must be strictly increasing after snapping")
        self.points = snapped

    def indices(self) -> np.ndarray:
        return np.round((self.points - self.grid.s_min) / self.grid.delta_s).astype(int)

    def __len__(self) -> int:
        return len(self.points)

    def contains(self, s: float) -> bool:
        i = self.grid.index_of(s)
        return i in set(self.indices())


@dataclass
class ForkSchedule:
    """Fork arity (and the angular axis it signs) per generation, cycled."""

    arity_per_generation: tuple = (2,)
    dimension_axis_per_generation: tuple | None = None

    def __post_init__(self):
        self.arity_per_generation = tuple(int(a) for a in self.arity_per_generation)
        if not self.arity_per_generation:
            raise GridError("fork schedule needs at least one arity")
        if any(a < 2 for a in self.arity_per_generation):
            raise GridError("fork arities must be >= 2")
        if self.dimension_axis_per_generation is not None:
            self.dimension_axis_per_generation = tuple(
                int(a) for a in self.dimension_axis_per_generation
            )

    def arity(self, generation: int) -> int:
        a = self.arity_per_generation
        return a[generation % len(a)]

    def axis(self, generation: int, fallback: int = 0) -> int:
        ax = self.dimension_axis_per_generation
        if ax is None:
            return fallback
        return ax[generation % len(ax)]


def branch_multipliers(branch_set: BranchPointSet, s: float, arity: int = 2):
    """Multiplier values at s, or None when s sits on a branch point.

    Between branch points the function is multivalued: +1 and -1 for a
    binary fork, and for arity m the evenly spaced values 1 - 2j/(m-1).
    On a branch point it is single-valued zero, which we signal as None.
    """
    if arity < 2:
        raise GridError(f"arity must be >= 2, got {arity}")
    if branch_set.contains(s):
        return None
    return _multipliers(arity)


def _multipliers(arity: int) -> tuple:
    if arity == 1:  # unforked lead-in segment
        return (1.0,)
    return tuple(1.0 - 2.0 * j / (arity - 1) for j in range(arity))


@dataclass
class TreeSpec:
    """Everything needed to evaluate a tree: coords, forks and truncation."""

    coords: DerivativeCoords
    branch_sets: tuple = ()
    forks: ForkSchedule = field(default_factory=ForkSchedule)
    max_generations: int = 8

    def __post_init__(self):
        if isinstance(self.branch_sets, BranchPointSet):
            self.branch_sets = (self.branch_sets,)
        self.branch_sets = tuple(self.branch_sets)
        for bs in self.branch_sets:
            if not bs.grid.compatible(self.coords.grid):
                raise GridError("branch set grid does not match coordinate grid")
        if self.max_generations < 1:
            raise GridError("max_generations must be >= 1")
        if self.forks.dimension_axis_per_generation is not None:
            if any(
                not (0 <= ax <= self.coords.dim - 2)
                for ax in self.forks.dimension_axis_per_generation
            ):
                raise GridError("fork axis outside the angular coordinates")

    @property
    def grid(self) -> SGrid:
        return self.coords.grid

    @property
    def dim(self) -> int:
        return self.coords.dim

    def is_tree(self) -> bool:
        return any(len(bs) for bs in self.branch_sets)

    def fork_events(self):
        """(sample_index, owning_axis) per fork, sorted by index.

        Canonical trees carry their first branch point at s_min, so the
        root forks immediately and there is no trunk.  A first branch point
        above s_min leaves a single unforked lead-in segment instead (the
        natural shape for sequenced compositions).
        """
        last = self.grid.count - 1
        by_index: dict[int, int] = {}
        for axis, bs in enumerate(self.branch_sets):
            for i in bs.indices():
                if i < last and int(i) not in by_index:
                    by_index[int(i)] = axis
        return sorted(by_index.items())

    def interval_bounds(self):
        """Sample indices delimiting branch intervals, for the analyzers.

        Starts at the domain start whether or not it forks, then every fork
        index, then the domain end.
        """
        idx = [i for i, _ in self.fork_events()]
        if not idx or idx[0] != 0:
            idx = [0] + idx
        return idx + [self.grid.count - 1]

    def segments(self):
        """(start_idx, end_idx, arity, axis) per segment, truncated.

        A leading trunk (when s_min is not a branch point) appears as an
        arity-1 segment that does not consume a fork generation.
        """
        forks = self.fork_events()
        if not forks:
            return []
        last = self.grid.count - 1
        bounds = [i for i, _ in forks] + [last]
        trunk = bounds[0] != 0
        if trunk:
            bounds = [0] + bounds
        out = []
        gen = 0
        for k in range(len(bounds) - 1):
            if trunk and k == 0:
                out.append((bounds[0], bounds[1], 1, 0))
                continue
            if gen >= self.max_generations:
                break
            axis = self.forks.axis(gen, fallback=forks[k - (1 if trunk else 0)][1])
            if axis > self.dim - 2:
                raise GridError(f"fork axis {axis} invalid for dim {self.dim}")
            out.append((bounds[k], bounds[k + 1], self.forks.arity(gen), axis))
            gen += 1
        return out

    def generations(self) -> int:
        return len(self.segments())

    def planned_node_count(self) -> int:
        total, width = 0, 1
        for _, _, arity, _ in self.segments():
            width *= arity
            total += width
        return total


@dataclass
class TreeNode:
    id: tuple
    position: np.ndarray
    pose: Pose
    s: float


@dataclass
class TreeEdge:
    child_id: tuple
    polyline: PathPolyline


@dataclass
class EvaluatedTree:
    """Geometric realization: a root plus one node and polyline per branch.

    Nodes exclude the root (they correspond 1:1 with edges, each being the
    edge's endpoint) and are listed in lexicographic BranchId order.
    """

    root: TreeNode
    nodes: list
    edges: list
    dim: int
    spec: TreeSpec | None = None

    def node_by_id(self, branch_id) -> TreeNode:
        key = tuple(branch_id)
        if key == ():
            return self.root
        for n in self.nodes:
            if n.id == key:
                return n
        raise KeyError(f"no node {key}")

    def node_positions(self) -> np.ndarray:
        return np.array([n.position for n in self.nodes])

    def generations(self) -> int:
        return max((len(n.id) for n in self.nodes), default=0)

    def ids_at_generation(self, g: int):
        return [n.id for n in self.nodes if len(n.id) == g]


def _walk_tree(spec: TreeSpec, start: Pose, integrate_segment, node_cap: int):
    """Shared fork recursion; geometry comes from integrate_segment.

    integrate_segment(i0, i1, start_pose, cum0, axis, multiplier) returns a
    PathPolyline whose first point is exactly the parent position.
    """
    if start.dim != spec.dim:
        raise GridError(f"start pose dim {start.dim} != spec dim {spec.dim}")
    root = TreeNode((), start.position.copy(), start, spec.grid.s_min)
    nodes: list[TreeNode] = []
    edges: list[TreeEdge] = []

    if not spec.is_tree():
        last = spec.grid.count - 1
        poly = integrate_segment(0, last, start, 0.0, 0, 1.0)
        nodes.append(TreeNode((0,), poly.points[-1], poly.end_pose(), spec.grid.s_max))
        edges.append(TreeEdge((0,), poly))
        return EvaluatedTree(root, nodes, edges, spec.dim, spec)

    segments = spec.segments()
    planned = spec.planned_node_count()
    if planned > node_cap:
        raise NodeBudgetError(
            f"tree would evaluate {planned} nodes, over the cap of {node_cap} "
            "(see DENDRITE_MAX_NODES)"
        )
    samples = spec.grid.samples()

    def recurse(branch_id, pose, cum0, generation):
        if generation >= len(segments):
            return
        i0, i1, arity, axis = segments[generation]
        for j, mult in enumerate(_multipliers(arity)):
            child_id = branch_id + (j,)
            poly = integrate_segment(i0, i1, pose, cum0, axis, mult)
            end = poly.end_pose()
            nodes.append(
                TreeNode(child_id, poly.points[-1], end, float(samples[i1]))
            )
            edges.append(TreeEdge(child_id, poly))
            recurse(child_id, end, poly.cum_arc[-1], generation + 1)

    recurse((), start, 0.0, 0)
    return EvaluatedTree(root, nodes, edges, spec.dim, spec)


def evaluate_tree(
    spec: TreeSpec, start: Pose | None = None, node_cap: int = DEFAULT_NODE_CAP
) -> EvaluatedTree:
    """Evaluate a tree by derivative accumulation (the fast backend).

    Each branch integrates the shared coordinates over its own s segment
    with the forked angular axis multiplied by the branch's value; children
    continue from the parent's end pose, so continuity is by construction.
    """
    if start is None:
        start = Pose.origin(spec.dim)
    grid = spec.grid
    radial = spec.coords.radial_values
    angular = spec.coords.angular_values

    def integrate_segment(i0, i1, pose, cum0, axis, mult):
        sl = slice(i0, i1 + 1)
        angs = [a[sl] for a in angular]
        if mult != 1.0:
            angs[axis] = angs[axis] * mult
        points, headings, cum = _integrate_arrays(
            radial[sl], angs, grid.delta_s, pose, cum0
        )
        return PathPolyline(points, headings, cum, grid.sub(i0, i1))

    return _walk_tree(spec, start, integrate_segment, node_cap)


def _rot2h(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _transl2h(dx: float, dy: float) -> np.ndarray:
    return np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])


def _rot3_z(phi: float) -> np.ndarray:
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot3_y(psi: float) -> np.ndarray:
    c, s = np.cos(psi), np.sin(psi)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def evaluate_via_transform_stack(
    spec: TreeSpec, start: Pose | None = None, node_cap: int = DEFAULT_NODE_CAP
) -> EvaluatedTree:
    """Evaluate a tree with an explicit matrix pipeline (oracle backend).

    2D keeps a homogeneous local-to-world frame and composes a rotate and a
    translate matrix per step; 3D rebuilds rotation matrices from the
    accumulated angles and applies rotate times scale to a unit axis per
    step.  Forks push and pop frames on an explicit stack.  Geometrically
    identical to evaluate_tree; exists as an independent cross-check and as
    the classical baseline for the benchmark.
    """
    if spec.dim not in (2, 3):
        raise GridError(f"transform-stack backend supports dim 2 or 3, got {spec.dim}")
    if start is None:
        start = Pose.origin(spec.dim)
    grid = spec.grid
    ds = grid.delta_s
    radial = spec.coords.radial_values
    angular = spec.coords.angular_values

    if spec.dim == 2:

        def integrate_segment(i0, i1, pose, cum0, axis, mult):
            frame = _transl2h(*pose.position) @ _rot2h(pose.heading[0])
            n = i1 - i0 + 1
            points = np.empty((n, 2))
            headings = np.empty((n, 1))
            cum = np.empty(n)
            points[0] = pose.position
            headings[0] = pose.heading
            cum[0] = cum0
            for k in range(i0, i1):
                j = k - i0 + 1
                frame = frame @ _rot2h(mult * angular[0][k] * ds)
                frame = frame @ _transl2h(radial[k] * ds, 0.0)
                points[j] = frame[:2, 2]
                cum[j] = cum[j - 1] + radial[k] * ds
            # the matrix cannot carry winding count, so headings are kept
            # as plain turn sums alongside it
            headings[1:, 0] = pose.heading[0] + mult * np.cumsum(angular[0][i0:i1]) * ds
            return PathPolyline(points, headings, cum, grid.sub(i0, i1))

    else:

        def integrate_segment(i0, i1, pose, cum0, axis, mult):
            n = i1 - i0 + 1
            points = np.empty((n, 3))
            headings = np.empty((n, 2))
            cum = np.empty(n)
            points[0] = pose.position
            headings[0] = pose.heading
            cum[0] = cum0
            pos = pose.position.copy()
            phi, psi = float(pose.heading[0]), float(pose.heading[1])
            e_z = np.array([0.0, 0.0, 1.0])
            for k in range(i0, i1):
                j = k - i0 + 1
                dphi = angular[0][k] * ds
                dpsi = angular[1][k] * ds
                if axis == 0:
                    dphi *= mult
                else:
                    dpsi *= mult
                phi += dphi
                psi += dpsi
                scale = np.eye(3) * (radial[k] * ds)
                step = _rot3_z(phi) @ _rot3_y(psi) @ scale @ e_z
                pos = pos + step
                points[j] = pos
                headings[j] = (phi, psi)
                cum[j] = cum[j - 1] + radial[k] * ds
            return PathPolyline(points, headings, cum, grid.sub(i0, i1))

    return _walk_tree(spec, start, integrate_segment, node_cap)


def _branch_arc_sums(spec: TreeSpec) -> np.ndarray:
    """Riemann sum of the radial rate over every branch interval."""
    bounds = spec.interval_bounds()
    r = spec.coords.radial_values
    ds = spec.grid.delta_s
    return np.array(
        [float(np.sum(r[a:b]) * ds) for a, b in zip(bounds[:-1], bounds[1:])]
    )


def bounding_radius(spec: TreeSpec, extrapolate: bool = True) -> float:
    """Straightest-path length; a circle of this radius bounds the tree.

    When consecutive branch lengths decay by a stable geometric ratio in
    (0, 1) the bound is extrapolated to the infinite tree (the truncated
    sum is always below it); otherwise the plain domain sum is returned.
    """
    total = float(np.sum(spec.coords.radial_values[:-1]) * spec.grid.delta_s)
    if not (extrapolate and spec.is_tree()):
        return total
    sums = _branch_arc_sums(spec)
    if len(sums) < 2 or np.any(sums <= 0):
        return total
    ratios = sums[1:] / sums[:-1]
    rho = float(ratios[0])
    if 0.0 < rho < 1.0 and np.all(np.abs(ratios - rho) <= 1e-9 * max(rho, 1e-30)):
        return float(sums[0] / (1.0 - rho))
    return total


@dataclass
class SimilarityReport:
    classification: str
    rho: float | None
    rho_condition_met: bool
    phi_condition_met: bool
    equidistant_met: bool
    tolerance_used: float
    pattern_period: int | None = None


def _interval_pattern_period(lengths) -> int | None:
    """Smallest stride at which interval sample-counts repeat; None if none."""
    k = len(lengths)
    for period in range(1, k):
        if k < 2 * period:
            break
        if all(lengths[i] == lengths[i + period] for i in range(k - period)):
            return period
    return None


def classify_self_similarity(spec: TreeSpec, tolerance: float = 1e-6) -> SimilarityReport:
    """Test the self-similarity conditions over consecutive branch intervals.

    exact: every interval's radial rate is a fixed multiple (0 < rho < 1) of
    its predecessor's, the angular program repeats verbatim, and the branch
    points are equidistant (or their interval lengths repeat periodically,
    which we accept as the relaxed form of the same condition).
    quasi: exactly one of the radial / angular conditions holds.
    """
    bounds = spec.interval_bounds()
    if len(bounds) < 3:
        raise GridError(
            "self-similarity needs at least three branch points "
            "(two consecutive intervals)"
        )
    lengths = [b - a for a, b in zip(bounds[:-1], bounds[1:])]
    period = _interval_pattern_period(lengths)
    equidistant = period == 1
    stride = period if period is not None else 1

    r = spec.coords.radial_values
    phi = spec.coords.angular_values[0]

    rho_vals = []
    rho_ok = True
    phi_ok = True
    for i in range(len(lengths) - stride):
        a0, b0 = bounds[i], bounds[i + 1]
        a1, b1 = bounds[i + stride], bounds[i + stride + 1]
        n = min(b0 - a0, b1 - a1)
        prev_r, next_r = r[a0 : a0 + n], r[a1 : a1 + n]
        prev_p, next_p = phi[a0 : a0 + n], phi[a1 : a1 + n]

        denom = float(np.sum(prev_r))
        if denom <= 0:
            rho_ok = False
        else:
            rho_i = float(np.sum(next_r)) / denom
            scale = max(float(np.max(np.abs(prev_r))) * max(abs(rho_i), 1.0), 1e-300)
            if rho_i <= 0 or np.max(np.abs(next_r - rho_i * prev_r)) > tolerance * scale:
                rho_ok = False
            elif not (rho_i < 1.0):
                rho_ok = False
            else:
                rho_vals.append(rho_i)

        pscale = max(float(np.max(np.abs(prev_p))), 1e-12)
        if np.max(np.abs(next_p - prev_p)) > tolerance * pscale:
            phi_ok = False

    rho = None
    rho_constant = False
    if rho_ok and rho_vals:
        rho = float(rho_vals[0])
        rho_constant = all(abs(v - rho) <= tolerance * max(rho, 1e-30) for v in rho_vals)

    if rho_ok and phi_ok and rho_constant and period is not None and rho is not None:
        classification = EXACT_FRACTAL
    elif rho_ok != phi_ok:
        classification = QUASI_FRACTAL
    else:
        classification = NON_FRACTAL
    return SimilarityReport(
        classification=classification,
        rho=rho,
        rho_condition_met=rho_ok,
        phi_condition_met=phi_ok,
        equidistant_met=equidistant,
        tolerance_used=tolerance,
        pattern_period=period,
    )


def canopy_scale(tree_a: EvaluatedTree, tree_b: EvaluatedTree) -> float:
    """Size ratio of two trees from their first root-to-fork chords."""
    for t in (tree_a, tree_b):
        if t.generations() < 2:
            raise TopologyError("canopy scale needs trees with >= 2 generations")
    da = np.linalg.norm(tree_a.node_by_id((0,)).position - tree_a.root.position)
    db = np.linalg.norm(tree_b.node_by_id((0,)).position - tree_b.root.position)
    if da == 0.0 or db == 0.0:
        raise EvaluationError("degenerate zero distance between branch nodes")
    return float(da / db)


@dataclass
class EquivalenceReport:
    scale: float
    per_generation_distance: list
    fitted_rho: float
    converged: bool


def _chord_bisector_angle(tree: EvaluatedTree) -> float:
    """Direction of the mean first-generation chord (the fork symmetry line)."""
    root = tree.root.position
    vecs = [
        tree.node_by_id(i).position - root for i in tree.ids_at_generation(1)
    ]
    mean = np.mean([v / np.linalg.norm(v) for v in vecs], axis=0)
    if np.linalg.norm(mean) < 1e-9:
        return float(tree.root.pose.heading[0])
    return float(np.arctan2(mean[1], mean[0]))


def _per_branch_turns(spec: TreeSpec) -> np.ndarray:
    bounds = spec.interval_bounds()
    phi = spec.coords.angular_values[0]
    ds = spec.grid.delta_s
    return np.array(
        [float(np.sum(phi[a:b]) * ds) for a, b in zip(bounds[:-1], bounds[1:])]
    )


def compare_canopies(
    tree_a: EvaluatedTree, tree_b: EvaluatedTree, generations: int
) -> EquivalenceReport:
    """Measure how the two canopies converge onto each other (2D).

    tree_b is scaled by canopy_scale and aligned by rotation and
    translation so the first-generation fork symmetry lines coincide.
    The generation-i distance is taken between corresponding nodes in the
    frame of their parent pair (parents and parent headings overlaid),
    which is how the per-branch overlay construction reads; distances then
    shrink by the common ratio per generation when the equivalence
    hypotheses hold.
    """
    for t in (tree_a, tree_b):
        if t.dim != 2:
            raise TopologyError("canopy comparison is 2D-only")
        if t.spec is None:
            raise TopologyError("canopy comparison needs trees evaluated from specs")
    ids_a = {n.id for n in tree_a.nodes}
    ids_b = {n.id for n in tree_b.nodes}
    if ids_a != ids_b:
        raise TopologyError("trees do not share branch topology")
    if generations < 2 or generations > tree_a.generations():
        raise TopologyError(
            f"generations must be in [2, {tree_a.generations()}], got {generations}"
        )
    for name, t in (("first", tree_a), ("second", tree_b)):
        rep = classify_self_similarity(t.spec)
        if rep.classification != EXACT_FRACTAL:
            raise TopologyError(
                f"{name} tree is {rep.classification}, not an exact self-similar fractal"
            )

    scale = canopy_scale(tree_a, tree_b)
    root_a = tree_a.root.position
    root_b = tree_b.root.position
    theta = _chord_bisector_angle(tree_a) - _chord_bisector_angle(tree_b)
    c, s = np.cos(theta), np.sin(theta)
    R = np.array([[c, -s], [s, c]])

    def b_aligned(node):
        return root_a + scale * (R @ (node.position - root_b))

    def b_heading(node):
        return float(node.pose.heading[0]) + theta

    pos_a = {(): root_a}
    head_a = {(): float(tree_a.root.pose.heading[0])}
    pos_b = {(): b_aligned(tree_b.root)}
    head_b = {(): b_heading(tree_b.root)}
    for n in tree_a.nodes:
        pos_a[n.id] = n.position
        head_a[n.id] = float(n.pose.heading[0])
    for n in tree_b.nodes:
        pos_b[n.id] = b_aligned(n)
        head_b[n.id] = b_heading(n)

    distances = []
    for g in range(1, generations + 1):
        worst = 0.0
        for node_id in tree_a.ids_at_generation(g):
            parent = node_id[:-1]
            va = pos_a[node_id] - pos_a[parent]
            vb = pos_b[node_id] - pos_b[parent]
            dtheta = head_a[parent] - head_b[parent]
            cc, ss = np.cos(dtheta), np.sin(dtheta)
            vb = np.array([cc * vb[0] - ss * vb[1], ss * vb[0] + cc * vb[1]])
            worst = max(worst, float(np.linalg.norm(va - vb)))
        distances.append(worst)

    arr = np.array(distances)
    atol = 1e-12 * max(1.0, float(np.linalg.norm(root_a - pos_a[(0,)])))
    if np.all(arr < atol):
        fitted_rho, monotone = 0.0, True
    else:
        positive = arr > 0
        if positive.sum() >= 2:
            gs = np.flatnonzero(positive) + 1.0
            slope = np.polyfit(gs, np.log(arr[positive]), 1)[0]
            fitted_rho = float(np.exp(slope))
        else:
            fitted_rho = 1.0
        monotone = bool(np.all(arr[1:] <= arr[:-1] * (1 + 1e-9)))

    turns_a = _per_branch_turns(tree_a.spec)
    turns_b = _per_branch_turns(tree_b.spec)
    n = min(len(turns_a), len(turns_b))
    equal_turns = bool(
        np.max(np.abs(turns_a[:n] - turns_b[:n]))
        <= 1e-6 * max(1.0, float(np.max(np.abs(turns_a[:n]))))
    )

    converged = monotone and (0.0 <= fitted_rho < 1.0) and equal_turns
    return EquivalenceReport(
        scale=scale,
        per_generation_distance=distances,
        fitted_rho=fitted_rho,
        converged=converged,
    )


def estimate_box_dimension(tree: EvaluatedTree, scales) -> float:
    """Box-counting dimension of a 2D tree from its edge polylines.

    Counts occupied grid boxes at each scale and fits the slope of
    log N against log(1/eps).  Polyline sampling must be dense relative
    to the smallest scale.
    """
    if tree.dim != 2:
        raise GridError("box counting implemented for 2D trees")
    eps = sorted({float(e) for e in scales})
    if len(eps) < 2:
        raise GridError("need at least two distinct scales")
    pts = np.concatenate([e.polyline.points for e in tree.edges])
    origin = pts.min(axis=0)
    max_step = max(
        float(np.max(np.linalg.norm(np.diff(e.polyline.points, axis=0), axis=1)))
        for e in tree.edges
    )
    if max_step > min(eps):
        warnings.warn(
            f"polyline steps up to {max_step:.3g} exceed the smallest box "
            f"{min(eps):.3g}; counts may undershoot",
            stacklevel=2,
        )
    extent = pts.max(axis=0) - origin
    counts = []
    for e in eps:
        cells = np.floor((pts - origin) / e).astype(np.int64)
        # points on the far edge belong to the last genuine box
        hi = np.maximum(np.ceil(extent / e).astype(np.int64) - 1, 0)
        np.minimum(cells, hi, out=cells)
        keys = cells[:, 0] * 2_000_003 + cells[:, 1]
        counts.append(len(np.unique(keys)))
    x = np.log(1.0 / np.array(eps))
    y = np.log(np.array(counts, dtype=float))
    return float(np.polyfit(x, y, 1)[0])
