"""Accessory channels attached to trees, tree concatenation, and feedback.

A derivative accessory accumulates its rate along every root-to-tip path
(history-dependent, like the radial coordinate); an absolute accessory is
evaluated pointwise in s.  The coordinate rates themselves are carried as
reserved derivative channels (dr, dphi, dpsi, ...) whose materialized
values are the geometric primitives: cumulative arc and heading angles.

Concatenation sequences two trees over adjacent parameter domains and
picks the second tree's integration constant per derivative channel so
the integrated primitive crosses the junction without a jump; absolute
channels keep their step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .curves import DerivativeCoords, PathPolyline, Pose, ScalarFn, SGrid, _integrate_arrays
from .errors import EvaluationError, GridError, TopologyError
from .trees import (
    DEFAULT_NODE_CAP,
    BranchPointSet,
    EvaluatedTree,
    ForkSchedule,
    TreeSpec,
    _walk_tree,
    evaluate_tree,
)

__all__ = [
    "AccessoryFn",
    "AccessorySet",
    "EnhancedTree",
    "DecoratedTree",
    "PerimeterFeedback",
    "angle_channel_names",
    "evaluate_accessories",
    "concatenate",
    "perimeter_feedback",
]

DERIVATIVE = "derivative"
ABSOLUTE = "absolute"

DISTANCE_CHANNEL = "perimeter_distance"


def angle_channel_names(dim: int):
    names = ["dphi", "dpsi"] + [f"dv{k}" for k in range(3, dim)]
    return names[: dim - 1]


@dataclass
class AccessoryFn:
    name: str
    kind: str
    fn: ScalarFn
    units: str = ""

    def __post_init__(self):
        if self.kind not in (DERIVATIVE, ABSOLUTE):
            raise GridError(f"accessory kind must be derivative or absolute, got {self.kind!r}")


class AccessorySet:
    """Ordered, name-unique accessory functions; coordinate channels first."""

    def __init__(self, entries=()):
        self._entries: dict[str, AccessoryFn] = {}
        for e in entries:
            self.add(e)

    @classmethod
    def for_coords(cls, coords: DerivativeCoords) -> "AccessorySet":
        out = cls()
        out.add(AccessoryFn("dr", DERIVATIVE, coords.radial, units="length"))
        for name, fn in zip(angle_channel_names(coords.dim), coords.angular):
            out.add(AccessoryFn(name, DERIVATIVE, fn, units="radians"))
        return out

    def add(self, entry: AccessoryFn):
        if entry.name in self._entries:
            raise GridError(f"duplicate accessory name {entry.name!r}")
        self._entries[entry.name] = entry
        return self

    def __contains__(self, name):
        return name in self._entries

    def __getitem__(self, name) -> AccessoryFn:
        return self._entries[name]

    def __iter__(self):
        return iter(self._entries.values())

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def extras(self, dim: int):
        """Entries other than the reserved coordinate channels."""
        reserved = {"dr", *angle_channel_names(dim)}
        return [e for e in self if e.name not in reserved]


@dataclass
class PerimeterFeedback:
    """Steer the azimuthal rate away from (gain > 0) or toward a boundary."""

    perimeter: np.ndarray
    gain: float
    falloff: float

    def __post_init__(self):
        pts = np.asarray(self.perimeter, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
            raise GridError("perimeter must be a closed 2D polyline with >= 3 points")
        if np.allclose(pts[0], pts[-1]):
            pts = pts[:-1]
        if len(pts) < 3:
            raise GridError("degenerate perimeter")
        if _polygon_area(pts) == 0.0:
            raise GridError("degenerate perimeter (zero area)")
        if _self_intersects(pts):
            raise GridError("perimeter must be simple (non-self-intersecting)")
        if not (self.falloff > 0):
            raise GridError(f"falloff must be > 0, got {self.falloff}")
        self.perimeter = pts
        self._a = pts
        self._b = np.roll(pts, -1, axis=0)
        self._ab = self._b - self._a
        self._ab2 = np.maximum(np.einsum("ij,ij->i", self._ab, self._ab), 1e-300)

    def nearest(self, p):
        """(distance, nearest point) from p to the perimeter."""
        t = np.clip(np.einsum("ij,ij->i", p - self._a, self._ab) / self._ab2, 0.0, 1.0)
        proj = self._a + t[:, None] * self._ab
        d2 = np.einsum("ij,ij->i", proj - p, proj - p)
        k = int(np.argmin(d2))
        return float(np.sqrt(d2[k])), proj[k]


def _polygon_area(pts) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_cross(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if abs(v) < 1e-15 else (1 if v > 0 else -1)

    return (
        orient(p1, p2, p3) * orient(p1, p2, p4) < 0
        and orient(p3, p4, p1) * orient(p3, p4, p2) < 0
    )


def _self_intersects(pts) -> bool:
    n = len(pts)
    segs = [(pts[i], pts[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue  # adjacent around the wrap
            if _segments_cross(*segs[i], *segs[j]):
                return True
    return False


@dataclass
class EnhancedTree:
    """A tree spec plus its accessory functions and integration constants."""

    spec: TreeSpec | None
    accessories: AccessorySet = None
    continuity_constants: dict = field(default_factory=dict)
    feedback: PerimeterFeedback | None = None
    junctions: list = field(default_factory=list)

    def __post_init__(self):
        if self.spec is not None and self.accessories is None:
            self.accessories = AccessorySet.for_coords(self.spec.coords)
        for entry in self.accessories or ():
            if entry.kind == DERIVATIVE:
                self.continuity_constants.setdefault(entry.name, 0.0)

    @classmethod
    def empty(cls) -> "EnhancedTree":
        return cls(spec=None, accessories=AccessorySet())

    @property
    def is_empty(self) -> bool:
        return self.spec is None

    def with_accessory(self, name, kind, fn, units="", h=0.0) -> "EnhancedTree":
        self.accessories.add(AccessoryFn(name, kind, fn, units))
        if kind == DERIVATIVE:
            self.continuity_constants[name] = h
        return self


@dataclass
class DecoratedTree:
    """Evaluated geometry plus per-edge accessory sample arrays."""

    tree: EvaluatedTree
    per_edge_values: dict
    kinds: dict

    def channel(self, name):
        return self.per_edge_values[name]


@dataclass
class Junction:
    s: float
    offsets: dict


def _edge_index_range(edge, grid: SGrid):
    i0 = grid.index_of(edge.polyline.grid.s_min)
    i1 = grid.index_of(edge.polyline.grid.s_max)
    return i0, i1


def evaluate_accessories(
    enhanced: EnhancedTree,
    start_values: dict | None = None,
    start: Pose | None = None,
    node_cap: int = DEFAULT_NODE_CAP,
) -> DecoratedTree:
    """Materialize every accessory channel along every edge of the tree.

    Derivative channels integrate rate * delta_s root-to-tip starting from
    start_values[name] (default 0) plus the channel's continuity constant;
    the reserved coordinate channels are read off the geometry itself.
    Absolute channels evaluate pointwise.  A channel's expression may read
    any channel declared before it at the same samples; referencing a later
    channel (or itself) is reported as an undeclared-reference cycle.
    """
    if enhanced.is_empty:
        raise EvaluationError("cannot evaluate an empty tree")
    spec = enhanced.spec
    start_values = dict(start_values or {})
    if enhanced.feedback is None:
        tree = evaluate_tree(spec, start, node_cap)
        distances = None
    else:
        tree, distances = _evaluate_with_feedback(enhanced, start, node_cap)

    grid = spec.grid
    s_all = grid.samples()
    ds = grid.delta_s
    angle_names = angle_channel_names(spec.dim)
    extras = enhanced.accessories.extras(spec.dim)

    per_edge: dict[str, list] = {e.name: [] for e in enhanced.accessories}
    kinds = {e.name: e.kind for e in enhanced.accessories}
    if distances is not None:
        per_edge[DISTANCE_CHANNEL] = []
        kinds[DISTANCE_CHANNEL] = ABSOLUTE

    # carry[name] holds the accumulated value at each node, keyed by id
    carry: dict[tuple, dict] = {
        (): {
            e.name: start_values.get(e.name, 0.0)
            + enhanced.continuity_constants.get(e.name, 0.0)
            for e in extras
            if e.kind == DERIVATIVE
        }
    }

    for edge_pos, edge in enumerate(tree.edges):
        i0, i1 = _edge_index_range(edge, grid)
        s_edge = s_all[i0 : i1 + 1]
        poly = edge.polyline

        per_edge["dr"].append(poly.cum_arc.copy())
        for a, name in enumerate(angle_names):
            per_edge[name].append(poly.headings[:, a].copy())
        if distances is not None:
            per_edge[DISTANCE_CHANNEL].append(distances[edge_pos])

        env = {
            "dr": poly.cum_arc,
            **{name: poly.headings[:, a] for a, name in enumerate(angle_names)},
        }
        if distances is not None:
            env[DISTANCE_CHANNEL] = distances[edge_pos]

        inherited = carry[edge.child_id[:-1]]
        end_values = {}
        for entry in extras:
            rate_or_value = _sample_channel(entry, s_edge, env)
            if entry.kind == ABSOLUTE:
                values = rate_or_value
            else:
                values = np.empty(len(s_edge))
                values[0] = inherited[entry.name]
                values[1:] = values[0] + np.cumsum(rate_or_value[:-1] * ds)
                end_values[entry.name] = float(values[-1])
            per_edge[entry.name].append(values)
            env[entry.name] = values
        carry[edge.child_id] = end_values

    return DecoratedTree(tree, per_edge, kinds)


def _sample_channel(entry: AccessoryFn, s_edge, env) -> np.ndarray:
    fn = entry.fn
    if fn.kind == "sampled":
        grid = fn.grid
        i0 = grid.index_of(s_edge[0])
        i1 = grid.index_of(s_edge[-1])
        return fn.values[i0 : i1 + 1]
    out = fn.fn(s_edge, env) if fn.takes_env else fn.fn(s_edge)
    out = np.broadcast_to(np.asarray(out, dtype=float), s_edge.shape).astype(float)
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out))[0])
        raise EvaluationError(
            f"accessory {entry.name!r} produced a non-finite value at s={s_edge[bad]!r}"
        )
    return out


def _evaluate_with_feedback(enhanced: EnhancedTree, start, node_cap):
    """Stepwise 2D evaluation with the azimuthal rate adjusted per step."""
    spec = enhanced.spec
    fb = enhanced.feedback
    if spec.dim != 2:
        raise GridError("perimeter feedback is 2D-only")
    if start is None:
        start = Pose.origin(2)
    grid = spec.grid
    ds = grid.delta_s
    radial = spec.coords.radial_values
    angular = spec.coords.angular_values[0]
    distances: list[np.ndarray] = []

    def integrate_segment(i0, i1, pose, cum0, axis, mult):
        n = i1 - i0 + 1
        points = np.empty((n, 2))
        headings = np.empty((n, 1))
        cum = np.empty(n)
        dist = np.empty(n)
        points[0] = pose.position
        headings[0] = pose.heading
        cum[0] = cum0
        x, y = pose.position
        theta = float(pose.heading[0])
        for k in range(i0, i1):
            j = k - i0 + 1
            d, q = fb.nearest(np.array([x, y]))
            dist[j - 1] = d
            to_wall = q - (x, y)
            cross = np.cos(theta) * to_wall[1] - np.sin(theta) * to_wall[0]
            side = -1.0 if cross > 0 else (1.0 if cross < 0 else 0.0)
            adj = fb.gain * np.exp(-d / fb.falloff) * side
            theta += (mult * angular[k] + adj) * ds
            step = radial[k] * ds
            x += step * np.cos(theta)
            y += step * np.sin(theta)
            points[j] = (x, y)
            headings[j, 0] = theta
            cum[j] = cum[j - 1] + step
        dist[n - 1], _ = fb.nearest(np.array([x, y]))
        distances.append(dist)
        return PathPolyline(points, headings, cum, grid.sub(i0, i1))

    tree = _walk_tree(spec, start, integrate_segment, node_cap)
    return tree, distances


def perimeter_feedback(
    enhanced: EnhancedTree, perimeter, gain: float, falloff: float
) -> EnhancedTree:
    """Attach a sensory boundary to a tree (2D).

    Evaluation then adds gain * exp(-distance / falloff) * side to the
    azimuthal rate at every step, where side points away from the nearest
    perimeter point, and records the measured distance as an absolute
    channel named perimeter_distance.
    """
    if enhanced.is_empty:
        raise EvaluationError("cannot attach feedback to an empty tree")
    if enhanced.spec.dim != 2:
        raise GridError("perimeter feedback is 2D-only")
    return EnhancedTree(
        spec=enhanced.spec,
        accessories=AccessorySet(list(enhanced.accessories)),
        continuity_constants=dict(enhanced.continuity_constants),
        feedback=PerimeterFeedback(perimeter, float(gain), float(falloff)),
        junctions=list(enhanced.junctions),
    )


def _sampled_or_none(entry: AccessoryFn | None, grid: SGrid):
    if entry is None:
        return np.zeros(grid.count)
    return entry.fn.sample(grid) if not entry.fn.takes_env else None


def _stitch_env_fn(fn1, fn2, junction, shift):
    """Closed-form stitch for channels that read other channels."""

    def call(fn, s, env):
        if fn is None:
            return np.zeros_like(s)
        out = fn.fn(s, env) if fn.takes_env else fn.fn(s)
        return np.broadcast_to(np.asarray(out, dtype=float), s.shape)

    def stitched(s, env):
        s = np.asarray(s, dtype=float)
        left = s < junction
        out = np.empty_like(s)
        out[left] = call(fn1, s[left], _slice_env(env, left))
        out[~left] = call(fn2, s[~left] - shift, _slice_env(env, ~left))
        return out

    return stitched


def _slice_env(env, mask):
    if env is None:
        return None
    return {k: np.asarray(v)[mask] for k, v in env.items()}


def concatenate(first: EnhancedTree, second: EnhancedTree, allow_resample: bool = True) -> EnhancedTree:
    """Sequence two enhanced trees over adjacent parameter domains.

    The second tree's domain is shifted to begin at the first one's end,
    branch sets are shifted and merged, and every derivative channel's
    integration constant for the second part is chosen so the channel's
    primitive is continuous at the junction.  Absolute channels are left
    untouched (a step at the junction survives).
    """
    if first.is_empty:
        return second
    if second.is_empty:
        return first
    for t in (first, second):
        if t.feedback is not None:
            raise GridError("concatenate trees before attaching perimeter feedback")
    a, b = first.spec, second.spec
    if a.dim != b.dim:
        raise GridError(f"cannot concatenate dim {a.dim} with dim {b.dim}")
    if abs(a.grid.delta_s - b.grid.delta_s) > 1e-15:
        if not allow_resample:
            raise GridError(
                "grids have different steps; pass allow_resample=True to resample "
                "the second tree"
            )
        from .curves import resample

        bp = np.concatenate([bs.points for bs in b.branch_sets]) if b.branch_sets else None
        coords = resample(b.coords, a.grid.delta_s, branch_points=bp)
        second = EnhancedTree(
            spec=TreeSpec(
                coords,
                tuple(BranchPointSet(bs.points, coords.grid) for bs in b.branch_sets),
                b.forks,
                b.max_generations,
            ),
            accessories=AccessorySet(list(second.accessories)),
            continuity_constants=dict(second.continuity_constants),
            junctions=list(second.junctions),
        )
        b = second.spec

    ds = a.grid.delta_s
    junction = a.grid.s_max
    shift = junction - b.grid.s_min
    grid = SGrid(a.grid.s_min, junction + (b.grid.s_max - b.grid.s_min), ds)

    def join(x, y):
        return np.concatenate([x[:-1], y])

    radial = join(a.coords.radial_values, b.coords.radial_values)
    angular = [
        join(x, y) for x, y in zip(a.coords.angular_values, b.coords.angular_values)
    ]
    coords = DerivativeCoords.from_arrays(radial, angular, grid)

    n_axes = max(len(a.branch_sets), len(b.branch_sets), 1)
    merged_sets = []
    for axis in range(n_axes):
        pts = []
        if axis < len(a.branch_sets):
            pts.extend(a.branch_sets[axis].points)
        if axis < len(b.branch_sets):
            pts.extend(b.branch_sets[axis].points + shift)
        pts = sorted(set(float(p) for p in pts if p < grid.s_max))
        merged_sets.append(BranchPointSet(np.array(pts), grid))

    # explicit per-generation schedule over both parts (trunk slots excluded)
    arities = [seg[2] for seg in a.segments() if seg[2] >= 2]
    axes = [seg[3] for seg in a.segments() if seg[2] >= 2]
    arities += [seg[2] for seg in b.segments() if seg[2] >= 2]
    axes += [seg[3] for seg in b.segments() if seg[2] >= 2]
    forks = ForkSchedule(tuple(arities) or (2,), tuple(axes) or None)
    spec = TreeSpec(coords, tuple(merged_sets), forks, a.max_generations + b.max_generations)

    # accessory union: first tree's order, then names only the second adds
    names_a = {e.name: e for e in first.accessories}
    names_b = {e.name: e for e in second.accessories}
    ordered = list(names_a) + [n for n in names_b if n not in names_a]
    merged = AccessorySet.for_coords(coords)
    constants = {"dr": first.continuity_constants.get("dr", 0.0)}
    for name in angle_channel_names(spec.dim):
        constants[name] = first.continuity_constants.get(name, 0.0)

    offsets = {}
    reserved = {"dr", *angle_channel_names(spec.dim)}
    for name in ordered:
        e1, e2 = names_a.get(name), names_b.get(name)
        kind = (e1 or e2).kind
        if e1 and e2 and e1.kind != e2.kind:
            raise GridError(
                f"accessory {name!r} is {e1.kind} in one tree and {e2.kind} in the other"
            )
        units = (e1 or e2).units
        if name in reserved:
            h1 = first.continuity_constants.get(name, 0.0)
            if name == "dr":
                v1 = float(np.sum(a.coords.radial_values[:-1]) * ds)
            else:
                ax = angle_channel_names(spec.dim).index(name)
                v1 = float(np.sum(a.coords.angular_values[ax][:-1]) * ds)
            offsets[name] = h1 + v1
            continue
        env1 = e1 is not None and e1.fn.takes_env
        env2 = e2 is not None and e2.fn.takes_env
        if env1 or env2:
            fn = ScalarFn.closed(
                _stitch_env_fn(e1.fn if e1 else None, e2.fn if e2 else None, junction, shift),
                takes_env=True,
            )
            if kind == DERIVATIVE:
                constants[name] = first.continuity_constants.get(name, 0.0)
        else:
            v1 = _sampled_or_none(e1, a.grid)
            v2 = _sampled_or_none(e2, b.grid)
            fn = ScalarFn.sampled(join(v1, v2), grid)
            if kind == DERIVATIVE:
                h1 = first.continuity_constants.get(name, 0.0)
                offsets[name] = h1 + float(np.sum(v1[:-1]) * ds)
                constants[name] = h1
        merged.add(AccessoryFn(name, kind, fn, units))

    junctions = list(first.junctions) + [Junction(junction, offsets)]
    # inner junctions of the second part keep their s (shifted) but their
    # primitive levels gain everything accumulated before the new junction
    for j in second.junctions:
        adjusted = {}
        for name, val in j.offsets.items():
            base = offsets.get(name)
            if base is None:
                adjusted[name] = val
            else:
                adjusted[name] = val - second.continuity_constants.get(name, 0.0) + base
        junctions.append(Junction(j.s + shift, adjusted))
    return EnhancedTree(
        spec=spec,
        accessories=merged,
        continuity_constants=constants,
        junctions=junctions,
    )
