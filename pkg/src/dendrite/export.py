"""Serializers for decorated trees: SVG (2D), binary STL tubes (3D), JSON.

All output is deterministic: fixed float formatting, canonical branch
order, no timestamps.  Higher-dimensional trees project down through an
orthonormal basis before viewing.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .curves import PathPolyline, Pose
from .errors import ExportError
from .trees import EvaluatedTree, TreeEdge, TreeNode, bounding_radius

__all__ = ["TubeParams", "to_svg", "to_stl", "to_json", "from_json", "project"]

JSON_SCHEMA_VERSION = 1


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _tree_extent(tree: EvaluatedTree):
    """(center, half_extent) for the viewport, preferring the radial bound."""
    root = tree.root.position
    if tree.spec is not None:
        r = bounding_radius(tree.spec)
        if np.isfinite(r) and r > 0:
            return root, float(r)
    pts = np.concatenate([e.polyline.points for e in tree.edges])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    half = float(np.max(hi - lo)) / 2 or 1.0
    return (lo + hi) / 2, half * 1.05


def _channel_attribute_value(name: str, values: np.ndarray) -> str:
    """Per-edge average bound as an SVG attribute value."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 2 and arr.shape[1] == 3:
        rgb = np.clip(np.mean(arr, axis=0), 0.0, 1.0)
        r, g, b = (int(round(255 * c)) for c in rgb)
        return f"rgb({r},{g},{b})"
    return _fmt(float(np.mean(arr)))


def to_svg(decorated, style_map: dict | None = None) -> str:
    """One path element per edge in canonical branch order (2D only).

    style_map maps accessory channel names to SVG attribute names, e.g.
    {"width": "stroke-width", "glow": "stroke-opacity"}; each edge binds
    the per-edge average of the channel.  The y axis is flipped so trees
    launched upward render upward.
    """
    tree = decorated.tree
    if tree.dim != 2:
        raise ExportError(f"SVG export needs a 2D tree, got dim {tree.dim}")
    style_map = dict(style_map or {})
    for name in style_map:
        if name not in decorated.per_edge_values:
            raise ExportError(f"style_map references unknown channel {name!r}")

    center, half = _tree_extent(tree)
    min_x = _fmt(center[0] - half)
    min_y = _fmt(-center[1] - half)
    size = _fmt(2 * half)
    default_width = _fmt(2 * half / 300.0)

    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{min_x} {min_y} {size} {size}">',
        f'<g fill="none" stroke="#000000" stroke-width="{default_width}" stroke-linecap="round">',
    ]
    for k, edge in enumerate(tree.edges):
        pts = edge.polyline.points
        d = "M " + " L ".join(f"{_fmt(p[0])} {_fmt(-p[1])}" for p in pts)
        attrs = ""
        for name in sorted(style_map, key=lambda n: style_map[n]):
            value = _channel_attribute_value(name, decorated.per_edge_values[name][k])
            attrs += f' {style_map[name]}="{value}"'
        lines.append(f'<path d="{d}"{attrs}/>')
    lines.append("</g>")
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


@dataclass
class TubeParams:
    """Cross-section settings for the tube sweep."""

    radial_segments: int = 12
    radius_source: str | float = "width"
    cap_ends: bool = True

    def __post_init__(self):
        if self.radial_segments < 3:
            raise ExportError("radial_segments must be >= 3")


def _initial_normal(tangent: np.ndarray) -> np.ndarray:
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(tangent)))] = 1.0
    n = axis - np.dot(axis, tangent) * tangent
    return n / np.linalg.norm(n)


def _transport_frames(points: np.ndarray):
    """Parallel-transported (tangent, normal, binormal) per polyline sample."""
    d = np.diff(points, axis=0)
    seg_len = np.linalg.norm(d, axis=1)
    if np.any(seg_len == 0.0):
        bad = int(np.flatnonzero(seg_len == 0.0)[0])
        raise ExportError(f"degenerate zero-length polyline step at sample {bad}")
    seg_t = d / seg_len[:, None]
    # vertex tangents: average of adjacent segment tangents
    t = np.empty_like(points)
    t[0] = seg_t[0]
    t[-1] = seg_t[-1]
    if len(points) > 2:
        mid = seg_t[:-1] + seg_t[1:]
        norms = np.linalg.norm(mid, axis=1)
        norms[norms == 0.0] = 1.0
        t[1:-1] = mid / norms[:, None]
    n = np.empty_like(points)
    n[0] = _initial_normal(t[0])
    for k in range(1, len(points)):
        axis = np.cross(t[k - 1], t[k])
        s = np.linalg.norm(axis)
        c = float(np.clip(np.dot(t[k - 1], t[k]), -1.0, 1.0))
        if s < 1e-14:
            n[k] = n[k - 1] if c > 0 else -n[k - 1]
        else:
            axis = axis / s
            # Rodrigues rotation taking the previous tangent onto this one
            v = n[k - 1]
            n[k] = v * c + np.cross(axis, v) * s + axis * np.dot(axis, v) * (1 - c)
        n[k] -= np.dot(n[k], t[k]) * t[k]
        n[k] /= np.linalg.norm(n[k])
    b = np.cross(t, n)
    return t, n, b


def _edge_radii(decorated, edge_index: int, n_samples: int, params: TubeParams):
    if isinstance(params.radius_source, (int, float)):
        radii = np.full(n_samples, float(params.radius_source))
    else:
        name = params.radius_source
        if name not in decorated.per_edge_values:
            raise ExportError(f"radius channel {name!r} not present on the tree")
        radii = np.asarray(decorated.per_edge_values[name][edge_index], dtype=float)
    if np.any(radii <= 0):
        bad = int(np.flatnonzero(radii <= 0)[0])
        raise ExportError(
            f"tube radius must stay positive; got {radii[bad]:.6g} at sample {bad}"
        )
    return radii


def tube_triangle_count(samples: int, params: TubeParams) -> int:
    """Triangles one swept edge contributes: sides plus optional caps."""
    sides = (samples - 1) * params.radial_segments * 2
    caps = 2 * params.radial_segments if params.cap_ends else 0
    return sides + caps


def to_stl(decorated, params: TubeParams | None = None) -> bytes:
    """Sweep a circular cross-section along every edge into binary STL.

    Frames are parallel-transported to avoid twist; triangle count follows
    tube_triangle_count per edge; facet normals are unit and outward.
    """
    params = params or TubeParams()
    tree = decorated.tree
    if tree.dim != 3:
        raise ExportError(f"STL export needs a 3D tree, got dim {tree.dim}")

    m = params.radial_segments
    ang = 2 * np.pi * np.arange(m) / m
    cos_a, sin_a = np.cos(ang), np.sin(ang)
    triangles = []

    for k, edge in enumerate(tree.edges):
        pts = edge.polyline.points
        radii = _edge_radii(decorated, k, len(pts), params)
        t, n, b = _transport_frames(pts)
        rings = (
            pts[:, None, :]
            + radii[:, None, None]
            * (cos_a[None, :, None] * n[:, None, :] + sin_a[None, :, None] * b[:, None, :])
        )
        for j in range(len(pts) - 1):
            r0, r1 = rings[j], rings[j + 1]
            for i in range(m):
                i2 = (i + 1) % m
                triangles.append((r0[i], r0[i2], r1[i2]))
                triangles.append((r0[i], r1[i2], r1[i]))
        if params.cap_ends:
            for i in range(m):
                i2 = (i + 1) % m
                triangles.append((pts[0], rings[0][i2], rings[0][i]))
                triangles.append((pts[-1], rings[-1][i], rings[-1][i2]))

    out = bytearray()
    header = b"dendrite tube mesh"
    out += header + b"\x00" * (80 - len(header))
    out += struct.pack("<I", len(triangles))
    for a, bb, c in triangles:
        normal = np.cross(bb - a, c - a)
        length = np.linalg.norm(normal)
        normal = normal / length if length > 0 else np.zeros(3)
        out += struct.pack("<3f", *normal)
        out += struct.pack("<3f", *a)
        out += struct.pack("<3f", *bb)
        out += struct.pack("<3f", *c)
        out += struct.pack("<H", 0)
    return bytes(out)


def to_json(decorated) -> str:
    """Canonical JSON node graph plus accessory channels (any dimension)."""
    tree = decorated.tree
    doc = {
        "version": JSON_SCHEMA_VERSION,
        "dim": tree.dim,
        "nodes": [
            {"id": [], "pos": list(tree.root.position), "s": tree.root.s}
        ]
        + [
            {"id": list(n.id), "pos": list(n.position), "s": n.s}
            for n in tree.nodes
        ],
        "edges": [
            {"child": list(e.child_id), "points": e.polyline.points.tolist()}
            for e in tree.edges
        ],
        "accessories": {
            name: {
                "kind": decorated.kinds[name],
                "per_edge": [np.asarray(v).tolist() for v in decorated.per_edge_values[name]],
            }
            for name in decorated.per_edge_values
        },
    }
    return json.dumps(doc, separators=(",", ":")) + "\n"


def from_json(text: str):
    """Rebuild a decorated tree from the JSON export (geometry and channels).

    The result carries no spec; it is meant for round-trip checks and for
    feeding the viewers, not for re-analysis.
    """
    from .accessories import DecoratedTree
    from .curves import SGrid

    doc = json.loads(text)
    dim = int(doc["dim"])
    nodes = []
    root = None
    for n in doc["nodes"]:
        node = TreeNode(
            tuple(n["id"]),
            np.asarray(n["pos"], dtype=float),
            Pose(np.asarray(n["pos"], dtype=float), np.zeros(dim - 1)),
            float(n["s"]),
        )
        if node.id == ():
            root = node
        else:
            nodes.append(node)
    if root is None:
        raise ExportError("JSON tree has no root node")
    edges = []
    for e in doc["edges"]:
        pts = np.asarray(e["points"], dtype=float)
        grid = SGrid(0.0, float(len(pts) - 1), 1.0)
        poly = PathPolyline(pts, np.zeros((len(pts), dim - 1)), np.zeros(len(pts)), grid)
        edges.append(TreeEdge(tuple(e["child"]), poly))
    tree = EvaluatedTree(root, nodes, edges, dim, None)
    per_edge = {
        name: [np.asarray(v, dtype=float) for v in body["per_edge"]]
        for name, body in doc["accessories"].items()
    }
    kinds = {name: body["kind"] for name, body in doc["accessories"].items()}
    return DecoratedTree(tree, per_edge, kinds)


def project(decorated, target_dim: int, basis) -> "DecoratedTree":
    """Orthographic projection of all geometry; accessories ride along.

    basis rows must be orthonormal (Gram check at 1e-9) with one row per
    target dimension and one column per source dimension.  Headings are
    not meaningful after projection and are zeroed.
    """
    from .accessories import DecoratedTree

    tree = decorated.tree
    B = np.asarray(basis, dtype=float)
    if target_dim not in (2, 3):
        raise ExportError(f"projection target must be 2 or 3, got {target_dim}")
    if B.shape != (target_dim, tree.dim):
        raise ExportError(
            f"basis must be {target_dim} rows of {tree.dim} entries, got {B.shape}"
        )
    gram = B @ B.T
    if np.max(np.abs(gram - np.eye(target_dim))) > 1e-9:
        raise ExportError("basis rows are not orthonormal")

    def proj_pose(pose: Pose) -> Pose:
        return Pose(B @ pose.position, np.zeros(target_dim - 1))

    def proj_node(n: TreeNode) -> TreeNode:
        return TreeNode(n.id, B @ n.position, proj_pose(n.pose), n.s)

    edges = []
    for e in tree.edges:
        poly = e.polyline
        pts = poly.points @ B.T
        edges.append(
            TreeEdge(
                e.child_id,
                PathPolyline(
                    pts,
                    np.zeros((len(pts), target_dim - 1)),
                    poly.cum_arc.copy(),
                    poly.grid,
                ),
            )
        )
    out_tree = EvaluatedTree(
        proj_node(tree.root),
        [proj_node(n) for n in tree.nodes],
        edges,
        target_dim,
        tree.spec,
    )
    return DecoratedTree(
        out_tree,
        {k: [np.asarray(v).copy() for v in vs] for k, vs in decorated.per_edge_values.items()},
        dict(decorated.kinds),
    )
