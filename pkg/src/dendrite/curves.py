"""Derivative coordinate functions and path integration.

A path is represented by the local rates of change of its polar /
(hyper)spherical coordinates along a parameter s: one radial rate
(arc length per unit s, never negative) and dim-1 angular rates
(radians per unit s).  Integrating those rates with a first-order
left-endpoint scheme reconstructs the path; differencing a sampled
path recovers the rates.  All sampling lives on uniform grids.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import EvaluationError, GridError

__all__ = [
    "SGrid",
    "ScalarFn",
    "DerivativeCoords",
    "Pose",
    "PathPolyline",
    "integrate_path",
    "derive_coords",
    "arc_length",
    "turn_angle",
    "resample",
    "load_coords_csv",
    "direction_chain",
]


@dataclass(frozen=True)
class SGrid:
    """Uniform sampling grid over [s_min, s_max] with step delta_s."""

    s_min: float
    s_max: float
    delta_s: float

    def __post_init__(self):
        if not (self.delta_s > 0):
            raise GridError(f"delta_s must be > 0, got {self.delta_s}")
        if not (self.s_max > self.s_min):
            raise GridError(f"need s_max > s_min, got [{self.s_min}, {self.s_max}]")
        span = self.s_max - self.s_min
        n = round(span / self.delta_s)
        if n < 1:
            raise GridError("grid must contain at least 2 samples")
        if abs(self.s_min + n * self.delta_s - self.s_max) > 1e-6 * max(1.0, span):
            raise GridError(
                f"delta_s={self.delta_s} does not evenly divide [{self.s_min}, {self.s_max}]"
            )

    @property
    def count(self) -> int:
        return round((self.s_max - self.s_min) / self.delta_s) + 1

    def samples(self) -> np.ndarray:
        return self.s_min + self.delta_s * np.arange(self.count)

    def index_of(self, s: float, *, snap_tol: float | None = None) -> int:
        """Nearest sample index for s; raises GridError outside the domain."""
        tol = 0.5 * self.delta_s if snap_tol is None else snap_tol
        if s < self.s_min - tol or s > self.s_max + tol:
            raise GridError(f"s={s} outside grid domain [{self.s_min}, {self.s_max}]")
        k = int(round((s - self.s_min) / self.delta_s))
        return min(max(k, 0), self.count - 1)

    def sub(self, i0: int, i1: int) -> "SGrid":
        """Sub-grid spanning sample indices i0..i1 (inclusive)."""
        if not (0 <= i0 < i1 <= self.count - 1):
            raise GridError(f"invalid sub-range [{i0}, {i1}] for count {self.count}")
        return SGrid(
            self.s_min + i0 * self.delta_s,
            self.s_min + i1 * self.delta_s,
            self.delta_s,
        )

    def compatible(self, other: "SGrid") -> bool:
        return (
            abs(self.s_min - other.s_min) < 1e-12
            and abs(self.s_max - other.s_max) < 1e-12
            and abs(self.delta_s - other.delta_s) < 1e-15
        )


class ScalarFn:
    """A scalar function of s: either an array of grid samples or a closed form.

    Closed forms are plain callables f(s_array) -> array.  Accessory
    expressions that need to read other channels are constructed with
    takes_env=True and are called f(s_array, env).
    """

    __slots__ = ("kind", "values", "grid", "fn", "takes_env")

    def __init__(self, kind, values=None, grid=None, fn=None, takes_env=False):
        self.kind = kind
        self.values = values
        self.grid = grid
        self.fn = fn
        self.takes_env = takes_env

    @classmethod
    def sampled(cls, values, grid: SGrid) -> "ScalarFn":
        arr = np.asarray(values, dtype=float)
        if arr.shape != (grid.count,):
            raise GridError(
                f"sample array has {arr.shape[0] if arr.ndim == 1 else arr.shape} "
                f"values, grid expects {grid.count}"
            )
        if not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.isfinite(arr))[0])
            raise EvaluationError(f"non-finite sample at index {bad}")
        return cls("sampled", values=arr, grid=grid)

    @classmethod
    def closed(cls, fn, takes_env: bool = False) -> "ScalarFn":
        return cls("closed", fn=fn, takes_env=takes_env)

    @classmethod
    def constant(cls, value: float) -> "ScalarFn":
        v = float(value)
        return cls.closed(lambda s: np.full_like(np.asarray(s, dtype=float), v))

    def sample(self, grid: SGrid, env=None) -> np.ndarray:
        if self.kind == "sampled":
            if not self.grid.compatible(grid):
                raise GridError("sampled function evaluated on an incompatible grid")
            return self.values
        s = grid.samples()
        out = self.fn(s, env) if self.takes_env else self.fn(s)
        out = np.broadcast_to(np.asarray(out, dtype=float), s.shape).astype(float)
        if not np.all(np.isfinite(out)):
            bad = int(np.flatnonzero(~np.isfinite(out))[0])
            raise EvaluationError(
                f"closed form produced non-finite value at s={s[bad]!r}"
            )
        return out


@dataclass
class DerivativeCoords:
    """Radial and angular derivative coordinates sampled on a common grid.

    radial carries arc length per unit s (>= 0, it is a norm); each of the
    dim-1 angular functions carries radians per unit s.  Sample arrays are
    materialized once at construction and must be treated as read-only.
    """

    dim: int
    radial: ScalarFn
    angular: tuple
    grid: SGrid
    radial_values: np.ndarray = field(init=False, repr=False)
    angular_values: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if self.dim < 2:
            raise GridError(f"dim must be >= 2, got {self.dim}")
        self.angular = tuple(self.angular)
        if len(self.angular) != self.dim - 1:
            raise GridError(
                f"need {self.dim - 1} angular functions for dim {self.dim}, "
                f"got {len(self.angular)}"
            )
        rv = self.radial.sample(self.grid)
        if np.any(rv < 0):
            bad = int(np.flatnonzero(rv < 0)[0])
            raise EvaluationError(
                f"radial rate is negative at s={self.grid.samples()[bad]!r} "
                "(it is a norm and cannot be negative)"
            )
        self.radial_values = rv
        self.angular_values = tuple(a.sample(self.grid) for a in self.angular)

    @classmethod
    def from_arrays(cls, radial, angular_list, grid: SGrid) -> "DerivativeCoords":
        ang = [ScalarFn.sampled(a, grid) for a in angular_list]
        return cls(len(ang) + 1, ScalarFn.sampled(radial, grid), tuple(ang), grid)


@dataclass
class Pose:
    """Position plus accumulated heading angles (azimuth first, then polars)."""

    position: np.ndarray
    heading: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.heading = np.atleast_1d(np.asarray(self.heading, dtype=float))
        if self.position.shape != (self.dim,) or self.heading.shape != (self.dim - 1,):
            raise GridError(
                f"pose needs dim and dim-1 entries, got position {self.position.shape}"
                f" heading {self.heading.shape}"
            )
        if not (np.all(np.isfinite(self.position)) and np.all(np.isfinite(self.heading))):
            raise EvaluationError("pose has non-finite entries")

    @property
    def dim(self) -> int:
        return len(self.position)

    @classmethod
    def origin(cls, dim: int) -> "Pose":
        """Origin pose pointing along +x: azimuth 0, all polar angles pi/2."""
        heading = np.full(dim - 1, np.pi / 2)
        if dim >= 2:
            heading[0] = 0.0
        return cls(np.zeros(dim), heading)


@dataclass
class PathPolyline:
    """Integrated path: one point, heading and cumulative arc per grid sample."""

    points: np.ndarray
    headings: np.ndarray
    cum_arc: np.ndarray
    grid: SGrid

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def end_pose(self) -> Pose:
        return Pose(self.points[-1].copy(), self.headings[-1].copy())


def direction_chain(headings: np.ndarray) -> np.ndarray:
    """Unit direction vectors from heading angles, shape (M, dim-1) -> (M, dim).

    Hyperspherical convention: axis 0 is azimuthal, the rest are polar,
    so dim 2 gives (cos a0, sin a0) and dim 3 gives
    (cos a0 sin a1, sin a0 sin a1, cos a1).
    """
    H = np.atleast_2d(headings)
    m, n_ang = H.shape
    dim = n_ang + 1
    cos = np.cos(H)
    sin = np.sin(H)
    # suffix[i] = product of sin(a_j) for j in [i, n_ang)
    suffix = np.ones((m, n_ang + 1))
    for j in range(n_ang - 1, 0, -1):
        suffix[:, j] = suffix[:, j + 1] * sin[:, j]
    out = np.empty((m, dim))
    out[:, 0] = cos[:, 0] * suffix[:, 1]
    out[:, 1] = sin[:, 0] * suffix[:, 1]
    for i in range(2, dim):
        out[:, i] = cos[:, i - 1] * suffix[:, i]
    return out


def _integrate_arrays(radial, angular_list, delta_s, start: Pose, cum0=0.0):
    """Left-endpoint accumulation shared by all integrators.

    Heading moves first, then the position step uses the fresh heading;
    the last grid sample is never consumed (count-1 steps for count samples).
    """
    n = len(radial)
    dim = start.dim
    steps_ang = np.column_stack([a[:-1] for a in angular_list]) * delta_s
    H = start.heading + np.cumsum(steps_ang, axis=0)
    dirs = direction_chain(H)
    arc_steps = radial[:-1] * delta_s
    deltas = arc_steps[:, None] * dirs
    pts = start.position + np.cumsum(deltas, axis=0)

    points = np.empty((n, dim))
    points[0] = start.position
    points[1:] = pts
    headings = np.empty((n, dim - 1))
    headings[0] = start.heading
    headings[1:] = H
    cum_arc = np.empty(n)
    cum_arc[0] = cum0
    cum_arc[1:] = cum0 + np.cumsum(arc_steps)

    if not np.all(np.isfinite(points)):
        bad = int(np.flatnonzero(~np.isfinite(points).all(axis=1))[0])
        raise EvaluationError(f"non-finite geometry at sample index {bad}")
    return points, headings, cum_arc


def integrate_path(coords: DerivativeCoords, start: Pose | None = None) -> PathPolyline:
    """Integrate derivative coordinates into a path polyline.

    Per step k: every heading angle is advanced by angular_i(s_k) * delta_s,
    then the position advances by radial(s_k) * delta_s along the unit
    direction of the updated heading.  First-order in delta_s.
    """
    if start is None:
        start = Pose.origin(coords.dim)
    if start.dim != coords.dim:
        raise GridError(f"start pose dim {start.dim} != coords dim {coords.dim}")
    points, headings, cum_arc = _integrate_arrays(
        coords.radial_values, coords.angular_values, coords.grid.delta_s, start
    )
    return PathPolyline(points, headings, cum_arc, coords.grid)


def derive_coords(samples, grid: SGrid, dim: int) -> DerivativeCoords:
    """Recover derivative coordinates from Cartesian samples (dim 2 or 3).

    Forward differences; the first angular sample carries the absolute
    direction of the first step (principal value) so that integrating the
    result from Pose(position=samples[0], heading=zeros) reproduces the
    input samples.  Later samples are unwrapped relative to their neighbor.
    """
    if dim not in (2, 3):
        raise GridError(f"inverse conversion supports dim 2 or 3, got {dim}")
    pts = np.asarray(samples, dtype=float)
    if pts.shape != (grid.count, dim):
        raise GridError(
            f"expected {grid.count} samples of dim {dim}, got shape {pts.shape}"
        )
    d = np.diff(pts, axis=0)
    norms = np.linalg.norm(d, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if len(zero):
        raise EvaluationError(
            f"zero-velocity step at sample index {int(zero[0])}: "
            "direction is undefined there"
        )
    ds = grid.delta_s
    radial = np.append(norms, norms[-1]) / ds

    def unwrap_steps(absolute):
        steps = np.empty_like(absolute)
        steps[0] = absolute[0]
        dd = np.diff(absolute)
        steps[1:] = (dd + np.pi) % (2 * np.pi) - np.pi
        return steps

    phi = np.arctan2(d[:, 1], d[:, 0])
    dphi = unwrap_steps(phi) / ds
    dphi = np.append(dphi, dphi[-1])
    angular = [dphi]
    if dim == 3:
        psi = np.arccos(np.clip(d[:, 2] / norms, -1.0, 1.0))
        dpsi = unwrap_steps(psi) / ds
        dpsi = np.append(dpsi, dpsi[-1])
        angular.append(dpsi)
    return DerivativeCoords.from_arrays(radial, angular, grid)


def _index_range(grid: SGrid, s1: float, s2: float):
    if s2 < s1:
        raise GridError(f"need s1 <= s2, got {s1} > {s2}")
    return grid.index_of(s1), grid.index_of(s2)


def arc_length(coords: DerivativeCoords, s1: float, s2: float) -> float:
    """Riemann sum of the radial rate over [s1, s2); additive over splits."""
    i1, i2 = _index_range(coords.grid, s1, s2)
    return float(np.sum(coords.radial_values[i1:i2]) * coords.grid.delta_s)


def turn_angle(coords: DerivativeCoords, s1: float, s2: float) -> float:
    """Accumulated tangent-angle change over [s1, s2) for a 2D path."""
    if coords.dim != 2:
        raise GridError(f"turn_angle is 2D-only, got dim {coords.dim}")
    i1, i2 = _index_range(coords.grid, s1, s2)
    return float(np.sum(coords.angular_values[0][i1:i2]) * coords.grid.delta_s)


def _find_impulses(values: np.ndarray) -> np.ndarray:
    """Indices of isolated nonzero samples flanked by zeros (or array ends)."""
    nz = values != 0.0
    if not nz.any():
        return np.empty(0, dtype=int)
    left_zero = np.empty_like(nz)
    left_zero[0] = True
    left_zero[1:] = ~nz[:-1]
    right_zero = np.empty_like(nz)
    right_zero[-1] = True
    right_zero[:-1] = ~nz[1:]
    return np.flatnonzero(nz & left_zero & right_zero)


def _resample_values(values, old_grid: SGrid, new_grid: SGrid, boundaries):
    """Resample one channel preserving per-interval Riemann sums.

    Impulse-like samples (isolated nonzero between zeros) are re-emitted at
    the nearest new sample scaled by the step ratio; the smooth remainder is
    linearly interpolated and then rescaled per interval so every integral
    between consecutive boundaries is unchanged.
    """
    old_s = old_grid.samples()
    new_s = new_grid.samples()
    ratio = old_grid.delta_s / new_grid.delta_s

    imp_idx = _find_impulses(values)
    smooth = values.copy()
    smooth[imp_idx] = 0.0
    out = np.interp(new_s, old_s, smooth)
    for i in imp_idx:
        j = new_grid.index_of(old_s[i])
        out[j] += values[i] * ratio

    bounds = [old_grid.s_min, old_grid.s_max] if boundaries is None else list(boundaries)
    for a, b in zip(bounds[:-1], bounds[1:]):
        io0, io1 = _index_range(old_grid, a, b)
        in0, in1 = _index_range(new_grid, a, b)
        target = float(np.sum(values[io0:io1]) * old_grid.delta_s)
        got = float(np.sum(out[in0:in1]) * new_grid.delta_s)
        err = target - got
        if abs(err) == 0.0 or in1 == in0:
            continue
        if abs(got) > 1e-300:
            out[in0:in1] *= target / got
        else:
            out[in0:in1] += err / ((in1 - in0) * new_grid.delta_s)
    return out


def resample(
    coords: DerivativeCoords,
    new_delta_s: float,
    branch_points=None,
) -> DerivativeCoords:
    """Change the grid step, keeping per-interval integrals invariant.

    branch_points optionally lists interval boundaries (s values) between
    which the radial and angular integrals must be preserved exactly; by
    default only the whole-domain integrals are pinned.
    """
    old = coords.grid
    new_grid = SGrid(old.s_min, old.s_max, new_delta_s)
    if new_grid.count < 2:
        raise GridError("resampled grid would have fewer than 2 samples")
    boundaries = None
    if branch_points is not None:
        pts = sorted(float(p) for p in branch_points)
        boundaries = [old.s_min] + [p for p in pts if old.s_min < p < old.s_max]
        boundaries.append(old.s_max)
    radial = _resample_values(coords.radial_values, old, new_grid, boundaries)
    np.clip(radial, 0.0, None, out=radial)
    angular = [
        _resample_values(a, old, new_grid, boundaries) for a in coords.angular_values
    ]
    return DerivativeCoords.from_arrays(radial, angular, new_grid)


def load_coords_csv(source) -> DerivativeCoords:
    """Parse derivative coordinates from CSV with header s,dr,dphi[,dpsi,...].

    One row per grid sample; the s column must be uniformly spaced.
    Accepts a path or an open text file.
    """
    if hasattr(source, "read"):
        rows = list(csv.reader(source))
    else:
        with open(source, newline="") as f:
            rows = list(csv.reader(f))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if len(rows) < 3:
        raise GridError("coordinate CSV needs a header row and at least 2 samples")
    header = [c.strip().lower() for c in rows[0]]
    if len(header) < 3 or header[0] != "s" or header[1] != "dr":
        raise GridError(
            f"coordinate CSV header must start with s,dr,dphi; got {header}"
        )
    try:
        data = np.array([[float(c) for c in r] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise GridError(f"coordinate CSV has a non-numeric cell: {exc}") from None
    if data.shape[1] != len(header):
        raise GridError("coordinate CSV rows do not match the header width")
    s = data[:, 0]
    steps = np.diff(s)
    ds = steps[0]
    if ds <= 0 or np.any(np.abs(steps - ds) > 1e-9 * max(1.0, abs(ds))):
        raise GridError("coordinate CSV s column is not uniformly spaced")
    grid = SGrid(float(s[0]), float(s[-1]), float(ds))
    if grid.count != len(s):
        raise GridError("coordinate CSV s column does not form a uniform grid")
    return DerivativeCoords.from_arrays(
        data[:, 1], [data[:, k] for k in range(2, data.shape[1])], grid
    )


def coords_to_csv(coords: DerivativeCoords) -> str:
    """Inverse of load_coords_csv; used by tests and the CLI round trip."""
    names = ["dphi", "dpsi"] + [f"dv{k}" for k in range(3, coords.dim - 1)]
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["s", "dr"] + names[: coords.dim - 1])
    for k, s in enumerate(coords.grid.samples()):
        w.writerow(
            [repr(float(s)), repr(float(coords.radial_values[k]))]
            + [repr(float(a[k])) for a in coords.angular_values]
        )
    return buf.getvalue()
