"""Voxel realization of construction sequences.

Loops are discretized to polylines, filled with the even-odd rule, placed on
their sketch plane, swept along the plane normal and merged into an ``R^3``
occupancy grid covering the cube ``[-1, 1]^3``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from cadseq.cad_core import (
    CUT, INTERSECT, JOIN, ONE_SIDED, SYMMETRIC, TWO_SIDED,
    CadSequence, CommandType, SketchExtrudePair, SWEEP_RANGE, COORD_RANGE,
    dequantize, dequantize_param, split_pairs,
)

DEFAULT_RESOLUTION = 64
DEFAULT_ARC_SEGMENTS = 16
DEFAULT_N_POINTS = 2000
EXTENT = (-1.0, 1.0)

# closure tolerance: half a quantization step of the sketch coordinates
CLOSE_TOL = 0.5 * (COORD_RANGE[1] - COORD_RANGE[0]) / 256
SWEEP_STEP = (SWEEP_RANGE[1] - SWEEP_RANGE[0]) / 256


class GeometryError(ValueError):
    pass


class OpenLoop(GeometryError):
    pass


class DegenerateArc(GeometryError):
    pass


class EmptySolid(GeometryError):
    pass


class OutOfExtent(GeometryError):
    pass


class EmptyCloud(GeometryError):
    pass


class GeometricInvalidity(GeometryError):
    pass


@dataclass
class LoopPolyline:
    points: np.ndarray   # (k, 2), closed implicitly

    @property
    def area(self) -> float:
        return polygon_area(self.points)

    @property
    def orientation(self) -> int:
        return 1 if self.area > 0 else -1


def polygon_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


# ---------------------------------------------------------------------------
# loops


def arc_points(start, end, sweep: float, bulge_left: bool, segments: int) -> np.ndarray:
    """Points of the arc from ``start`` to ``end`` subtending ``sweep`` radians.

    Returns ``segments + 1`` points including both endpoints. With
    ``bulge_left`` the arc lies to the left of the start-to-end chord (the
    ``c = 1`` flag), otherwise to its right.
    """
    s = np.asarray(start, dtype=np.float64)
    e = np.asarray(end, dtype=np.float64)
    chord = e - s
    d = math.hypot(chord[0], chord[1])
    if d < CLOSE_TOL:
        raise DegenerateArc("arc endpoints coincide")
    if not 0.0 < sweep < 2 * math.pi:
        raise DegenerateArc(f"sweep {sweep} outside (0, 2pi)")
    left = np.array([-chord[1], chord[0]]) / d
    # signed offset of the center from the chord midpoint along ``left``
    h = d / (2.0 * math.tan(sweep / 2.0))
    center = 0.5 * (s + e) + (-h if bulge_left else h) * left
    radius = d / (2.0 * math.sin(sweep / 2.0))
    a0 = math.atan2(s[1] - center[1], s[0] - center[0])
    # bulging left means turning clockwise about the center
    sign = -1.0 if bulge_left else 1.0
    t = np.linspace(0.0, 1.0, segments + 1)
    ang = a0 + sign * sweep * t
    pts = center + radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    pts[0], pts[-1] = s, e
    return pts


def circle_points(center, radius: float, n: int) -> np.ndarray:
    ang = 2 * math.pi * np.arange(n) / n
    c = np.asarray(center, dtype=np.float64)
    return c + radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _xy(cmd) -> np.ndarray:
    return np.array([dequantize(cmd["x"], *COORD_RANGE), dequantize(cmd["y"], *COORD_RANGE)])


def discretize_loop(loop: Sequence, arc_segments: int = DEFAULT_ARC_SEGMENTS) -> LoopPolyline:
    """Turn ``(SOL, curve, ...)`` into a closed polyline.

    Each curve starts where the previous one ended; the first curve starts at
    the endpoint of the last curve.
    """
    if not loop or loop[0].ctype != CommandType.SOL:
        raise OpenLoop("loop must begin with SOL")
    curves = list(loop[1:])
    if not curves:
        raise OpenLoop("loop has no curves")
    circles = [c for c in curves if c.ctype == CommandType.CIRCLE]
    if circles:
        if len(curves) != 1:
            raise OpenLoop("a circle loop must contain exactly one circle")
        c = circles[0]
        r = dequantize_param("r", c["r"])
        return LoopPolyline(circle_points(_xy(c), r, arc_segments * 4))

    ends = [_xy(c) for c in curves]
    pts = []
    prev = ends[-1]
    for cmd, end in zip(curves, ends):
        if np.max(np.abs(end - prev)) < CLOSE_TOL:
            raise OpenLoop("zero-length curve breaks the loop chain")
        if cmd.ctype == CommandType.LINE:
            pts.append(prev)
        elif cmd.ctype == CommandType.ARC:
            sweep = dequantize(cmd["theta"], *SWEEP_RANGE)
            if sweep < SWEEP_STEP:
                raise DegenerateArc("sweep angle below one quantization step")
            pts.extend(arc_points(prev, end, sweep, cmd["c"] == 1, arc_segments)[:-1])
        else:
            raise OpenLoop(f"unexpected {cmd.ctype.name} inside a loop")
        prev = end
    poly = np.array(pts)
    if len(poly) < 3 or abs(polygon_area(poly)) < CLOSE_TOL ** 2:
        raise OpenLoop("loop does not enclose an area")
    return LoopPolyline(poly)


def even_odd_inside(u: np.ndarray, v: np.ndarray, loops: Sequence[LoopPolyline]) -> np.ndarray:
    """Even-odd membership of points ``(u, v)`` in the union of loop boundaries."""
    inside = np.zeros(u.shape, dtype=bool)
    for lp in loops:
        p = lp.points
        q = np.roll(p, -1, axis=0)
        for (ax, ay), (bx, by) in zip(p, q):
            if ay == by:
                continue
            straddle = (ay > v) != (by > v)
            xcross = ax + (v - ay) * (bx - ax) / (by - ay)
            inside ^= straddle & (u < xcross)
    return inside


# ---------------------------------------------------------------------------
# voxel grids


@dataclass
class VoxelGrid:
    resolution: int = DEFAULT_RESOLUTION
    occupancy: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.occupancy is None:
            self.occupancy = np.zeros((self.resolution,) * 3, dtype=bool)

    @property
    def pitch(self) -> float:
        return (EXTENT[1] - EXTENT[0]) / self.resolution

    @property
    def count(self) -> int:
        return int(self.occupancy.sum())

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.resolution, self.occupancy.copy())

    def __eq__(self, other) -> bool:
        return (isinstance(other, VoxelGrid) and self.resolution == other.resolution
                and np.array_equal(self.occupancy, other.occupancy))

    def centers(self) -> np.ndarray:
        return EXTENT[0] + (np.arange(self.resolution) + 0.5) * self.pitch

    def to_json(self) -> str:
        flat = np.flatnonzero(self.occupancy.ravel()).tolist()
        return json.dumps({"resolution": self.resolution, "occupied": flat})

    @classmethod
    def from_json(cls, text: str) -> "VoxelGrid":
        d = json.loads(text)
        r = int(d["resolution"])
        occ = np.zeros(r ** 3, dtype=bool)
        occ[np.asarray(d["occupied"], dtype=np.int64)] = True
        return cls(r, occ.reshape(r, r, r))


def union(a: VoxelGrid, b: VoxelGrid) -> VoxelGrid:
    return VoxelGrid(a.resolution, a.occupancy | b.occupancy)


def difference(a: VoxelGrid, b: VoxelGrid) -> VoxelGrid:
    return VoxelGrid(a.resolution, a.occupancy & ~b.occupancy)


def intersection(a: VoxelGrid, b: VoxelGrid) -> VoxelGrid:
    return VoxelGrid(a.resolution, a.occupancy & b.occupancy)


BOOLEAN_OPS = {JOIN: union, CUT: difference, INTERSECT: intersection}


def rotation_matrix(alpha: float, beta: float, gamma: float) -> np.ndarray:
    """``Rx(alpha) @ Ry(beta) @ Rz(gamma)``; columns are the plane x-axis,
    y-axis and normal."""
    ca, sa = math.cos(alpha), math.sin(alpha)
    cb, sb = math.cos(beta), math.sin(beta)
    cg, sg = math.cos(gamma), math.sin(gamma)
    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cg, -sg, 0], [sg, cg, 0], [0, 0, 1]])
    return rx @ ry @ rz


@dataclass
class ExtrudeParams:
    """Dequantized extrusion parameters."""

    orientation: tuple = (0.0, 0.0, 0.0)
    origin: tuple = (0.0, 0.0, 0.0)
    scale: float = 1.0
    d1: float = 0.5
    d2: float = 0.0
    op: int = JOIN
    kind: int = ONE_SIDED

    @classmethod
    def from_command(cls, cmd) -> "ExtrudeParams":
        g = lambda k: dequantize_param(k, cmd[k])  # noqa: E731
        return cls(
            orientation=(g("alpha"), g("beta"), g("gamma")),
            origin=(g("o_x"), g("o_y"), g("o_z")),
            scale=g("s"), d1=g("d1"), d2=g("d2"), op=cmd["b"], kind=cmd["w"],
        )

    def depth_interval(self) -> tuple:
        if self.kind == ONE_SIDED:
            return 0.0, self.d1
        if self.kind == SYMMETRIC:
            return -0.5 * self.d1, 0.5 * self.d1
        if self.kind == TWO_SIDED:
            return -self.d2, self.d1
        raise GeometryError(f"unknown extrude type {self.kind}")


def rasterize_body(loops: Sequence[LoopPolyline], params: ExtrudeParams,
                   resolution: int = DEFAULT_RESOLUTION) -> VoxelGrid:
    """Voxelize one extruded profile.

    A voxel is occupied when its center lies inside the swept profile. Slabs
    thinner than one voxel pitch are widened to one pitch about their middle so
    a positive depth never vanishes.
    """
    grid = VoxelGrid(resolution)
    pitch = grid.pitch
    rot = rotation_matrix(*params.orientation)
    xa, ya, nrm = rot[:, 0], rot[:, 1], rot[:, 2]
    origin = np.asarray(params.origin, dtype=np.float64)
    t0, t1 = params.depth_interval()
    if t1 - t0 < pitch:
        mid = 0.5 * (t0 + t1)
        t0, t1 = mid - 0.5 * pitch, mid + 0.5 * pitch
    if params.scale <= 0:
        raise EmptySolid("non-positive sketch scale")

    allpts = np.concatenate([lp.points for lp in loops]) * params.scale
    umin, vmin = allpts.min(axis=0)
    umax, vmax = allpts.max(axis=0)
    corners = np.array([origin + u * xa + v * ya + t * nrm
                        for u in (umin, umax) for v in (vmin, vmax) for t in (t0, t1)])
    lo = np.floor((corners.min(axis=0) - EXTENT[0]) / pitch).astype(int)
    hi = np.ceil((corners.max(axis=0) - EXTENT[0]) / pitch).astype(int)
    lo = np.clip(lo, 0, resolution)
    hi = np.clip(hi, 0, resolution)
    if np.any(hi <= lo):
        raise OutOfExtent("extruded body lies outside the model cube")

    c = grid.centers()
    gx, gy, gz = np.meshgrid(c[lo[0]:hi[0]], c[lo[1]:hi[1]], c[lo[2]:hi[2]], indexing="ij")
    d = np.stack([gx - origin[0], gy - origin[1], gz - origin[2]], axis=-1)
    t = d @ nrm
    slab = (t >= t0) & (t <= t1)
    inside = np.zeros(slab.shape, dtype=bool)
    if slab.any():
        ds = d[slab]
        u = (ds @ xa) / params.scale
        v = (ds @ ya) / params.scale
        inside[slab] = even_odd_inside(u, v, loops)
    grid.occupancy[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = inside
    if not grid.occupancy.any():
        raise EmptySolid("extruded body covers no voxel center")
    return grid


def extrude_pair(pair: SketchExtrudePair, grid: VoxelGrid,
                 arc_segments: int = DEFAULT_ARC_SEGMENTS) -> VoxelGrid:
    loops = [discretize_loop(lp, arc_segments) for lp in pair.loops]
    params = ExtrudeParams.from_command(pair.extrude)
    return merge_body(grid, loops, params)


def merge_body(grid: VoxelGrid, loops, params: ExtrudeParams) -> VoxelGrid:
    body = rasterize_body(loops, params, grid.resolution)
    try:
        op = BOOLEAN_OPS[params.op]
    except KeyError:
        raise GeometryError(f"unknown boolean op {params.op}") from None
    return op(grid, body)


def realize(seq: CadSequence, resolution: int = DEFAULT_RESOLUTION,
            arc_segments: int = DEFAULT_ARC_SEGMENTS) -> VoxelGrid:
    """Fold every sketch-extrude pair into a grid; raise GeometricInvalidity on
    any failure or an empty final solid."""
    try:
        grid = VoxelGrid(resolution)
        for pair in split_pairs(seq):
            grid = extrude_pair(pair, grid, arc_segments)
    except (GeometryError, ValueError) as e:
        raise GeometricInvalidity(f"{type(e).__name__}: {e}") from e
    if not grid.occupancy.any():
        raise GeometricInvalidity("EmptySolid: final solid is empty")
    return grid


# ---------------------------------------------------------------------------
# surface sampling and distances

_FACE_DIRS = [(0, -1), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1)]


def exposed_faces(grid: VoxelGrid) -> np.ndarray:
    """Rows ``(i, j, k, axis, side)`` for every occupied voxel face whose
    neighbour is empty or outside the grid."""
    occ = grid.occupancy
    padded = np.pad(occ, 1)
    out = []
    for axis, side in _FACE_DIRS:
        nb = np.roll(padded, -side, axis=axis)[1:-1, 1:-1, 1:-1]
        idx = np.argwhere(occ & ~nb)
        if len(idx):
            extra = np.tile([axis, side], (len(idx), 1))
            out.append(np.hstack([idx, extra]))
    if not out:
        return np.zeros((0, 5), dtype=np.int64)
    return np.vstack(out)


@dataclass
class PointCloud:
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def count(self) -> int:
        return len(self.points)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["x", "y", "z"])
            for p in self.points:
                w.writerow([repr(float(v)) for v in p])


def sample_surface(grid: VoxelGrid, n: int = DEFAULT_N_POINTS, seed: int = 0) -> PointCloud:
    if n == 0:
        return PointCloud(np.zeros((0, 3)))
    faces = exposed_faces(grid)
    if len(faces) == 0:
        raise EmptySolid("grid has no occupied voxels")
    rng = np.random.default_rng(seed)
    pick = faces[rng.integers(0, len(faces), size=n)]
    pitch = grid.pitch
    uv = rng.random((n, 2))
    pts = EXTENT[0] + (pick[:, :3] + 0.5) * pitch
    axis, side = pick[:, 3], pick[:, 4]
    rows = np.arange(n)
    pts[rows, axis] += 0.5 * side * pitch
    # the two in-face axes
    a1 = (axis + 1) % 3
    a2 = (axis + 2) % 3
    pts[rows, a1] += (uv[:, 0] - 0.5) * pitch
    pts[rows, a2] += (uv[:, 1] - 0.5) * pitch
    return PointCloud(pts)


def nearest_sq_dists(P: np.ndarray, Q: np.ndarray, chunk: int = 512) -> np.ndarray:
    """For every point of ``P`` the squared distance to its nearest point in ``Q``."""
    out = np.empty(len(P))
    qx, qy, qz = Q[:, 0], Q[:, 1], Q[:, 2]
    for s in range(0, len(P), chunk):
        p = P[s:s + chunk]
        dx = p[:, 0:1] - qx
        dy = p[:, 1:2] - qy
        dz = p[:, 2:3] - qz
        out[s:s + chunk] = (dx * dx + dy * dy + dz * dz).min(axis=1)
    return out


def chamfer_distance(P, Q) -> float:
    P = np.asarray(getattr(P, "points", P), dtype=np.float64)
    Q = np.asarray(getattr(Q, "points", Q), dtype=np.float64)
    if len(P) == 0 or len(Q) == 0:
        raise EmptyCloud("chamfer distance needs two non-empty clouds")
    a = math.fsum(nearest_sq_dists(P, Q)) / len(P)
    b = math.fsum(nearest_sq_dists(Q, P)) / len(Q)
    return a + b


def realize_and_sample(seq: CadSequence, resolution: int = DEFAULT_RESOLUTION,
                       n_points: int = DEFAULT_N_POINTS, seed: int = 0,
                       arc_segments: int = DEFAULT_ARC_SEGMENTS) -> PointCloud:
    grid = realize(seq, resolution, arc_segments)
    return sample_surface(grid, n_points, seed)
