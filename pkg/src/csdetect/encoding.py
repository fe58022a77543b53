"""Encode 2D point sets as per-line sparse vectors and compressed dense codes.

L straight lines with uniformly spread orientations (angle l*pi/L for line
l) are placed entirely outside an h x w patch, each tangent to the circle
of radius diag/2 + margin around the patch centre. A point is recorded on
line l at the bin nearest its orthogonal projection along the line, with
the perpendicular distance as the stored value. Because every line is
outside the patch, all stored distances are >= margin, which is what makes
a fixed pruning threshold on recovered values safe. Each of the L sparse
vectors is then compressed by the shared sensing matrix, x_l = D a_l.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, GeometryError

GUARD_BINS = 2  # padding on each end of a line so corner projections never round out


@dataclass(frozen=True)
class PatchShape:
    h: int
    w: int

    def __post_init__(self):
        if self.h <= 0 or self.w <= 0:
            raise DimensionError(f"patch shape must be positive, got {self.h}x{self.w}")


@dataclass(frozen=True)
class ProjectionGeometry:
    """L encoding lines for one patch shape.

    anchors[l] is the point on line l that bin 0 measures from,
    directions[l] the unit vector along the line (angle l*pi/L), and
    normals[l] the unit normal oriented so the whole patch sits on the
    positive side. code_len is the per-line sparse vector length:
    ceil(patch diagonal) plus GUARD_BINS of padding at each end.
    """

    shape: PatchShape
    num_lines: int
    anchors: np.ndarray
    directions: np.ndarray
    normals: np.ndarray
    offset_margin: float
    code_len: int
    seed: int

    def __post_init__(self):
        for arr in (self.anchors, self.directions, self.normals):
            arr.setflags(write=False)

    def line(self, l):
        return self.anchors[l], self.directions[l], self.normals[l]


@dataclass(frozen=True)
class PointSet:
    """Sub-pixel (x, y) centroids inside an h x w patch."""

    points: np.ndarray
    shape: PatchShape

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "points", pts)
        pts.setflags(write=False)
        if len(pts):
            x, y = pts[:, 0], pts[:, 1]
            if (x < 0).any() or (x >= self.shape.w).any() \
                    or (y < 0).any() or (y >= self.shape.h).any():
                raise GeometryError("point outside patch bounds")

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class SparseCode:
    """Per-line sparse vectors, stacked (L, n). collisions counts points
    dropped because another point quantized to the same bin on a line."""

    per_line: np.ndarray
    geometry: ProjectionGeometry
    collisions: int = 0

    def __post_init__(self):
        self.per_line.setflags(write=False)

    def concatenated(self):
        return self.per_line.reshape(-1)


@dataclass(frozen=True)
class DenseCode:
    """Per-line compressed codes, stacked (L, m)."""

    per_line: np.ndarray
    geometry: ProjectionGeometry
    matrix: object = field(repr=False, default=None)

    def __post_init__(self):
        self.per_line.setflags(write=False)

    def concatenated(self):
        return self.per_line.reshape(-1)


def code_len_for(shape):
    """Per-line vector length: ceil(sqrt(h^2 + w^2)) + guard padding."""
    return math.ceil(math.hypot(shape.h, shape.w)) + 2 * GUARD_BINS


def make_geometry(shape, num_lines, margin, seed=0):
    """Build the L-line geometry for a patch shape.

    Line l runs at angle l*pi/L, tangent to the circle of radius
    diag/2 + margin around the patch centre, with its anchor shifted so
    every projection of the patch lands in the interior bins. The
    construction is fully deterministic; seed is kept in the geometry for
    provenance only.
    """
    if num_lines < 1:
        raise DimensionError(f"need at least one line, got {num_lines}")
    if margin <= 0:
        raise GeometryError(f"margin must be positive, got {margin}")
    diag = math.hypot(shape.h, shape.w)
    n = code_len_for(shape)
    center = np.array([shape.w / 2.0, shape.h / 2.0])
    radius = diag / 2.0 + margin

    angles = np.arange(num_lines) * (math.pi / num_lines)
    directions = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    normals = np.stack([-np.sin(angles), np.cos(angles)], axis=1)
    anchors = center - radius * normals - (n / 2.0) * directions
    return ProjectionGeometry(shape=shape, num_lines=num_lines, anchors=anchors,
                              directions=directions, normals=normals,
                              offset_margin=float(margin), code_len=n,
                              seed=int(seed))


def project_point(geom, point):
    """(bin position t, perpendicular distance v) of one point on every line.

    t is the un-quantized coordinate along each line; v is always in
    [margin, diag + margin] by construction. This is the analytic core of
    encode_sparse, exposed for oracle-style checks.
    """
    rel = np.asarray(point, dtype=np.float64) - geom.anchors
    t = np.einsum("ld,ld->l", rel, geom.directions)
    v = np.einsum("ld,ld->l", rel, geom.normals)
    return t, v


def encode_sparse(points, geom, splat=False):
    """Project every point of a PointSet onto every line.

    The stored value at the quantized bin is the signed perpendicular
    distance (positive under this geometry). When two points fall in the
    same bin on a line the larger-magnitude distance wins and the drop is
    counted in ``collisions``; the point stays recoverable from the other
    lines.

    With splat=True each point instead deposits its distance across the
    two bins bracketing its exact projection, linearly weighted, and
    coinciding masses add. The code is then a continuous function of the
    point positions (a decoder recovers the exact projection from the
    two-bin centre of mass), which is the variant regression targets use.
    """
    if points.shape != geom.shape:
        raise DimensionError("point set and geometry have different patch shapes")
    L, n = geom.num_lines, geom.code_len
    code = np.zeros((L, n))
    collisions = 0
    if len(points):
        rel = points.points[None, :, :] - geom.anchors[:, None, :]   # (L, P, 2)
        t = np.einsum("lpd,ld->lp", rel, geom.directions)
        v = np.einsum("lpd,ld->lp", rel, geom.normals)
        if splat:
            lo = np.floor(t).astype(np.intp)
            if (lo < 0).any() or (lo + 1 >= n).any():
                raise GeometryError("projected index outside code range; "
                                    "margin/padding misconfigured")
            frac = t - lo
            for l in range(L):
                np.add.at(code[l], lo[l], v[l] * (1.0 - frac[l]))
                np.add.at(code[l], lo[l] + 1, v[l] * frac[l])
            return SparseCode(per_line=code, geometry=geom, collisions=0)
        idx = np.rint(t).astype(np.intp)
        if (idx < 0).any() or (idx >= n).any():
            raise GeometryError("projected index outside code range; "
                                "margin/padding misconfigured")
        for l in range(L):
            # ascending |v| so the largest magnitude lands last, independent
            # of input point order
            order = np.lexsort((v[l], np.abs(v[l])))
            row = code[l]
            row[idx[l][order]] = v[l][order]
            collisions += len(points) - np.count_nonzero(row)
    return SparseCode(per_line=code, geometry=geom, collisions=collisions)


def encode_dense(a, D):
    """Compress each per-line sparse vector: x_l = D a_l, stacked (L, m)."""
    if D.n != a.geometry.code_len:
        raise DimensionError(
            f"sensing matrix has {D.n} columns, geometry code length is "
            f"{a.geometry.code_len}")
    dense = a.per_line @ D.entries.T
    return DenseCode(per_line=dense, geometry=a.geometry, matrix=D)
