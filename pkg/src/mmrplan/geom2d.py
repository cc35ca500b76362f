"""Planar geometry primitives: polygons, half-planes, ellipses, visibility.

All predicates use an absolute tolerance of ``EPS`` (1e-9 m, desk scale) and
inputs to boolean operations are snapped to a 1e-12 grid, which keeps the
pipeline robust without exact arithmetic.  Boolean operations (Minkowski
dilation, union, clipping) are backed by shapely; visibility and the ellipse
operations are implemented directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import shapely
import shapely.geometry as sgeom
import shapely.ops

from .errors import DegenerateFitError, EmptyResultError

EPS = 1e-9
SNAP = 1e-12


def _snap(arr):
    return np.round(np.asarray(arr, dtype=float) / SNAP) * SNAP


class Polygon:
    """Simple polygon with CCW-oriented vertices, stored as an (n, 2) array.

    The constructor normalizes orientation and drops consecutive duplicate
    vertices; callers are responsible for providing non-self-intersecting
    rings.
    """

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2:
            raise ValueError("polygon vertices must be an (n, 2) array")
        if not np.all(np.isfinite(v)):
            raise ValueError("polygon vertices must be finite")
        # drop consecutive duplicates (including a repeated closing vertex)
        keep = [0]
        for i in range(1, len(v)):
            if np.max(np.abs(v[i] - v[keep[-1]])) > SNAP:
                keep.append(i)
        if len(keep) > 1 and np.max(np.abs(v[keep[-1]] - v[keep[0]])) <= SNAP:
            keep.pop()
        v = v[keep]
        if len(v) < 3:
            raise ValueError("polygon needs at least 3 distinct vertices")
        area2 = _signed_area2(v)
        if abs(area2) < 2 * EPS * EPS:
            raise ValueError("degenerate polygon with ~zero area")
        if area2 < 0:
            v = v[::-1].copy()
        self.vertices = v

    def __len__(self):
        return len(self.vertices)

    def __repr__(self):
        return f"Polygon({len(self.vertices)} vertices, area={self.area:.6g})"

    @property
    def area(self) -> float:
        return 0.5 * _signed_area2(self.vertices)

    def edges(self):
        v = self.vertices
        for i in range(len(v)):
            yield v[i], v[(i + 1) % len(v)]

    def to_shapely(self) -> sgeom.Polygon:
        return sgeom.Polygon(_snap(self.vertices))

    @staticmethod
    def from_shapely(sp: sgeom.Polygon) -> "Polygon":
        return Polygon(np.asarray(sp.exterior.coords)[:-1])


@dataclass
class HalfPlane:
    """Feasible set {x : a @ x <= b} with a nonzero normal ``a``."""

    a: np.ndarray
    b: float

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        n = np.linalg.norm(self.a)
        if not n > 0:
            raise ValueError("half-plane normal must be nonzero")

    def normalized(self) -> "HalfPlane":
        n = np.linalg.norm(self.a)
        return HalfPlane(self.a / n, self.b / n)

    def contains(self, p, tol=EPS) -> bool:
        return float(self.a @ np.asarray(p, dtype=float)) <= self.b + tol


class Ellipse:
    """Ellipse {C @ xbar + d : |xbar| <= 1} with C symmetric positive definite.

    C = R.T @ diag(a, b) @ R with a >= b > 0 after canonicalization.
    """

    def __init__(self, C, d):
        C = np.asarray(C, dtype=float)
        d = np.asarray(d, dtype=float)
        if C.shape != (2, 2) or d.shape != (2,):
            raise ValueError("C must be 2x2 and d a 2-vector")
        if np.max(np.abs(C - C.T)) > 1e-9 * max(1.0, np.max(np.abs(C))):
            raise ValueError("C must be symmetric")
        w = np.linalg.eigvalsh(C)
        if w[0] <= 0:
            raise ValueError("C must be positive definite")
        self.C = 0.5 * (C + C.T)
        self.d = d

    @staticmethod
    def from_axes(rotation, a, b, d) -> "Ellipse":
        """Build from a world-to-ellipse rotation and semi-axes (a major-ish)."""
        if a <= 0 or b <= 0:
            raise ValueError("semi-axes must be positive")
        R = np.asarray(rotation, dtype=float)
        C = R.T @ np.diag([a, b]) @ R
        return Ellipse(C, d)

    def axes(self):
        """Return (a, b) with a >= b, the canonical semi-axis lengths."""
        w = np.linalg.eigvalsh(self.C)
        return float(w[1]), float(w[0])

    def rotation(self) -> np.ndarray:
        """World-to-ellipse rotation R with C = R.T diag(a, b) R, a >= b."""
        w, V = np.linalg.eigh(self.C)
        R = np.column_stack([V[:, 1], V[:, 0]]).T
        if np.linalg.det(R) < 0:
            R[1] = -R[1]
        return R

    def norm_of(self, x) -> float:
        """|C^-1 (x - d)|; 1.0 on the boundary."""
        return float(np.linalg.norm(np.linalg.solve(self.C, np.asarray(x, dtype=float) - self.d)))

    def boundary_points(self, n=128) -> np.ndarray:
        t = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
        circ = np.stack([np.cos(t), np.sin(t)], axis=1)
        return circ @ self.C.T + self.d


def _signed_area2(v) -> float:
    x, y = v[:, 0], v[:, 1]
    return float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _point_segment_dist(p, a, b) -> float:
    ab = b - a
    denom = float(ab @ ab)
    if denom <= SNAP * SNAP:
        return float(np.hypot(*(p - a)))
    t = min(1.0, max(0.0, float((p - a) @ ab) / denom))
    proj = a + t * ab
    return float(np.hypot(*(p - proj)))


def polygon_contains(poly: Polygon, p, include_boundary=True) -> bool:
    """Point-in-polygon test; points within EPS of the boundary count as inside
    (or outside when ``include_boundary`` is False)."""
    if not isinstance(poly, Polygon):
        raise ValueError("polygon_contains requires a Polygon")
    p = np.asarray(p, dtype=float)
    v = poly.vertices
    for a, b in poly.edges():
        if _point_segment_dist(p, a, b) <= EPS:
            return include_boundary
    # crossing-number test, safe because p is not within EPS of any edge
    inside = False
    x, y = p
    n = len(v)
    for i in range(n):
        x1, y1 = v[i]
        x2, y2 = v[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            xin = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xin:
                inside = not inside
    return inside


def _circumscribed_disc(r: float, sides: int) -> np.ndarray:
    """Regular polygon with inradius r (contains the radius-r disc)."""
    R = r / math.cos(math.pi / sides)
    ang = (2.0 * np.arange(sides) + 1.0) * math.pi / sides
    return np.stack([R * np.cos(ang), R * np.sin(ang)], axis=1)


def _fill_holes(sp):
    return sgeom.Polygon(sp.exterior)


def _polygonal_parts(geom):
    if geom.is_empty:
        return []
    if isinstance(geom, sgeom.Polygon):
        return [geom]
    if isinstance(geom, (sgeom.MultiPolygon, sgeom.GeometryCollection)):
        parts = []
        for g in geom.geoms:
            parts.extend(_polygonal_parts(g))
        return parts
    return []


def dilate_polygon(poly: Polygon, r: float, disc_sides: int = 16) -> Polygon:
    """Minkowski sum of ``poly`` with a circumscribed regular ``disc_sides``-gon
    of radius ``r``; conservatively contains the exact disc dilation."""
    if r < 0:
        raise ValueError("dilation radius must be >= 0")
    if disc_sides < 8:
        raise ValueError("disc_sides must be >= 8")
    if r == 0:
        return Polygon(poly.vertices.copy())
    disc = _circumscribed_disc(r, disc_sides)
    pieces = [poly.to_shapely()]
    for a, b in poly.edges():
        pts = np.vstack([a + disc, b + disc])
        pieces.append(sgeom.MultiPoint(_snap(pts)).convex_hull)
    merged = shapely.ops.unary_union(pieces)
    parts = _polygonal_parts(merged)
    if len(parts) != 1:
        parts.sort(key=lambda g: g.area)
    return Polygon.from_shapely(_fill_holes(parts[-1]))


def union_polygons(polys) -> list[Polygon]:
    """Union of solid polygons as pairwise-disjoint simple polygons.

    Holes arising from enclosing rings are filled; obstacles are solid and the
    planner only needs the free-space complement.
    """
    if not polys:
        return []
    merged = shapely.ops.unary_union([p.to_shapely() for p in polys])
    out = [Polygon.from_shapely(_fill_holes(part)) for part in _polygonal_parts(merged)]
    # refuse silently-degenerate output
    if not out:
        raise ValueError("union produced no polygonal area")
    return out


def _segment_params(p, q, a, b):
    """Parameters t along segment pq where it meets segment ab (within EPS).

    Returns 0, 1 or 2 parameters; 2 for collinear overlap.
    """
    p, q, a, b = (np.asarray(u, dtype=float) for u in (p, q, a, b))
    d1 = q - p
    d2 = b - a
    denom = d1[0] * d2[1] - d1[1] * d2[0]
    r = a - p
    len1 = max(np.hypot(*d1), SNAP)
    len2 = max(np.hypot(*d2), SNAP)
    if abs(denom) > EPS * len1 * len2:
        t = (r[0] * d2[1] - r[1] * d2[0]) / denom
        s = (r[0] * d1[1] - r[1] * d1[0]) / denom
        tol_t = EPS / len1
        tol_s = EPS / len2
        if -tol_t <= t <= 1 + tol_t and -tol_s <= s <= 1 + tol_s:
            return [min(1.0, max(0.0, t))]
        return []
    # parallel: collinear iff a is on the line through p, q
    if abs(d1[0] * r[1] - d1[1] * r[0]) > EPS * len1:
        return []
    denom2 = float(d1 @ d1)
    if denom2 <= SNAP:
        return []
    ta = float((a - p) @ d1) / denom2
    tb = float((b - p) @ d1) / denom2
    lo, hi = min(ta, tb), max(ta, tb)
    lo, hi = max(0.0, lo), min(1.0, hi)
    if lo > hi:
        return []
    return [lo, hi] if hi - lo > SNAP else [lo]


def _segment_blocked_by(p, q, poly: Polygon) -> bool:
    """True iff the open segment pq passes through the interior of ``poly``."""
    params = [0.0, 1.0]
    for a, b in poly.edges():
        params.extend(_segment_params(p, q, a, b))
    params = sorted(set(params))
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    for t0, t1 in zip(params[:-1], params[1:]):
        if t1 - t0 <= SNAP:
            continue
        mid = p + (0.5 * (t0 + t1)) * (q - p)
        if polygon_contains(poly, mid, include_boundary=False):
            return True
    return False


def _segment_leaves(p, q, boundary: Polygon) -> bool:
    """True iff any part of segment pq lies outside ``boundary``."""
    params = [0.0, 1.0]
    for a, b in boundary.edges():
        params.extend(_segment_params(p, q, a, b))
    params = sorted(set(params))
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    for t0, t1 in zip(params[:-1], params[1:]):
        if t1 - t0 <= SNAP:
            continue
        mid = p + (0.5 * (t0 + t1)) * (q - p)
        if not polygon_contains(poly=boundary, p=mid, include_boundary=True):
            return True
    return False


def mutually_visible(p, q, obstacles, boundary: Polygon | None = None) -> bool:
    """Line of sight between p and q: the segment crosses no obstacle interior
    and stays inside the boundary.  Grazing contact at obstacle vertices or
    along obstacle edges counts as visible."""
    for obs in obstacles:
        if _segment_blocked_by(p, q, obs):
            return False
    if boundary is not None and _segment_leaves(p, q, boundary):
        return False
    return True


def visible_vertices(p, obstacles, boundary: Polygon | None = None):
    """All obstacle and boundary vertices visible from p, sorted by angle.

    Raises ValueError when p sits strictly inside an obstacle or outside the
    boundary.
    """
    p = np.asarray(p, dtype=float)
    for obs in obstacles:
        if polygon_contains(obs, p, include_boundary=False):
            raise ValueError("query point lies inside an obstacle")
    if boundary is not None and not polygon_contains(boundary, p):
        raise ValueError("query point lies outside the boundary")
    cand = [v for obs in obstacles for v in obs.vertices]
    if boundary is not None:
        cand.extend(list(boundary.vertices))
    seen = set()
    out = []
    for v in cand:
        key = tuple(_snap(v))
        if key in seen:
            continue
        seen.add(key)
        if np.hypot(*(v - p)) <= EPS:
            continue
        if mutually_visible(p, v, obstacles, boundary):
            out.append(np.asarray(v, dtype=float))
    out.sort(key=lambda v: (math.atan2(v[1] - p[1], v[0] - p[0]), np.hypot(*(v - p))))
    return out


def concave_vertices(poly: Polygon) -> list[np.ndarray]:
    """Reflex vertices (interior angle > pi) of a simple CCW polygon."""
    v = poly.vertices
    n = len(v)
    out = []
    for i in range(n):
        prev, cur, nxt = v[i - 1], v[i], v[(i + 1) % n]
        if _cross(prev, cur, nxt) < -EPS:
            out.append(cur)
    return out


def halfplanes_of_polygon(poly: Polygon) -> list[HalfPlane]:
    """Edge half-planes of a convex CCW polygon, normals unit and outward."""
    out = []
    for a, b in poly.edges():
        e = b - a
        n = np.array([e[1], -e[0]])
        ln = np.linalg.norm(n)
        if ln <= SNAP:
            continue
        n = n / ln
        out.append(HalfPlane(n, float(n @ a)))
    return out


def clip_polygon(poly: Polygon, h: HalfPlane, keep_point=None) -> Polygon:
    """Intersection of ``poly`` with the half-plane ``h``.

    When the cut splits the polygon, the component containing ``keep_point``
    is returned (largest component if no point is given).  An empty
    intersection raises EmptyResultError.
    """
    hn = h.normalized()
    v = poly.vertices
    span = float(np.max(np.abs(v))) + abs(hn.b) + 10.0
    # box representation of the half-plane, large enough to cover the polygon
    t = np.array([-hn.a[1], hn.a[0]])
    base = hn.a * hn.b
    box = sgeom.Polygon([
        base + 2 * span * t,
        base - 2 * span * t,
        base - 2 * span * t - 2 * span * hn.a,
        base + 2 * span * t - 2 * span * hn.a,
    ])
    res = poly.to_shapely().intersection(box)
    parts = [g for g in _polygonal_parts(res) if g.area > EPS]
    if not parts:
        raise EmptyResultError("clip produced an empty region")
    if keep_point is not None:
        kp = sgeom.Point(*np.asarray(keep_point, dtype=float))
        parts.sort(key=lambda g: (g.distance(kp), -g.area))
        chosen = parts[0]
    else:
        chosen = max(parts, key=lambda g: g.area)
    return Polygon.from_shapely(_fill_holes(chosen))


def ellipse_tangent_halfplane(e: Ellipse, x_star, tol=1e-6) -> HalfPlane:
    """Supporting half-plane of ``e`` whose boundary is tangent at ``x_star``.

    a = 2 C^-T C^-1 (x* - d), b = a @ x*; requires |C^-1 (x* - d)| = 1 within
    ``tol``.
    """
    x_star = np.asarray(x_star, dtype=float)
    nrm = e.norm_of(x_star)
    if abs(nrm - 1.0) > tol:
        raise ValueError(f"x_star is not on the ellipse boundary (|xbar| = {nrm:.6g})")
    Cinv = np.linalg.inv(e.C)
    a = 2.0 * Cinv.T @ Cinv @ (x_star - e.d)
    return HalfPlane(a, float(a @ x_star))


def fit_ellipse_minor_axis(rotation, a: float, d, x_star, eps=1e-9) -> Ellipse:
    """Ellipse with fixed center d, orientation and semi-major a whose boundary
    passes through x_star; solves b = |u2| / sqrt(1 - (u1/a)^2) with
    u = R (x_star - d)."""
    R = np.asarray(rotation, dtype=float)
    d = np.asarray(d, dtype=float)
    u = R @ (np.asarray(x_star, dtype=float) - d)
    if abs(u[0]) >= a - eps:
        raise DegenerateFitError(f"touch point beyond the major axis span (|u1| = {abs(u[0]):.6g} >= a = {a:.6g})")
    if abs(u[1]) <= eps:
        raise DegenerateFitError("touch point lies on the major-axis line")
    ratio = (u[0] / a) ** 2
    if ratio > 1.0 - 1e-12:
        raise DegenerateFitError("touch point numerically on the major-axis tip")
    b = abs(u[1]) / math.sqrt(1.0 - ratio)
    return Ellipse.from_axes(R, a, b, d)


def dilate_ellipse_to_point(e0: Ellipse, x_star) -> Ellipse:
    """Scale ``e0`` about its center, keeping the aspect ratio, until the
    boundary reaches ``x_star``; the point must not be strictly inside."""
    s = e0.norm_of(x_star)
    if s < 1.0 - 1e-9:
        raise ValueError(f"point is strictly inside the ellipse (scale {s:.6g} < 1)")
    s = max(s, 1.0)
    return Ellipse(s * e0.C, e0.d)
