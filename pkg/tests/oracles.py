"""Independent brute-force oracles used by the test suite.

Everything here is deliberately written against different primitives than the
library (matplotlib paths, classic orientation-sign intersection tests) so the
checks stay independent of the implementation under test.
"""

import numpy as np
from matplotlib.path import Path


def orient(a, b, c):
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def segments_cross_properly(p, q, a, b, eps=1e-12):
    """Transversal crossing strictly inside both open segments."""
    o1 = orient(p, q, a)
    o2 = orient(p, q, b)
    o3 = orient(a, b, p)
    o4 = orient(a, b, q)
    return (o1 * o2 < -eps) and (o3 * o4 < -eps)


def point_strictly_inside(pt, vertices, shrink=1e-7):
    """Ray-cast containment via matplotlib, biased to exclude the boundary."""
    return Path(vertices).contains_point(tuple(pt), radius=-shrink)


def point_inside_or_on(pt, vertices, grow=1e-7):
    return Path(vertices).contains_point(tuple(pt), radius=grow)


def segment_blocked_oracle(p, q, vertices):
    """True iff the open segment pq passes through the polygon interior.

    Proper edge crossings block; otherwise the segment is split at every
    parameter where it meets an edge line and interval midpoints are tested
    for strict containment (handles grazing, collinear sliding, and endpoints
    on the boundary).
    """
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    n = len(vertices)
    for i in range(n):
        a, b = vertices[i], vertices[(i + 1) % n]
        if segments_cross_properly(p, q, a, b):
            return True
    ts = {0.0, 1.0}
    d = q - p
    dd = float(d @ d)
    if dd == 0.0:
        return point_strictly_inside(p, vertices)
    for i in range(n):
        for v in (vertices[i],):
            t = float((np.asarray(v, float) - p) @ d) / dd
            if 0.0 < t < 1.0:
                ts.add(t)
        a = np.asarray(vertices[i], float)
        b = np.asarray(vertices[(i + 1) % n], float)
        e = b - a
        den = d[0] * e[1] - d[1] * e[0]
        if abs(den) > 1e-12:
            t = ((a[0] - p[0]) * e[1] - (a[1] - p[1]) * e[0]) / den
            if 0.0 < t < 1.0:
                ts.add(t)
    ts = sorted(ts)
    for t0, t1 in zip(ts[:-1], ts[1:]):
        mid = p + 0.5 * (t0 + t1) * d
        if point_strictly_inside(mid, vertices):
            return True
    return False


def visible_oracle(p, v, obstacle_vertex_lists, boundary_vertices=None):
    for verts in obstacle_vertex_lists:
        if segment_blocked_oracle(p, v, verts):
            return False
    if boundary_vertices is not None:
        samples = np.linspace(0.0, 1.0, 257)[:, None]
        pts = np.asarray(p, float)[None, :] * (1 - samples) + np.asarray(v, float)[None, :] * samples
        path = Path(boundary_vertices)
        if not np.all(path.contains_points(pts, radius=1e-7)):
            return False
    return True


def monte_carlo_area(membership_batch, bbox, n, rng):
    """Area of {x in bbox : membership(x)} by uniform sampling.

    ``membership_batch`` maps an (n, 2) array to a boolean array.
    """
    (x0, y0), (x1, y1) = bbox
    pts = rng.uniform([x0, y0], [x1, y1], size=(n, 2))
    frac = np.mean(membership_batch(pts))
    return frac * (x1 - x0) * (y1 - y0)


def random_convex_polygon(rng, center, radius, n_pts=7, grid=0.05):
    """Convex hull of random points, snapped to a coarse grid so scenes stay
    away from epsilon knife-edges."""
    from scipy.spatial import ConvexHull

    for _ in range(50):
        pts = center + rng.uniform(-radius, radius, size=(n_pts, 2))
        pts = np.round(pts / grid) * grid
        uniq = np.unique(pts, axis=0)
        if len(uniq) < 3:
            continue
        try:
            hull = ConvexHull(uniq)
        except Exception:
            continue
        verts = uniq[hull.vertices]
        if len(verts) >= 3:
            return verts
    raise RuntimeError("failed to generate a convex polygon")


def random_scene(rng, n_obstacles=2, max_total_vertices=12, span=10.0):
    """Boundary rectangle plus disjoint convex obstacles on a coarse grid."""
    boundary = np.array([[0.0, 0.0], [span, 0.0], [span, span], [0.0, span]])
    obstacles = []
    total = 0
    attempts = 0
    while len(obstacles) < n_obstacles and attempts < 200:
        attempts += 1
        c = rng.uniform(2.0, span - 2.0, size=2)
        verts = random_convex_polygon(rng, c, rng.uniform(0.6, 1.6))
        if total + len(verts) > max_total_vertices:
            continue
        ok = True
        for other in obstacles:
            d = np.min(
                [np.hypot(*(a - b)) for a in verts for b in other]
            )
            if d < 1.0:
                ok = False
                break
        if ok:
            obstacles.append(verts)
            total += len(verts)
    return boundary, obstacles


def free_point(rng, boundary, obstacles, margin=0.3):
    lo = boundary.min(axis=0) + margin
    hi = boundary.max(axis=0) - margin
    for _ in range(500):
        p = rng.uniform(lo, hi)
        if all(not point_inside_or_on(p, o, grow=margin) for o in obstacles):
            return p
    raise RuntimeError("no free point found")
