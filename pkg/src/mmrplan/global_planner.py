"""Offline corridor planning pipeline.

Dilates obstacles by the formation enclosure radius, builds a visibility
graph, extracts the shortest piecewise-linear path, surrounds every path
segment with a free-space polygon from endpoint visibility regions, convexifies
each polygon by iterative ellipse-tangent cuts, and finally smooths the path
into an arc-length-discretizable reference curve that stays inside the
corridor union.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np
import shapely
import shapely.geometry as sgeom
import shapely.ops

from .errors import (
    CorridorGapError,
    DegenerateFitError,
    EmptyResultError,
    InfeasibleEndpointError,
    NoPathError,
    PlanningError,
)
from .geom2d import (
    EPS,
    HalfPlane,
    Polygon,
    clip_polygon,
    concave_vertices,
    dilate_ellipse_to_point,
    dilate_polygon,
    ellipse_tangent_halfplane,
    fit_ellipse_minor_axis,
    halfplanes_of_polygon,
    mutually_visible,
    polygon_contains,
    union_polygons,
    _polygonal_parts,
    _fill_holes,
)


@dataclass
class Environment:
    """Bounded workspace with polygonal static obstacles and the start/goal
    positions of the object CoM."""

    boundary: Polygon
    obstacles: list
    start: np.ndarray
    goal: np.ndarray

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)
        self.goal = np.asarray(self.goal, dtype=float)
        for name, p in (("start", self.start), ("goal", self.goal)):
            if not polygon_contains(self.boundary, p):
                raise ValueError(f"{name} lies outside the workspace boundary")
            for obs in self.obstacles:
                if polygon_contains(obs, p, include_boundary=False):
                    raise ValueError(f"{name} lies inside a static obstacle")


@dataclass
class ConvexRegion:
    """Convex corridor {x : A @ x <= b} with unit row normals, plus its
    vertex polygon for rendering and margin queries."""

    A: np.ndarray
    b: np.ndarray
    polygon: Polygon

    def contains(self, p, margin: float = 0.0, tol: float = EPS) -> bool:
        return bool(np.all(self.A @ np.asarray(p, dtype=float) <= self.b - margin + tol))

    def slack(self, p) -> float:
        """Smallest row slack min(b - A p); negative outside."""
        return float(np.min(self.b - self.A @ np.asarray(p, dtype=float)))

    @staticmethod
    def from_polygon(poly: Polygon) -> "ConvexRegion":
        hps = [h for h in halfplanes_of_polygon(poly)]
        A = np.array([h.a for h in hps])
        b = np.array([h.b for h in hps])
        return ConvexRegion(A, b, poly)


@dataclass
class VisibilityGraph:
    nodes: np.ndarray  # (n, 2); 0 = start, 1 = goal
    edges: list  # (i, j, weight)


@dataclass
class GlobalPlan:
    path: np.ndarray                 # (m, 2) shortest-path vertices
    corridors: list                  # ConvexRegion per path segment
    control_points: np.ndarray       # path vertices + corridor-transition points
    reference: "Reference"
    ref_points: np.ndarray           # (K, 2) arc-length discretized reference
    ref_corridor: np.ndarray         # (K,) corridor index per reference point
    r_f: float


def shrink_boundary(boundary: Polygon, r_f: float, keep_point=None) -> Polygon:
    """Boundary offset inward by r_f (exact for convex boundaries)."""
    shrunk = boundary.to_shapely().buffer(-r_f, join_style="mitre", mitre_limit=1e6)
    parts = _polygonal_parts(shrunk)
    if not parts:
        raise InfeasibleEndpointError("boundary vanishes when shrunk by the formation radius")
    if keep_point is not None:
        pt = sgeom.Point(*np.asarray(keep_point, dtype=float))
        parts.sort(key=lambda g: g.distance(pt))
        return Polygon.from_shapely(parts[0])
    return Polygon.from_shapely(max(parts, key=lambda g: g.area))


def build_dilated_map(env: Environment, r_f: float) -> list:
    """Obstacles dilated by r_f and unioned where intersecting.

    Raises InfeasibleEndpointError when the start or goal is swallowed by the
    dilated map (including the inward-shrunk boundary).
    """
    if r_f <= 0:
        raise ValueError("r_f must be positive")
    dilated = [dilate_polygon(o, r_f) for o in env.obstacles]
    merged = union_polygons(dilated) if dilated else []
    inner = shrink_boundary(env.boundary, r_f, keep_point=env.start)
    for name, p in (("start", env.start), ("goal", env.goal)):
        if not polygon_contains(inner, p):
            raise InfeasibleEndpointError(f"{name} is within r_f of the workspace boundary")
        for obs in merged:
            if polygon_contains(obs, p, include_boundary=False):
                raise InfeasibleEndpointError(f"{name} is covered by a dilated obstacle")
    return merged


def build_visibility_graph(env: Environment, r_f: float) -> VisibilityGraph:
    obstacles = build_dilated_map(env, r_f)
    inner = shrink_boundary(env.boundary, r_f, keep_point=env.start)
    nodes = [env.start, env.goal]
    for v in inner.vertices:
        nodes.append(np.asarray(v, dtype=float))
    for obs in obstacles:
        for v in obs.vertices:
            if polygon_contains(inner, v):
                nodes.append(np.asarray(v, dtype=float))
    # dedupe while keeping insertion order (start and goal stay at 0 and 1)
    seen = {}
    uniq = []
    for p in nodes:
        key = tuple(np.round(p, 9))
        if key not in seen:
            seen[key] = len(uniq)
            uniq.append(p)
    nodes = np.asarray(uniq)
    edges = []
    for i in range(len(nodes)):
        for j in range(i + 1, len(nodes)):
            w = float(np.hypot(*(nodes[j] - nodes[i])))
            if w <= EPS:
                continue
            if mutually_visible(nodes[i], nodes[j], obstacles, inner):
                edges.append((i, j, w))
    return VisibilityGraph(nodes, edges)


def plan_shortest_path(env: Environment, r_f: float) -> np.ndarray:
    """Shortest start-to-goal path over the visibility graph (A*, Euclidean
    heuristic, node-index tie-breaking for determinism)."""
    graph = build_visibility_graph(env, r_f)
    n = len(graph.nodes)
    adj = [[] for _ in range(n)]
    for i, j, w in graph.edges:
        adj[i].append((j, w))
        adj[j].append((i, w))
    goal = graph.nodes[1]
    h = np.hypot(*(graph.nodes - goal).T)
    dist = np.full(n, np.inf)
    parent = np.full(n, -1, dtype=int)
    dist[0] = 0.0
    heap = [(h[0], 0)]
    closed = np.zeros(n, dtype=bool)
    while heap:
        f, u = heapq.heappop(heap)
        if closed[u]:
            continue
        closed[u] = True
        if u == 1:
            break
        for v, w in sorted(adj[u]):
            nd = dist[u] + w
            if nd < dist[v] - 1e-15:
                dist[v] = nd
                parent[v] = u
                heapq.heappush(heap, (nd + h[v], v))
    if not np.isfinite(dist[1]):
        raise NoPathError("goal is unreachable in the dilated visibility graph")
    out = [1]
    while out[-1] != 0:
        out.append(int(parent[out[-1]]))
    return graph.nodes[out[::-1]].copy()


def _ray_first_hit(p, u, edge_list, t_max):
    """Smallest positive ray parameter where p + t u crosses an edge
    transversally."""
    best = t_max
    px, py = p
    ux, uy = u
    for a, b in edge_list:
        ex, ey = b[0] - a[0], b[1] - a[1]
        den = ux * ey - uy * ex
        if abs(den) < 1e-14:
            continue
        rx, ry = a[0] - px, a[1] - py
        t = (rx * ey - ry * ex) / den
        s = (rx * uy - ry * ux) / den
        if t > 1e-12 and -1e-12 <= s <= 1 + 1e-12:
            best = min(best, t)
    return best


def visibility_polygon(point, obstacles, boundary: Polygon, delta: float = 1e-7) -> Polygon:
    """Region visible from ``point``: rays are cast toward every obstacle and
    boundary vertex (plus tiny angular offsets so silhouettes resolve), and
    the first-hit points are joined in angular order."""
    p = np.asarray(point, dtype=float)
    edge_list = [(a, b) for obs in obstacles for a, b in obs.edges()]
    edge_list += list(boundary.edges())
    span = float(np.max(np.abs(boundary.vertices))) * 4.0 + 10.0
    cand_angles = set()
    for obs in obstacles:
        for v in obs.vertices:
            cand_angles.add(math.atan2(v[1] - p[1], v[0] - p[0]))
    for v in boundary.vertices:
        cand_angles.add(math.atan2(v[1] - p[1], v[0] - p[0]))
    pts = []
    for th in sorted(cand_angles):
        for a in (th - delta, th, th + delta):
            u = np.array([math.cos(a), math.sin(a)])
            t = _ray_first_hit(p, u, edge_list, span)
            pts.append((a, p + t * u))
    pts.sort(key=lambda item: item[0])
    out = []
    for _, q in pts:
        if out and np.hypot(*(q - out[-1])) < 1e-9:
            continue
        out.append(q)
    if len(out) >= 2 and np.hypot(*(out[0] - out[-1])) < 1e-9:
        out.pop()
    if len(out) < 3:
        raise PlanningError("degenerate visibility polygon")
    return Polygon(np.asarray(out))


def segment_concave_polygon(seg_index: int, path, env: Environment) -> Polygon:
    """Free-space polygon around path segment ``seg_index``: union of the
    visibility polygons of its two endpoints against the undilated obstacles."""
    path = np.asarray(path, dtype=float)
    a, b = path[seg_index], path[seg_index + 1]
    vis_a = visibility_polygon(a, env.obstacles, env.boundary)
    vis_b = visibility_polygon(b, env.obstacles, env.boundary)
    merged = shapely.ops.unary_union([vis_a.to_shapely(), vis_b.to_shapely()])
    parts = _polygonal_parts(merged)
    if not parts:
        raise PlanningError("empty segment polygon")
    mid = sgeom.Point(*(0.5 * (a + b)))
    parts.sort(key=lambda g: g.distance(mid))
    poly = _fill_holes(parts[0])
    poly = shapely.simplify(poly, 1e-9)
    return Polygon.from_shapely(poly)


def _fallback_cut(x_star, d, seg_dir) -> HalfPlane:
    """Cut perpendicular to the segment direction through a vertex that the
    ellipse fit cannot reach (reflex vertex on the major-axis line)."""
    seg_dir = np.asarray(seg_dir, dtype=float)
    sgn = math.copysign(1.0, float(seg_dir @ (np.asarray(x_star) - np.asarray(d))))
    n = sgn * seg_dir
    return HalfPlane(n, float(n @ np.asarray(x_star, dtype=float)))


def convexify(concave: Polygon, segment, r_f: float, max_rounds: int = 200) -> ConvexRegion:
    """Iterative ellipse-tangent convexification of a corridor polygon.

    Seeds an ellipse at the segment midpoint with its major axis along the
    segment (semi-major 0.5 * length + r_f), fits the minor axis to the
    nearest reflex vertex, cuts the polygon with the tangent half-plane at
    that vertex, then keeps dilating the seed ellipse to the nearest remaining
    reflex vertex and cutting until the polygon is convex.
    """
    seg = np.asarray(segment, dtype=float)
    w0, w1 = seg[0], seg[1]
    d = 0.5 * (w0 + w1)
    for q in (w0, w1, d):
        if not polygon_contains(concave, q):
            raise ValueError("segment is not contained in the polygon")
    P = concave
    reflex = concave_vertices(P)
    if reflex:
        seg_len = float(np.hypot(*(w1 - w0)))
        if seg_len <= EPS:
            raise ValueError("degenerate path segment")
        u = (w1 - w0) / seg_len
        R = np.array([[u[0], u[1]], [-u[1], u[0]]])  # world -> ellipse frame
        a = 0.5 * seg_len + r_f
        kappa0 = None
        rounds = 0
        while reflex:
            rounds += 1
            if rounds > max_rounds:
                raise PlanningError("convexification failed to terminate")
            dists = [np.hypot(*(v - d)) for v in reflex]
            order = np.lexsort((
                [v[1] for v in reflex],
                [v[0] for v in reflex],
                dists,
            ))
            x_star = reflex[int(order[0])]
            cut = None
            try:
                if kappa0 is None:
                    kappa0 = fit_ellipse_minor_axis(R, a, d, x_star)
                    kappa = kappa0
                elif kappa0.norm_of(x_star) >= 1.0:
                    kappa = dilate_ellipse_to_point(kappa0, x_star)
                else:
                    # vertex inside the seed ellipse: refit through it with the
                    # same center and major axis, which still spans the segment
                    kappa = fit_ellipse_minor_axis(R, a, d, x_star)
                cut = ellipse_tangent_halfplane(kappa, x_star, tol=1e-6)
            except DegenerateFitError:
                cut = _fallback_cut(x_star, d, u)
            try:
                P = clip_polygon(P, cut, keep_point=d)
            except EmptyResultError as exc:
                raise PlanningError("convexification cut removed the whole polygon") from exc
            new_reflex = concave_vertices(P)
            if len(new_reflex) >= len(reflex):
                raise PlanningError("convexification made no progress")
            reflex = new_reflex
    region = ConvexRegion.from_polygon(P)
    for q in (w0, w1, d):
        if not region.contains(q, tol=1e-7):
            raise PlanningError("convexified corridor lost the path segment")
    return region


def _segment_interval_in_region(p0, p1, region: ConvexRegion):
    """Parameter interval [t0, t1] of p0 + t (p1 - p0) inside the region."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    lo, hi = 0.0, 1.0
    d = p1 - p0
    num = region.b - region.A @ p0
    den = region.A @ d
    for nm, dn in zip(num, den):
        if abs(dn) < 1e-14:
            if nm < -EPS:
                return None
            continue
        t = nm / dn
        if dn > 0:
            hi = min(hi, t)
        else:
            lo = max(lo, t)
    if lo > hi + EPS:
        return None
    return max(0.0, lo), min(1.0, hi)


def insert_control_points(path, corridors) -> np.ndarray:
    """Path vertices plus one point per corridor transition.

    The extra point sits at the midpoint of the chord that path segment i cuts
    through the intersection of corridors i and i+1 (the shared path vertex is
    itself in both corridors), which guarantees that any three consecutive
    control points share a corridor.
    """
    path = np.asarray(path, dtype=float)
    m = len(path)
    if len(corridors) != m - 1:
        raise ValueError("one corridor per path segment is required")
    points = [path[0]]
    for i in range(m - 1):
        if i < m - 2:
            entry = _segment_interval_in_region(path[i], path[i + 1], corridors[i + 1])
            if entry is None or entry[0] >= 1.0 - 1e-9:
                raise CorridorGapError(f"corridors {i} and {i + 1} do not overlap on the path")
            t = 0.5 * (entry[0] + 1.0)
            q = path[i] + t * (path[i + 1] - path[i])
            if np.hypot(*(q - points[-1])) > 1e-9 and np.hypot(*(q - path[i + 1])) > 1e-9:
                points.append(q)
        if np.hypot(*(path[i + 1] - points[-1])) > 1e-9:
            points.append(path[i + 1])
    points = np.asarray(points)
    _validate_windows(points, corridors)
    return points


def _validate_windows(points, corridors):
    for k in range(len(points) - 2):
        window = points[k:k + 3]
        if not any(all(c.contains(q, tol=1e-7) for q in window) for c in corridors):
            raise CorridorGapError(f"control-point window {k} spans more than one corridor")


class Reference:
    """Piecewise quadratic Bezier curve over midpoint-chained control points;
    C1-continuous, parameterized by c_t in [0, 1] uniformly per piece."""

    def __init__(self, control_points):
        cps = np.asarray(control_points, dtype=float)
        if len(cps) < 2:
            raise ValueError("need at least 2 control points")
        self.control_points = cps
        if len(cps) == 2:
            self.pieces = np.array([[cps[0], 0.5 * (cps[0] + cps[1]), cps[1]]])
        else:
            mids = 0.5 * (cps[1:-2] + cps[2:-1]) if len(cps) > 3 else np.empty((0, 2))
            anchors = np.vstack([cps[0:1], mids, cps[-1:]])
            self.pieces = np.stack([anchors[:-1], cps[1:-1], anchors[1:]], axis=1)

    def __call__(self, c_t):
        scalar = np.ndim(c_t) == 0
        c = np.atleast_1d(np.clip(np.asarray(c_t, dtype=float), 0.0, 1.0))
        n = len(self.pieces)
        scaled = c * n
        idx = np.minimum(scaled.astype(int), n - 1)
        s = scaled - idx
        P = self.pieces[idx]
        out = ((1 - s) ** 2)[:, None] * P[:, 0] + (2 * s * (1 - s))[:, None] * P[:, 1] + (s ** 2)[:, None] * P[:, 2]
        return out[0] if scalar else out

    def dense_samples(self, per_piece=400):
        t = np.linspace(0.0, 1.0, per_piece * len(self.pieces) + 1)
        return self(t)


def smooth_reference(control_points) -> Reference:
    return Reference(control_points)


def discretize_reference(reference: Reference, v_op: float, T_c: float, per_piece=800) -> np.ndarray:
    """Points spaced by arc length v_op * T_c along the curve; the final point
    is the curve end (possibly a partial step)."""
    if v_op <= 0 or T_c <= 0:
        raise ValueError("v_op and T_c must be positive")
    step = v_op * T_c
    samples = reference.dense_samples(per_piece)
    seg = np.hypot(*np.diff(samples, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = float(s[-1])
    if total <= step:
        return np.vstack([samples[0], samples[-1]])
    n_full = int(math.floor(total / step + 1e-12))
    targets = np.arange(n_full + 1) * step
    targets = targets[targets <= total + 1e-12]
    if total - targets[-1] > 1e-9:
        targets = np.append(targets, total)
    else:
        targets[-1] = total
    xs = np.interp(targets, s, samples[:, 0])
    ys = np.interp(targets, s, samples[:, 1])
    return np.stack([xs, ys], axis=1)


def assign_corridors(points, corridors) -> np.ndarray:
    """Corridor index per reference point; advances to the next corridor as
    soon as the point enters the overlap with it."""
    idx = np.zeros(len(points), dtype=int)
    j = 0
    for k, p in enumerate(points):
        while j + 1 < len(corridors) and corridors[j + 1].contains(p, tol=1e-7):
            j += 1
        idx[k] = j
    return idx


def plan_global(env: Environment, r_f: float, v_op: float, T_c: float) -> GlobalPlan:
    """Full offline pipeline; see the module docstring."""
    path = plan_shortest_path(env, r_f)
    corridors = []
    for i in range(len(path) - 1):
        poly = segment_concave_polygon(i, path, env)
        corridors.append(convexify(poly, (path[i], path[i + 1]), r_f))
    control_points = insert_control_points(path, corridors)
    reference = smooth_reference(control_points)
    ref_points = discretize_reference(reference, v_op, T_c)
    ref_corridor = assign_corridors(ref_points, corridors)
    return GlobalPlan(
        path=path,
        corridors=corridors,
        control_points=control_points,
        reference=reference,
        ref_points=ref_points,
        ref_corridor=ref_corridor,
        r_f=r_f,
    )
