import math

import numpy as np
import pytest
from matplotlib.path import Path

from mmrplan.errors import CorridorGapError, InfeasibleEndpointError, NoPathError
from mmrplan.geom2d import Polygon, polygon_contains
from mmrplan.global_planner import (
    ConvexRegion,
    Environment,
    Reference,
    assign_corridors,
    build_dilated_map,
    build_visibility_graph,
    convexify,
    discretize_reference,
    insert_control_points,
    plan_global,
    plan_shortest_path,
    segment_concave_polygon,
    shrink_boundary,
    smooth_reference,
    visibility_polygon,
)
from scenes import R_F, blocked_goal_env, corridor_env, open_env, zigzag_env


def bounded_dfs_shortest(nodes, edges, src=0, dst=1):
    """Exhaustive branch-and-bound enumeration of simple paths."""
    adj = {i: [] for i in range(len(nodes))}
    for i, j, w in edges:
        adj[i].append((j, w))
        adj[j].append((i, w))
    best = [math.inf]

    def dfs(u, seen, acc):
        if acc >= best[0]:
            return
        if u == dst:
            best[0] = acc
            return
        for v, w in adj[u]:
            if v not in seen:
                seen.add(v)
                dfs(v, seen, acc + w)
                seen.remove(v)

    dfs(src, {src}, 0.0)
    return best[0]


class TestDilatedMap:
    def test_empty_obstacles(self):
        assert build_dilated_map(open_env(), 0.3) == []

    def test_nearby_squares_merge(self):
        # gap of 0.1 < 2 * r_f so the dilations overlap and must merge
        env = Environment(
            boundary=Polygon([[0, 0], [10, 0], [10, 10], [0, 10]]),
            obstacles=[
                Polygon([[3, 3], [4, 3], [4, 4], [3, 4]]),
                Polygon([[4.1, 3], [5.1, 3], [5.1, 4], [4.1, 4]]),
            ],
            start=np.array([1, 1.0]),
            goal=np.array([9, 9.0]),
        )
        merged = build_dilated_map(env, 0.1)
        assert len(merged) == 1

    def test_start_keeps_clearance(self):
        env = corridor_env()
        build_dilated_map(env, R_F)  # must not raise

    def test_swallowed_start_rejected(self):
        env = corridor_env(start=(3.2, 2.8))  # 0.15 m from the upper wall
        with pytest.raises(InfeasibleEndpointError):
            build_dilated_map(env, R_F)

    def test_boundary_shrink_is_exact_for_rectangles(self):
        inner = shrink_boundary(Polygon([[0, 0], [10, 0], [10, 10], [0, 10]]), 0.5)
        assert inner.area == pytest.approx(81.0, abs=1e-9)


class TestShortestPath:
    def test_no_obstacles_straight_line(self):
        path = plan_shortest_path(open_env(), 0.3)
        assert len(path) == 2
        assert np.allclose(path, [[1.0, 2.0], [4.5, 2.0]])

    def test_blocking_square_single_corner_detour(self):
        env = Environment(
            boundary=Polygon([[0, 0], [10, 0], [10, 6], [0, 6]]),
            obstacles=[Polygon([[4, 2.0], [6, 2.0], [6, 4.0], [4, 4.0]])],
            start=np.array([2.0, 2.0]),
            goal=np.array([8.0, 1.2]),
        )
        path = plan_shortest_path(env, 0.4)
        # detours via exactly one vertex of the dilated square
        assert len(path) == 3
        graph = build_visibility_graph(env, 0.4)
        best = bounded_dfs_shortest(graph.nodes, graph.edges)
        length = float(np.sum(np.hypot(*np.diff(path, axis=0).T)))
        assert length == pytest.approx(best, abs=1e-9)

    def test_symmetric_blocking_square_matches_enumeration(self):
        env = Environment(
            boundary=Polygon([[0, 0], [10, 0], [10, 6], [0, 6]]),
            obstacles=[Polygon([[4, 1.0], [6, 1.0], [6, 3.2], [4, 3.2]])],
            start=np.array([2.0, 2.0]),
            goal=np.array([8.0, 2.0]),
        )
        path = plan_shortest_path(env, 0.4)
        graph = build_visibility_graph(env, 0.4)
        best = bounded_dfs_shortest(graph.nodes, graph.edges)
        length = float(np.sum(np.hypot(*np.diff(path, axis=0).T)))
        assert length == pytest.approx(best, abs=1e-9)
        # every intermediate vertex lies on the dilated map
        dil = build_dilated_map(env, 0.4)
        for v in path[1:-1]:
            assert any(np.min(np.hypot(*(o.vertices - v).T)) < 1e-9 for o in dil)

    def test_matches_networkx_on_corridor_scene(self):
        import networkx as nx

        env = corridor_env()
        graph = build_visibility_graph(env, R_F)
        G = nx.Graph()
        for i, j, w in graph.edges:
            G.add_edge(i, j, weight=w)
        expect = nx.shortest_path_length(G, 0, 1, weight="weight")
        path = plan_shortest_path(env, R_F)
        length = float(np.sum(np.hypot(*np.diff(path, axis=0).T)))
        assert length == pytest.approx(expect, abs=1e-9)
        # runs through the corridor, then wraps the dilated wall corner
        assert 3 <= len(path) <= 7
        assert np.all(path[:, 1] < 4.0) or path[-1, 1] > 4.0
        mid_y = path[(path[:, 0] > 3.0) & (path[:, 0] < 6.0)][:, 1]
        assert np.all((mid_y > 1.6) & (mid_y < 2.4))

    def test_enclosed_goal_raises(self):
        # the dilated ring merges, its hole is filled, and the goal reads as
        # covered; any PlanningError subtype means "unreachable" here
        from mmrplan.errors import PlanningError

        with pytest.raises(PlanningError):
            plan_shortest_path(blocked_goal_env(), 0.5)

    def test_splitting_wall_disconnects_graph(self):
        env = Environment(
            boundary=Polygon([[0, 0], [10, 0], [10, 10], [0, 10]]),
            obstacles=[Polygon([[4.5, 0.1], [5.5, 0.1], [5.5, 9.9], [4.5, 9.9]])],
            start=np.array([2.0, 5.0]),
            goal=np.array([8.0, 5.0]),
        )
        with pytest.raises(NoPathError):
            plan_shortest_path(env, 0.5)

    def test_consecutive_vertices_mutually_visible(self):
        from mmrplan.geom2d import mutually_visible

        env = zigzag_env()
        path = plan_shortest_path(env, 0.5)
        dil = build_dilated_map(env, 0.5)
        inner = shrink_boundary(env.boundary, 0.5)
        for a, b in zip(path[:-1], path[1:]):
            assert mutually_visible(a, b, dil, inner)


class TestVisibilityPolygon:
    def test_empty_scene_equals_boundary(self):
        env = open_env()
        vis = visibility_polygon((2.0, 2.0), [], env.boundary)
        assert vis.area == pytest.approx(env.boundary.area, rel=1e-6)

    def test_excludes_shadow_region(self):
        boundary = Polygon([[0, 0], [10, 0], [10, 10], [0, 10]])
        square = Polygon([[4, 4], [6, 4], [6, 6], [4, 6]])
        vis = visibility_polygon((2.0, 5.0), [square], boundary)
        # directly behind the square relative to the viewpoint
        assert not polygon_contains(vis, (8.0, 5.0))
        assert polygon_contains(vis, (3.0, 5.0))
        assert polygon_contains(vis, (2.0, 9.0))


class TestSegmentPolygon:
    def test_empty_scene_union_is_boundary(self):
        env = open_env()
        path = plan_shortest_path(env, 0.3)
        poly = segment_concave_polygon(0, path, env)
        assert poly.area == pytest.approx(env.boundary.area, rel=1e-6)

    def test_contains_segment_and_avoids_obstacles(self):
        env = corridor_env()
        path = plan_shortest_path(env, R_F)
        rng = np.random.default_rng(0)
        for i in range(len(path) - 1):
            poly = segment_concave_polygon(i, path, env)
            for t in np.linspace(0, 1, 11):
                assert polygon_contains(poly, path[i] + t * (path[i + 1] - path[i]))
            # membership sampling oracle: no sampled interior point of the
            # polygon may fall strictly inside an obstacle
            mpath = Path(poly.vertices)
            lo, hi = poly.vertices.min(axis=0), poly.vertices.max(axis=0)
            pts = rng.uniform(lo, hi, size=(4000, 2))
            inside = pts[mpath.contains_points(pts, radius=-1e-9)]
            for obs in env.obstacles:
                opath = Path(obs.vertices)
                assert not np.any(opath.contains_points(inside, radius=-1e-7))


class TestConvexify:
    def test_convex_input_returns_own_halfplanes(self):
        rect = Polygon([[0, 0], [4, 0], [4, 2], [0, 2]])
        region = convexify(rect, ((1.0, 1.0), (3.0, 1.0)), 0.3)
        assert len(region.b) == 4
        assert region.polygon.area == pytest.approx(8.0, abs=1e-9)
        assert np.allclose(np.hypot(*region.A.T), 1.0)

    def test_l_shape_single_cut(self):
        ell = Polygon([[0, 0], [6, 0], [6, 1.6], [2.2, 1.6], [2.2, 4], [0, 4]])
        segment = ((3.0, 0.8), [5.5, 0.8])
        region = convexify(ell, segment, 0.3)
        from mmrplan.geom2d import concave_vertices

        assert concave_vertices(region.polygon) == []
        assert region.contains((3.0, 0.8)) and region.contains((5.5, 0.8))
        # subset of the input (sampled)
        rng = np.random.default_rng(1)
        mpath = Path(ell.vertices)
        for v in region.polygon.vertices:
            assert polygon_contains(ell, v)
        pts = rng.uniform([0, 0], [6, 4], size=(2000, 2))
        rpath = Path(region.polygon.vertices)
        inside_region = pts[rpath.contains_points(pts, radius=-1e-9)]
        assert np.all(mpath.contains_points(inside_region, radius=1e-7))

    def test_corridor_scene_regions(self):
        env = corridor_env()
        path = plan_shortest_path(env, R_F)
        from mmrplan.geom2d import concave_vertices

        for i in range(len(path) - 1):
            poly = segment_concave_polygon(i, path, env)
            region = convexify(poly, (path[i], path[i + 1]), R_F)
            assert concave_vertices(region.polygon) == []
            mid = 0.5 * (path[i] + path[i + 1])
            assert region.contains(path[i], tol=1e-7)
            assert region.contains(path[i + 1], tol=1e-7)
            assert region.contains(mid, tol=1e-7)

    def test_segment_outside_rejected(self):
        rect = Polygon([[0, 0], [4, 0], [4, 2], [0, 2]])
        with pytest.raises(ValueError):
            convexify(rect, ((1.0, 1.0), (5.0, 1.0)), 0.3)


class TestControlPoints:
    def test_single_corridor_passthrough(self):
        rect = Polygon([[0, 0], [6, 0], [6, 4], [0, 4]])
        region = ConvexRegion.from_polygon(rect)
        path = np.array([[1.0, 2.0], [5.0, 2.0]])
        cps = insert_control_points(path, [region])
        assert np.allclose(cps, path)

    def test_two_corridors_insert_one_point(self):
        r1 = ConvexRegion.from_polygon(Polygon([[0, 0], [6, 0], [6, 2], [0, 2]]))
        r2 = ConvexRegion.from_polygon(Polygon([[4, 0], [6, 0], [6, 6], [4, 6]]))
        path = np.array([[1.0, 1.0], [5.0, 1.0], [5.0, 5.0]])
        cps = insert_control_points(path, [r1, r2])
        assert len(cps) == 4
        inserted = cps[1]
        assert r1.contains(inserted) and r2.contains(inserted)
        # three-point windows each fit a single corridor
        for k in range(len(cps) - 2):
            win = cps[k:k + 3]
            assert any(all(r.contains(q, tol=1e-7) for q in win) for r in (r1, r2))

    def test_gap_raises(self):
        r1 = ConvexRegion.from_polygon(Polygon([[0, 0], [2, 0], [2, 2], [0, 2]]))
        r2 = ConvexRegion.from_polygon(Polygon([[4, 0], [6, 0], [6, 2], [4, 2]]))
        path = np.array([[1.0, 1.0], [2.0, 1.0], [5.0, 1.0]])
        with pytest.raises(CorridorGapError):
            insert_control_points(path, [r1, r2])

    def test_zigzag_windows_pass(self):
        env = zigzag_env()
        plan = plan_global(env, 0.5, v_op=0.15, T_c=0.25)
        assert len(plan.path) >= 4
        assert len(plan.control_points) == len(plan.path) + len(plan.corridors) - 1


class TestReference:
    def test_collinear_points_stay_on_line(self):
        cps = np.array([[0.0, 0.0], [1.0, 0.0], [2.5, 0.0], [4.0, 0.0]])
        ref = smooth_reference(cps)
        pts = ref(np.linspace(0, 1, 101))
        assert np.allclose(pts[:, 1], 0.0, atol=1e-12)
        assert pts[0, 0] == pytest.approx(0.0) and pts[-1, 0] == pytest.approx(4.0)

    def test_right_angle_stays_in_hull(self):
        cps = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
        ref = smooth_reference(cps)
        pts = ref(np.linspace(0, 1, 101))
        hull = Path(cps)
        assert np.all(hull.contains_points(pts, radius=1e-9))

    def test_endpoint_interpolation_and_c1(self):
        cps = np.array([[0.0, 0.0], [2.0, 0.5], [3.0, 2.0], [1.0, 3.0]])
        ref = smooth_reference(cps)
        assert np.allclose(ref(0.0), cps[0])
        assert np.allclose(ref(1.0), cps[-1])
        # C1 at interior junctions: central difference across each knot
        n = len(ref.pieces)
        for k in range(1, n):
            t = k / n
            h = 1e-7
            left = (ref(t) - ref(t - h)) / h
            right = (ref(t + h) - ref(t)) / h
            assert np.allclose(left, right, atol=1e-5)

    def test_curve_stays_in_corridor_union(self):
        env = corridor_env()
        plan = plan_global(env, R_F, v_op=0.15, T_c=0.25)
        pts = plan.reference(np.linspace(0, 1, 500))
        for p in pts:
            assert any(c.contains(p, tol=1e-7) for c in plan.corridors)

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError):
            Reference(np.array([[0.0, 0.0]]))


class TestDiscretize:
    def test_straight_line_spacing(self):
        ref = smooth_reference(np.array([[0.0, 0.0], [1.5, 0.0]]))
        pts = discretize_reference(ref, v_op=0.15, T_c=0.25)
        assert len(pts) == 41
        gaps = np.hypot(*np.diff(pts, axis=0).T)
        assert np.allclose(gaps, 0.0375, atol=1e-6)

    def test_long_step_returns_endpoints(self):
        ref = smooth_reference(np.array([[0.0, 0.0], [0.5, 0.0]]))
        pts = discretize_reference(ref, v_op=1.0, T_c=1.0)
        assert len(pts) == 2
        assert np.allclose(pts, [[0, 0], [0.5, 0]])

    def test_spacing_never_exceeds_step(self):
        env = corridor_env()
        plan = plan_global(env, R_F, v_op=0.15, T_c=0.25)
        gaps = np.hypot(*np.diff(plan.ref_points, axis=0).T)
        assert np.all(gaps <= 0.15 * 0.25 + 1e-9)
        # uniform within 1 percent except the final partial step
        assert np.all(np.abs(gaps[:-1] - 0.0375) <= 0.0375 * 0.01)


class TestAssignment:
    def test_assignment_monotone_and_member(self):
        env = corridor_env()
        plan = plan_global(env, R_F, v_op=0.15, T_c=0.25)
        idx = plan.ref_corridor
        assert np.all(np.diff(idx) >= 0)
        for p, j in zip(plan.ref_points, idx):
            assert plan.corridors[j].contains(p, tol=1e-6)

    def test_later_corridor_wins_in_overlap(self):
        r1 = ConvexRegion.from_polygon(Polygon([[0, 0], [6, 0], [6, 2], [0, 2]]))
        r2 = ConvexRegion.from_polygon(Polygon([[4, 0], [10, 0], [10, 2], [4, 2]]))
        pts = np.array([[1.0, 1.0], [4.5, 1.0], [8.0, 1.0]])
        assert list(assign_corridors(pts, [r1, r2])) == [0, 1, 1]
