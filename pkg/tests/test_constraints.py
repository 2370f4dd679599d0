"""Per-stage constraint builders and their recursive-feasibility witnesses."""

import numpy as np
import pytest

from fleetdeploy.constraints import (
    ConstraintSet,
    ExtendedPredeterminedTrajectory,
    PredeterminedTrajectory,
    RecursiveFeasibilityFault,
    bisect_min_eta,
    build_corridor,
    build_edge_bundle,
    connectivity_center,
    los_safe_zone,
    los_waypoints,
    mbvc_halfspace,
    r_min_buffer,
    update_intermediate_target,
)
from fleetdeploy.geometry import ConvexObstacle, Segment, hulls_disjoint, segment_clear
from oracles import grid_min_eta


def _box(xr, yr, zr):
    return ConvexObstacle.from_vertices(
        [(x, y, z) for x in xr for y in yr for z in zr])


def _ept(points, owner=0, tick=0):
    return ExtendedPredeterminedTrajectory(
        positions=np.asarray(points, dtype=float), owner=owner, tick=tick)


class TestMbvc:
    def test_buffer_value(self):
        assert r_min_buffer(2.0, 0.5, 15.0) == pytest.approx(8.5)

    def test_halfspace_hand_values(self):
        hs = mbvc_halfspace((0, 0, 0), (10, 0, 0), r_a=2.0, h=0.5, v_max=15.0)
        np.testing.assert_allclose(hs.normal, [-1, 0, 0])
        assert hs.offset == pytest.approx(-0.75)
        # feasible side is x <= 0.75
        assert hs.contains((0.7, 3, -2))
        assert not hs.contains((0.8, 0, 0))

    def test_swap_reflects_offsets(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            pi, pj = rng.uniform(-10, 10, 3), rng.uniform(-10, 10, 3)
            if np.linalg.norm(pi - pj) < 1e-6:
                continue
            ij = mbvc_halfspace(pi, pj, 0.25, 0.5, 1.8)
            ji = mbvc_halfspace(pj, pi, 0.25, 0.5, 1.8)
            np.testing.assert_allclose(ij.normal, -ji.normal, atol=1e-12)
            # summed offsets equal the buffer: the two feasible sides are
            # disjoint, which is what prevents mid-step collisions
            assert ij.offset + ji.offset == pytest.approx(
                r_min_buffer(0.25, 0.5, 1.8))

    def test_sides_mutually_exclusive(self):
        rng = np.random.default_rng(6)
        pi, pj = np.array([1.0, 2, 3]), np.array([4.0, 5, 5])
        ij = mbvc_halfspace(pi, pj, 0.25, 0.5, 1.8)
        ji = mbvc_halfspace(pj, pi, 0.25, 0.5, 1.8)
        for _ in range(200):
            x = rng.uniform(-10, 10, 3)
            assert not (ij.contains(x) and ji.contains(x))

    def test_coincident_points_fault(self):
        with pytest.raises(RecursiveFeasibilityFault):
            mbvc_halfspace((1, 1, 1), (1, 1, 1), 0.25, 0.5, 1.8)


class TestBisectMinEta:
    def test_step_predicate(self):
        eta = bisect_min_eta(lambda e: e >= 0.3, tol=1e-4)
        assert 0.3 <= eta <= 0.3001

    def test_always_true(self):
        assert bisect_min_eta(lambda e: True, tol=1e-4) <= 1e-4

    def test_infeasible_at_one_faults(self):
        with pytest.raises(RecursiveFeasibilityFault):
            bisect_min_eta(lambda e: False, tol=1e-4)

    def test_agrees_with_grid_search(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            thr = rng.uniform(0.0, 1.0)
            pred = lambda e, t=thr: e >= t
            fast = bisect_min_eta(pred, tol=1e-4)
            slow = grid_min_eta(pred, step=1e-5)
            assert abs(fast - slow) <= 1e-4 + 1e-5
            assert pred(fast)


class TestConnectivityCenter:
    def test_far_pair_midpoint(self):
        c = connectivity_center((0, 0, 0), (6, 0, 0), (0, 0, 0), (6, 0, 0),
                                d_w=4.0, d_c=18.0)
        np.testing.assert_allclose(c, [3, 0, 0])

    def test_coincident_points_mean(self):
        one = (1.0, 1.0, 1.0)
        c = connectivity_center(one, one, one, one, d_w=4.0, d_c=18.0)
        np.testing.assert_allclose(c, [1, 1, 1])

    def test_static_pair_blend_at_zero(self):
        c = connectivity_center((0, 0, 0), (3, 0, 0), (0, 0, 0), (3, 0, 0),
                                d_w=4.0, d_c=18.0)
        np.testing.assert_allclose(c, [1.5, 0, 0], atol=1e-9)

    def test_blend_matches_eta_grid(self):
        # fast-moving pair: the 4-point mean is too far from the current
        # points, so the center blends toward the midpoint just enough
        # (analytically eta* = 1 - sqrt(1.75)/4 ~ 0.6693)
        pi, pj = np.array([0.0, 0, 0]), np.array([3.0, 0, 0])
        pin, pjn = np.array([0.0, 8.0, 0]), np.array([3.0, 8.0, 0])
        d_w = 4.0
        c = connectivity_center(pi, pj, pin, pjn, d_w=d_w, d_c=18.0)
        mid = (pi + pj) / 2
        center = (pi + pj + pin + pjn) / 4

        def ok(eta):
            cc = eta * mid + (1 - eta) * center
            return (np.linalg.norm(pi - cc) <= d_w / 2
                    and np.linalg.norm(pj - cc) <= d_w / 2)

        eta_star = grid_min_eta(ok, step=1e-3)
        expect = eta_star * mid + (1 - eta_star) * center
        np.testing.assert_allclose(c, expect, atol=5e-3)

    def test_current_points_near_center(self):
        rng = np.random.default_rng(3)
        d_w, d_c = 17.0, 18.0
        for _ in range(50):
            pi = rng.uniform(-5, 5, 3)
            pj = pi + rng.uniform(-1, 1, 3) * 8
            if np.linalg.norm(pi - pj) > d_c:
                continue
            pin = pi + rng.uniform(-0.9, 0.9, 3)
            pjn = pj + rng.uniform(-0.9, 0.9, 3)
            c = connectivity_center(pi, pj, pin, pjn, d_w=d_w, d_c=d_c)
            assert np.linalg.norm(pi - c) <= d_c + 1e-9
            assert np.linalg.norm(pj - c) <= d_c + 1e-9

    def test_broken_edge_faults(self):
        with pytest.raises(RecursiveFeasibilityFault):
            connectivity_center((0, 0, 0), (20, 0, 0), (0, 0, 0), (20, 0, 0),
                                d_w=17.0, d_c=18.0)


class TestLosWaypoints:
    def test_no_obstacles_returns_next(self):
        wi, wj, eta = los_waypoints((0, 0, 0), (5, 0, 0),
                                    (0, 1, 0), (5, 1, 0), [])
        assert eta == 0.0
        np.testing.assert_allclose(wi, [0, 1, 0])
        np.testing.assert_allclose(wj, [5, 1, 0])

    def test_static_edge_degenerate_blend(self):
        obs = [_box((1, 2), (3, 4), (-1, 1))]
        wi, wj, eta = los_waypoints((0, 0, 0), (5, 0, 0),
                                    (0, 0, 0), (5, 0, 0), obs)
        assert eta == 0.0
        np.testing.assert_allclose(wi, [0, 0, 0])
        np.testing.assert_allclose(wj, [5, 0, 0])

    def test_blend_clears_cube(self):
        # edge at y=2 moving to y=0.2; cube spans y in [-1, 1], so the quad
        # clears only once the blended segment stays above y=1:
        # 0.2 + 1.8*eta > 1  =>  eta > 4/9
        cube = _box((1, 3), (-1, 1), (-1, 1))
        pi, pj = (0.0, 2.0, 0.0), (4.0, 2.0, 0.0)
        pin, pjn = (0.0, 0.2, 0.0), (4.0, 0.2, 0.0)
        wi, wj, eta = los_waypoints(pi, pj, pin, pjn, [cube])
        assert eta == pytest.approx(4.0 / 9.0, abs=2e-4)
        quad = np.vstack([pi, pj, wi, wj])
        assert hulls_disjoint(quad, cube.vertices)

        def ok(e):
            qi = e * np.asarray(pi) + (1 - e) * np.asarray(pin)
            qj = e * np.asarray(pj) + (1 - e) * np.asarray(pjn)
            return hulls_disjoint(np.vstack([pi, pj, qi, qj]), cube.vertices)

        assert abs(eta - grid_min_eta(ok, step=1e-3)) <= 2e-3

    def test_broken_precondition_faults(self):
        cube = _box((1, 3), (-1, 1), (-1, 1))
        with pytest.raises(RecursiveFeasibilityFault):
            los_waypoints((0, 0, 0), (4, 0, 0), (0, 0, 0), (4, 0, 0), [cube])


class TestLosSafeZone:
    def test_zero_obstacles(self):
        assert los_safe_zone(np.array([[0.0, 0, 0], [1.0, 0, 0]]), []) == []

    def test_collinear_cubes_one_plane(self):
        near = _box((2, 3), (-1, 1), (-1, 1))
        far = _box((5, 6), (-1, 1), (-1, 1))
        free = np.array([[0.0, 0, 0], [0.0, 2, 0], [1.0, 0, 0], [1.0, 2, 0]])
        planes = los_safe_zone(free, [near, far])
        assert len(planes) == 1
        # the far cube sits entirely behind the near cube's plane
        hs = planes[0]
        assert np.all(far.vertices @ hs.normal < hs.offset)

    def test_free_points_keep_slack(self):
        rng = np.random.default_rng(21)
        for _ in range(30):
            free = rng.uniform(-4, 0, (4, 3))
            obs = _box((1 + rng.uniform(0, 2), 4), (-2, 2), (-2, 2))
            planes = los_safe_zone(free, [obs])
            assert planes
            for hs in planes:
                assert np.all(free @ hs.normal >= hs.offset + 1e-12)

    def test_zone_soundness_sampled(self):
        # any two points in the emitted zone see each other past every
        # processed obstacle
        rng = np.random.default_rng(33)
        free = np.array([[0.0, 0, 0], [0.0, 3, 0], [1.0, 1.5, 1.0]])
        obstacles = [
            _box((2, 4), (-1, 1.6), (-1, 1)),
            _box((3, 5), (2.2, 4), (0, 2)),
            _box((6, 8), (-1, 4), (-1, 2)),
        ]
        planes = los_safe_zone(free, obstacles, cull_radius=None)
        assert planes
        lo, hi = np.array([-3.0, -2, -2]), np.array([9.0, 6, 4])
        pts = []
        while len(pts) < 60:
            cand = rng.uniform(lo, hi)
            if all(hs.contains(cand) for hs in planes):
                pts.append(cand)
        pts = np.array(pts)
        checked = 0
        for a in range(len(pts)):
            for b in range(a + 1, len(pts)):
                assert segment_clear(Segment(pts[a], pts[b]), obstacles)
                checked += 1
                if checked >= 1000:
                    return


class TestBuildCorridor:
    def test_no_obstacles_empty(self):
        ept = _ept([[0, 0, 0], [1, 0, 0], [2, 0, 0]])
        out = build_corridor(ept, [])
        assert len(out) == 2
        assert all(stage == [] for stage in out)

    def test_point_beside_cube_face_plane(self):
        cube = _box((-0.5, 0.5), (-0.5, 0.5), (-0.5, 0.5)).inflate(0.25)
        ept = _ept([[-1.0, 0, 0], [-1.0, 0, 0], [-1.0, 0, 0]])
        out = build_corridor(ept, [cube])
        for stage in out:
            assert len(stage) == 1
            hs = stage[0]
            np.testing.assert_allclose(hs.normal, [-1, 0, 0], atol=1e-9)
            # inflated face sits at x=-0.75; emitted offset may carry a
            # small protective pad
            assert 0.75 <= hs.offset <= 0.752

    def test_corridor_admits_ept(self):
        rng = np.random.default_rng(14)
        hits = 0
        for _ in range(25):
            pts = np.cumsum(rng.uniform(-0.8, 0.8, (4, 3)), axis=0)
            obs = []
            for _ in range(3):
                c = rng.uniform(-6, 6, 3)
                if min(np.linalg.norm(pts - c, axis=1)) < 2.5:
                    continue
                obs.append(ConvexObstacle.from_vertices(
                    c + rng.uniform(-1, 1, (8, 3))))
            ept = _ept(pts)
            out = build_corridor(ept, obs)
            for k in range(1, ept.horizon + 1):
                for hs in out[k - 1]:
                    hits += 1
                    assert hs.margin(pts[k - 1]) >= 0
                    assert hs.margin(pts[k]) >= 0
        assert hits > 20

    def test_ept_inside_obstacle_faults(self):
        cube = _box((-1, 1), (-1, 1), (-1, 1))
        ept = _ept([[0.0, 0, 0], [0.0, 0, 0]])
        with pytest.raises(RecursiveFeasibilityFault):
            build_corridor(ept, [cube])

    def test_reach_culling_tracks_deviation_bound(self):
        # stage-k plans can deviate at most h^2*a_max*k^2 (+slack) from the
        # EPT: the near cube (1 m away) only matters once that bound passes
        # 1 m, the far cube never does
        near = _box((1, 2), (-1, 1), (-1, 1))
        far = _box((200, 202), (-1, 1), (-1, 1))
        ept = _ept([[0.0, 0, 0]] * 11)
        out = build_corridor(ept, [near, far], h=0.5, a_max=0.36, slack=0.5)
        reach = lambda k: 0.25 * 0.36 * k * k + 0.5
        for k in range(1, 11):
            stage = out[k - 1]
            assert len(stage) == (1 if reach(k) >= 1.0 else 0)
        assert any(len(stage) == 1 for stage in out)


class TestIntermediateTarget:
    def test_straight_clear_path_jumps_to_end(self):
        wps = np.array([[0, 0, 0], [3, 0, 0], [6, 0, 0], [9, 0, 0]], dtype=float)
        pos, idx = update_intermediate_target(wps, 0, np.array([0.5, 0, 0]), [])
        assert idx == 3
        np.testing.assert_allclose(pos, [9, 0, 0])

    def test_corner_blocks_advance(self):
        # L-shaped route around a cube: advancing past the corner would put
        # the cube inside the hull of traversed waypoints + plan tail
        cube = _box((5, 7), (-1, 3), (-1, 1))
        wps = np.array([[0, 0, 0], [2, 2, 0], [4, 4, 0], [8, 4, 0]], dtype=float)
        p_K = np.array([3.0, 3.0, 0.0])
        pos, idx = update_intermediate_target(wps, 0, p_K, [cube])
        assert idx == 2
        np.testing.assert_allclose(pos, [4, 4, 0])
        # oracle: the hull through idx is disjoint, through idx+1 is not
        assert hulls_disjoint(np.vstack([wps[:3], p_K]), cube.vertices)
        assert not hulls_disjoint(np.vstack([wps[:4], p_K]), cube.vertices)

    def test_never_moves_backward(self):
        cube = _box((2, 3), (-1, 1), (-1, 1))
        wps = np.array([[0, 0, 0], [0, 3, 0], [4, 4, 0]], dtype=float)
        pos, idx = update_intermediate_target(wps, 1, np.array([0.0, 3, 0]), [cube])
        assert idx >= 1


class TestEdgeBundle:
    def test_bundle_invariants(self):
        obs = [_box((3, 5), (2, 4), (-1, 2))]
        K = 5
        pts_i = np.linspace([0, 0, 0], [2, 0, 0], K + 1)
        pts_j = np.linspace([8, 0, 0], [9, 0, 0], K + 1)
        bundle = build_edge_bundle(
            (0, 1), _ept(pts_i, owner=0), _ept(pts_j, owner=1),
            obs, d_w=17.0, d_c=18.0, h=0.5, a_max=0.36)
        assert bundle.centers.shape == (K, 3)
        for k in range(K):
            c = bundle.centers[k]
            assert np.linalg.norm(pts_i[k + 1] - c) <= 18.0 + 1e-9
            assert np.linalg.norm(pts_j[k + 1] - c) <= 18.0 + 1e-9
            for hs in bundle.los[k]:
                assert hs.margin(pts_i[k + 1]) >= 0
                assert hs.margin(pts_j[k + 1]) >= 0


class TestConstraintSet:
    def test_counts_and_violation(self):
        cs = ConstraintSet(K=3)
        cs.add_halfspace(1, mbvc_halfspace((0, 0, 0), (10, 0, 0), 2, 0.5, 15), "pair")
        cs.add_ball(2, np.array([0.0, 0, 0]), 5.0, "edge")
        assert cs.counts() == {"pair": 1, "edge": 1}
        good = np.zeros((3, 3))
        assert cs.max_violation(good) <= 0
        bad = np.array([[2.0, 0, 0], [0, 0, 0], [0, 0, 0]])
        assert cs.max_violation(bad) == pytest.approx(2.0 - 0.75)

    def test_serialization_roundtrip(self):
        import json
        cs = ConstraintSet(K=2)
        cs.add_halfspace(1, mbvc_halfspace((0, 0, 0), (4, 0, 0), 0.25, 0.5, 1.8), "pair")
        cs.add_ball(1, np.array([1.0, 2, 3]), 18.0, "edge")
        doc = json.loads(json.dumps(cs.to_dict()))
        assert doc["K"] == 2
        assert len(doc["halfspaces"]) == 2 and len(doc["balls"]) == 2
        assert doc["halfspaces"][0][0]["tag"] == "pair"
        assert doc["balls"][0][0]["radius"] == 18.0


class TestRecursiveFeasibilityWitness:
    """The EPT must satisfy every constraint built from it: that is the
    invariant the whole scheme leans on, so it gets its own property test."""

    def test_full_stack_witness(self):
        rng = np.random.default_rng(42)
        d_w, d_c = 17.0, 18.0
        obs = [_box((4, 6), (1, 3), (-1, 2))]
        for trial in range(10):
            base_i = rng.uniform([-2, -2, 0], [2, 2, 1])
            base_j = base_i + rng.uniform([6, -2, 0], [10, 2, 1])
            drift_i = rng.uniform(-0.4, 0.4, 3)
            drift_j = rng.uniform(-0.4, 0.4, 3)
            pts_i = base_i + np.outer(np.arange(7), drift_i)
            pts_j = base_j + np.outer(np.arange(7), drift_j)
            if not all(segment_clear(Segment(a, b), obs)
                       for a, b in zip(pts_i, pts_j)):
                continue
            if any(o.distance_to_point(p) < 0.3 for o in obs
                   for p in np.vstack([pts_i, pts_j])):
                continue
            ept_i, ept_j = _ept(pts_i, owner=0), _ept(pts_j, owner=1)
            bundle = build_edge_bundle((0, 1), ept_i, ept_j, obs,
                                       d_w=d_w, d_c=d_c, h=0.5, a_max=0.36)
            corridor = build_corridor(ept_i, obs, h=0.5, a_max=0.36)
            for k in range(1, 7):
                if k <= 6:
                    for hs in corridor[k - 1] if k - 1 < len(corridor) else []:
                        assert hs.margin(pts_i[k]) >= 0
                if k <= bundle.centers.shape[0]:
                    assert np.linalg.norm(pts_i[k] - bundle.centers[k - 1]) <= d_c
                    for hs in bundle.los[k - 1]:
                        assert hs.margin(pts_i[k]) >= 0
                        assert hs.margin(pts_j[k]) >= 0
