"""Per-tick constraint construction for the distributed MPC.

Four constraint families, all anchored on predetermined trajectories so the
shifted previous plan is always a feasible witness:

- inter-agent separation halfspaces (buffered Voronoi, one per pair/stage),
- obstacle corridors (max-margin planes between consecutive plan points and
  inflated obstacles),
- connectivity balls shared per tree edge (three-case center selection),
- LOS safe zones (separating planes so both edge endpoints keep a clear
  sightline past every nearby obstacle).

Emitted plane offsets are padded by their full support slack capped at PAD,
so the witness keeps a margin of exactly max(0, slack - PAD): plans riding
an active plane hold their obstacle gap across rebuilds instead of eroding
it, and gaps settle near PAD rather than decaying to floating-point noise.
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    EPS_GEO,
    Halfspace,
    SeparationInfeasibleError,
    hull_distance,
    hulls_disjoint,
    separating_hyperplane,
)

PAD = 1e-3
ETA_TOL = 1e-4


class RecursiveFeasibilityFault(RuntimeError):
    """A constraint build found its own precondition violated; the shifted
    plan is no longer a valid witness and the run must surface the bug."""


@dataclass
class PredeterminedTrajectory:
    """Last tick's plan shifted by one step (first dropped, last repeated)."""

    positions: np.ndarray       # (K, 3)
    owner: int
    tick: int


@dataclass
class ExtendedPredeterminedTrajectory:
    """Predetermined positions with the intermediate target appended."""

    positions: np.ndarray       # (K+1, 3)
    owner: int
    tick: int

    @property
    def horizon(self):
        return len(self.positions) - 1


@dataclass
class ConstraintSet:
    """Stage-indexed halfspaces and balls for one agent's QCQP."""

    K: int
    halfspaces: list = field(default_factory=list)   # per stage: [(a, b, tag)]
    balls: list = field(default_factory=list)        # per stage: [(center, radius, tag)]

    def __post_init__(self):
        if not self.halfspaces:
            self.halfspaces = [[] for _ in range(self.K)]
        if not self.balls:
            self.balls = [[] for _ in range(self.K)]

    def add_halfspace(self, k, hs, tag):
        self.halfspaces[k - 1].append((hs.normal, hs.offset, tag))

    def add_ball(self, k, center, radius, tag):
        self.balls[k - 1].append((np.asarray(center, dtype=float), float(radius), tag))

    def counts(self):
        out = {}
        for stage in self.halfspaces:
            for _, _, tag in stage:
                out[tag] = out.get(tag, 0) + 1
        for stage in self.balls:
            for _, _, tag in stage:
                out[tag] = out.get(tag, 0) + 1
        return out

    def max_violation(self, positions):
        """Largest constraint violation of a stage-indexed position list
        (K, 3); <= 0 means every constraint is satisfied."""
        worst = 0.0
        for k in range(self.K):
            p = positions[k]
            for a, b, _ in self.halfspaces[k]:
                worst = max(worst, b - float(a @ p))
            for c, r, _ in self.balls[k]:
                worst = max(worst, float(np.linalg.norm(p - c)) - r)
        return worst

    def violation_by_tag(self, positions):
        """Worst violation per constraint tag and its stage, for fault
        diagnostics."""
        worst = {}
        for k in range(self.K):
            p = positions[k]
            for a, b, tag in self.halfspaces[k]:
                v = b - float(a @ p)
                if tag not in worst or v > worst[tag][0]:
                    worst[tag] = (v, k + 1)
            for c, r, tag in self.balls[k]:
                v = float(np.linalg.norm(p - c)) - r
                if tag not in worst or v > worst[tag][0]:
                    worst[tag] = (v, k + 1)
        return worst

    def to_dict(self):
        return {
            "K": self.K,
            "halfspaces": [
                [{"a": a.tolist(), "b": float(b), "tag": tag} for a, b, tag in stage]
                for stage in self.halfspaces
            ],
            "balls": [
                [{"center": c.tolist(), "radius": float(r), "tag": tag} for c, r, tag in stage]
                for stage in self.balls
            ],
        }


def r_min_buffer(r_a, h, v_max):
    """Sampled-time separation buffer: 2r_a is still guaranteed mid-step at
    worst-case closing speed."""
    return float(np.sqrt(4.0 * r_a ** 2 + h ** 2 * v_max ** 2))


def mbvc_halfspace(p_i, p_j, r_a, h, v_max):
    """Buffered-Voronoi halfspace for agent i against agent j, built on the
    predetermined stage positions; feasible side contains p_i's half."""
    p_i = np.asarray(p_i, dtype=float)
    p_j = np.asarray(p_j, dtype=float)
    gap = p_i - p_j
    dist = float(np.linalg.norm(gap))
    if dist < 1e-12:
        raise RecursiveFeasibilityFault(
            f"coincident predetermined points {p_i.tolist()}"
        )
    a = gap / dist
    b = float(a @ ((p_i + p_j) / 2.0)) + r_min_buffer(r_a, h, v_max) / 2.0
    return Halfspace(normal=a, offset=b)


def _padded(hs, delta):
    """Push the plane toward the free side, but never past the support gap.

    Padding by min(delta, PAD) rather than a fraction of delta leaves the
    free points a margin of exactly max(0, delta - PAD): a plan riding the
    plane keeps the same obstacle gap at the next rebuild instead of
    halving it, so gaps floor at PAD instead of decaying to zero."""
    return Halfspace(normal=hs.normal, offset=hs.offset + min(delta, PAD))


def build_corridor(ept, inflated_obstacles, h=None, a_max=None, slack=0.5):
    """Obstacle-separation planes per stage.

    Stage k separates the hull of {p̄_k, p̄_{k+1}} from each nearby inflated
    obstacle. When h and a_max are given, obstacles no dynamically feasible
    deviation could reach are skipped (plan point k can move at most
    h^2*a_max*k^2 from its predetermined position).
    """
    pos = ept.positions
    K = ept.horizon
    out = [[] for _ in range(K)]
    for k in range(1, K + 1):
        free = pos[k - 1:k + 1]
        reach = None
        if h is not None and a_max is not None:
            reach = h * h * a_max * k * k + slack
        for obs in inflated_obstacles:
            if reach is not None:
                lower = _segment_point_gap(obs.centroid, free[0], free[-1]) - obs.bound_radius
                if lower > reach:
                    continue
            try:
                hs, delta = separating_hyperplane(free, obs.vertices)
            except SeparationInfeasibleError as e:
                raise RecursiveFeasibilityFault(
                    f"EPT of agent {ept.owner} touches an inflated obstacle at stage {k}: {e}"
                ) from None
            if reach is not None and delta > reach:
                continue
            out[k - 1].append(_padded(hs, delta))
    return out


def _segment_point_gap(c, p, q):
    d = q - p
    dd = float(d @ d)
    if dd < 1e-18:
        return float(np.linalg.norm(c - p))
    t = float(np.clip((c - p) @ d / dd, 0.0, 1.0))
    return float(np.linalg.norm(c - (p + t * d)))


def update_intermediate_target(waypoints, prev_index, p_K, inflated_obstacles):
    """Advance a searcher's intermediate target along its reference path.

    Returns (position, waypoint index): the furthest waypoint such that the
    hull of the traversed waypoints plus the plan tail p_K avoids all
    inflated obstacles. Never moves backward; the previous target always
    qualifies.
    """
    waypoints = np.asarray(waypoints, dtype=float)
    p_K = np.asarray(p_K, dtype=float)
    last = len(waypoints) - 1
    for idx in range(last, prev_index, -1):
        pts = np.vstack([waypoints[prev_index:idx + 1], p_K])
        if all(hulls_disjoint(pts, o.vertices) for o in inflated_obstacles):
            return waypoints[idx].copy(), idx
    return waypoints[prev_index].copy(), prev_index


def connectivity_center(p_i, p_j, p_i_next, p_j_next, d_w, d_c):
    """Shared ball center for a tree edge, from both agents' predetermined
    stage positions (current and next).

    Far pairs get the midpoint, close pairs the four-point mean, and the
    medium case blends toward the midpoint just enough to keep both current
    points within d_w/2 of the center.
    """
    p_i = np.asarray(p_i, dtype=float)
    p_j = np.asarray(p_j, dtype=float)
    p_i_next = np.asarray(p_i_next, dtype=float)
    p_j_next = np.asarray(p_j_next, dtype=float)
    dist = float(np.linalg.norm(p_i - p_j))
    if dist > d_c + 1e-6:
        raise RecursiveFeasibilityFault(
            f"edge length {dist:.3f} exceeds d_c={d_c} at constraint build"
        )
    mid = (p_i + p_j) / 2.0
    if dist > d_w:
        return mid
    center = (p_i + p_j + p_i_next + p_j_next) / 4.0
    pts = np.vstack([p_i, p_j, p_i_next, p_j_next])
    if np.all(np.linalg.norm(pts - center, axis=1) < d_w):
        return center

    def feasible(eta):
        c = eta * mid + (1.0 - eta) * center
        return (np.linalg.norm(p_i - c) <= d_w / 2.0
                and np.linalg.norm(p_j - c) <= d_w / 2.0)

    eta = bisect_min_eta(feasible, tol=ETA_TOL)
    return eta * mid + (1.0 - eta) * center


def bisect_min_eta(feasible, tol=ETA_TOL, max_iter=30):
    """Minimal eta in [0,1] with feasible(eta) true, for predicates that are
    false below some threshold and true above it.

    feasible(1) must hold (it reproduces the previous certified state);
    anything else is a recursive-feasibility fault.
    """
    if feasible(0.0):
        return 0.0
    if not feasible(1.0):
        raise RecursiveFeasibilityFault("bisection predicate infeasible at eta=1")
    lo, hi = 0.0, 1.0
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        mid = (lo + hi) / 2.0
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return hi


def los_waypoints(p_i, p_j, p_i_next, p_j_next, obstacles_dm):
    """Blend the edge's next-step points back toward the current ones until
    the spanned quad clears all margin-inflated obstacles with headroom.

    Returns (waypoint_i, waypoint_j, eta). eta=0 means the full next-step
    quad is already clear; eta=1 collapses to the current segment, which is
    clear by the standing LOS invariant.

    The bisection keeps the quad a margin of (1 - 1e-4) * min(PAD, g) away
    from the hulls, where g is the current segment's own gap, instead of
    stopping at bare disjointness. Planes fitted to a barely-disjoint hull
    carry a near-zero support gap, and an objective pressing against them
    then parks plans in grazing contact; the margin makes gaps
    self-sustaining (next tick's g is at least this tick's margin), so they
    floor near PAD instead of decaying to the floating-point noise floor.
    """
    p_i = np.asarray(p_i, dtype=float)
    p_j = np.asarray(p_j, dtype=float)
    p_i_next = np.asarray(p_i_next, dtype=float)
    p_j_next = np.asarray(p_j_next, dtype=float)
    near = _cull_near_hull(np.vstack([p_i, p_j, p_i_next, p_j_next]), obstacles_dm)
    if not near:
        return p_i_next.copy(), p_j_next.copy(), 0.0
    seg = np.vstack([p_i, p_j])
    gap = min(hull_distance(seg, o.vertices)[0] for o in near)
    if gap <= EPS_GEO:
        raise RecursiveFeasibilityFault(
            "predetermined edge segment intersects a margin-inflated obstacle"
        )
    margin = (1.0 - 1e-4) * min(PAD, gap)

    def blend(eta):
        wi = eta * p_i + (1.0 - eta) * p_i_next
        wj = eta * p_j + (1.0 - eta) * p_j_next
        return wi, wj

    def feasible(eta):
        wi, wj = blend(eta)
        quad = np.vstack([p_i, p_j, wi, wj])
        return all(hull_distance(quad, o.vertices)[0] > margin for o in near)

    eta = bisect_min_eta(feasible, tol=ETA_TOL)
    wi, wj = blend(eta)
    return wi, wj, eta


def _cull_near_hull(points, obstacles, margin=1.0):
    center = points.mean(axis=0)
    radius = float(np.max(np.linalg.norm(points - center, axis=1)))
    out = []
    for obs in obstacles:
        if float(np.linalg.norm(obs.centroid - center)) <= radius + obs.bound_radius + margin:
            out.append(obs)
    return out


def los_safe_zone(free_pts, obstacles_dm, cull_radius=None):
    """Max-margin separating planes, nearest obstacle first, skipping any
    obstacle already wholly behind an emitted plane.

    Free side is a.p >= b; free points never end up on the obstacle side.
    cull_radius, when given, drops obstacles farther than that from the
    free hull (callers bound it by what any feasible plan could reach).
    """
    free_pts = np.asarray(free_pts, dtype=float)
    center = free_pts.mean(axis=0)
    radius = float(np.max(np.linalg.norm(free_pts - center, axis=1)))
    skip_slack = 0.5 * PAD
    ranked = []
    for obs in obstacles_dm:
        if cull_radius is not None:
            lower = float(np.linalg.norm(obs.centroid - center)) - obs.bound_radius - radius
            if lower > cull_radius:
                continue
        d, _, _ = hull_distance(free_pts, obs.vertices)
        if cull_radius is not None and d > cull_radius:
            continue
        ranked.append((d, obs))
    ranked.sort(key=lambda pair: pair[0])

    zone = []
    for _, obs in ranked:
        excluded = any(
            float(np.max(obs.vertices @ hs.normal)) < hs.offset - skip_slack
            for hs in zone
        )
        if excluded:
            continue
        try:
            hs, delta = separating_hyperplane(free_pts, obs.vertices)
        except SeparationInfeasibleError as e:
            raise RecursiveFeasibilityFault(f"LOS free hull touches obstacle: {e}") from None
        zone.append(_padded(hs, delta))
    return zone


@dataclass
class EdgeBundle:
    """Shared per-edge constraint data, built once by the parent side:
    ball centers per stage and LOS halfspaces per stage."""

    edge: tuple
    centers: np.ndarray          # (K, 3)
    los: list                    # per stage: [Halfspace]
    etas: np.ndarray             # (K,) blend factors, diagnostic


def build_edge_bundle(edge, ept_i, ept_j, obstacles_dm, d_w, d_c, h=None,
                      a_max=None, slack=0.5):
    """Connectivity ball centers and LOS planes for one tree edge across the
    whole horizon.

    The stage-K LOS waypoints blend toward the appended tail (a searcher's
    intermediate target) so the zone opens toward it; the stage-K ball
    center instead duplicates the last shifted point, keeping the witness
    distance to every center bounded by the step length rather than by an
    arbitrarily far tail.

    With h and a_max given, LOS-zone obstacles beyond any feasible stage-k
    deviation (h^2*a_max*k^2) are culled; either agent's plan point stays
    within that radius of its predetermined position, so skipped obstacles
    cannot obstruct any admissible pair.
    """
    K = ept_i.horizon
    pi, pj = ept_i.positions, ept_j.positions
    centers = np.empty((K, 3))
    los = []
    etas = np.empty(K)
    for k in range(1, K + 1):
        nk = min(k, K - 1)
        centers[k - 1] = connectivity_center(pi[k - 1], pj[k - 1], pi[nk], pj[nk], d_w, d_c)
        wi, wj, eta = los_waypoints(pi[k - 1], pj[k - 1], pi[k], pj[k], obstacles_dm)
        etas[k - 1] = eta
        free = np.vstack([pi[k - 1], pj[k - 1], wi, wj])
        cull = None
        if h is not None and a_max is not None:
            cull = h * h * a_max * k * k + slack
        los.append(los_safe_zone(free, obstacles_dm, cull_radius=cull))
    return EdgeBundle(edge=edge, centers=centers, los=los, etas=etas)
