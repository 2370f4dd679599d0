"""Convex geometry for planning: polytope obstacles, inflation, hull
distances, separating hyperplanes and segment clearance tests.

All obstacles are bounded convex polytopes carrying both a vertex list and
a halfspace description (outward unit normals, interior is ``n . x <= d``).
Distances between convex hulls are computed exactly with Wolfe's
minimum-norm-point algorithm on the Minkowski difference, which keeps the
hot path free of iterative-solver tolerances.

Predicates are conservative: anything within EPS_GEO of contact counts as
touching.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, HalfspaceIntersection, QhullError

EPS_GEO = 1e-9


class DegenerateObstacleError(ValueError):
    """Raised when a vertex set does not span a 3D volume."""


class SeparationInfeasibleError(RuntimeError):
    """Raised when two hulls overlap and no separating plane exists."""


@dataclass(frozen=True)
class Halfspace:
    """Feasible side is ``normal . p >= offset`` with a unit normal."""

    normal: np.ndarray
    offset: float

    def contains(self, p, tol=EPS_GEO):
        return float(self.normal @ p) >= self.offset - tol

    def margin(self, p):
        """Signed slack of p, positive inside the feasible side."""
        return float(self.normal @ p) - self.offset


@dataclass(frozen=True)
class Segment:
    start: np.ndarray
    end: np.ndarray

    @property
    def length(self):
        return float(np.linalg.norm(self.end - self.start))

    def point_at(self, t):
        return self.start + t * (self.end - self.start)


@dataclass(frozen=True)
class ConvexObstacle:
    """Bounded convex polytope: vertices plus faces ``normals . x <= offsets``."""

    vertices: np.ndarray          # (n, 3)
    normals: np.ndarray           # (m, 3) outward unit normals
    offsets: np.ndarray           # (m,)
    centroid: np.ndarray = field(init=False)
    bound_radius: float = field(init=False)

    def __post_init__(self):
        c = self.vertices.mean(axis=0)
        object.__setattr__(self, "centroid", c)
        r = float(np.max(np.linalg.norm(self.vertices - c, axis=1)))
        object.__setattr__(self, "bound_radius", r)

    @classmethod
    def from_vertices(cls, vertices):
        """Build from a point cloud; raises DegenerateObstacleError if the
        points do not span a 3D volume."""
        pts = np.asarray(vertices, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 4:
            raise DegenerateObstacleError(
                f"need at least 4 points in 3D, got shape {pts.shape}"
            )
        try:
            hull = ConvexHull(pts)
        except QhullError as e:
            raise DegenerateObstacleError(
                f"vertex set spans no volume: {e}"
            ) from None
        if hull.volume <= EPS_GEO:
            raise DegenerateObstacleError("hull volume is zero")
        verts = pts[hull.vertices]
        normals, offsets = _dedupe_planes(hull.equations)
        return cls(vertices=verts, normals=normals, offsets=offsets)

    def contains(self, p, tol=EPS_GEO):
        """Point inside or within tol of the boundary."""
        return bool(np.all(self.normals @ p <= self.offsets + tol))

    def face_margin(self, p):
        """Max face excess of p; negative means inside, positive is a lower
        bound on nothing but a cheap outside certificate."""
        return float(np.max(self.normals @ p - self.offsets))

    def inflate(self, margin):
        """Offset every face outward by margin and recompute vertices.

        margin == 0 returns an equal obstacle. The centroid of the original
        polytope is strictly interior to the inflated one, which is what
        HalfspaceIntersection needs.
        """
        if margin < 0:
            raise ValueError(f"margin must be >= 0, got {margin}")
        if margin == 0:
            return self
        offs = self.offsets + margin
        hs = np.hstack([self.normals, -offs[:, None]])
        hi = HalfspaceIntersection(hs, self.centroid)
        verts = _dedupe_points(hi.intersections)
        return ConvexObstacle(vertices=verts, normals=self.normals.copy(),
                              offsets=offs)

    def distance_to_point(self, p):
        """Exact Euclidean distance from p to the polytope (0 if inside)."""
        x, _ = min_norm_point(self.vertices - np.asarray(p, dtype=float))
        return float(np.linalg.norm(x))

    def to_dict(self):
        return {"vertices": self.vertices.tolist()}


def _dedupe_planes(equations, tol=1e-9):
    """ConvexHull equations are [n | d] with n.x + d <= 0; return unique
    (normals, offsets) with interior n.x <= offset."""
    normals = equations[:, :3]
    offsets = -equations[:, 3]
    keep = []
    for i in range(len(normals)):
        dup = False
        for j in keep:
            if (np.abs(normals[i] - normals[j]).max() < tol
                    and abs(offsets[i] - offsets[j]) < tol):
                dup = True
                break
        if not dup:
            keep.append(i)
    return normals[keep].copy(), offsets[keep].copy()


def _dedupe_points(pts, tol=1e-7):
    keep = []
    for p in pts:
        if all(np.linalg.norm(p - q) > tol for q in keep):
            keep.append(p)
    return np.array(keep)


def min_norm_point(points, tol=1e-9, max_iter=200):
    """Wolfe's algorithm: the point of minimum Euclidean norm in the convex
    hull of ``points`` (k, 3).

    Returns (x, weights) with x = points.T @ weights, weights a convex
    combination. The stopping test is relative to |x|^2 so the direction
    stays accurate even when the hull passes very close to the origin.
    """
    P = np.asarray(points, dtype=float)
    idx = [int(np.argmin(np.einsum("ij,ij->i", P, P)))]
    w = np.array([1.0])
    for _ in range(max_iter):
        x = w @ P[idx]
        xx = float(x @ x)
        dots = P @ x
        j = int(np.argmin(dots))
        if dots[j] > xx - tol * xx:
            break
        if j in idx:
            break
        idx.append(j)
        w = np.append(w, 0.0)
        # minor cycle: affine minimizer over the current corral
        while True:
            S = P[idx]
            k = len(idx)
            M = np.empty((k + 1, k + 1))
            M[:k, :k] = S @ S.T
            M[:k, k] = 1.0
            M[k, :k] = 1.0
            M[k, k] = 0.0
            rhs = np.zeros(k + 1)
            rhs[k] = 1.0
            try:
                v = np.linalg.solve(M, rhs)[:k]
            except np.linalg.LinAlgError:
                v = np.linalg.lstsq(M, rhs, rcond=None)[0][:k]
            if np.all(v > 1e-12):
                w = v
                break
            mask = w > v
            if not np.any(mask):
                w = v
                break
            theta = np.min(w[mask] / (w[mask] - v[mask]))
            theta = min(max(theta, 0.0), 1.0)
            w = (1.0 - theta) * w + theta * v
            w[w < 1e-12] = 0.0
            alive = w > 0.0
            if not np.any(alive):
                alive[int(np.argmax(v))] = True
                w[alive] = 1.0
            idx = [idx[i] for i in range(k) if alive[i]]
            w = w[alive]
            w = w / w.sum()
    full = np.zeros(len(P))
    for i, wi in zip(idx, w):
        full[i] += wi
    return np.asarray(w @ P[idx], dtype=float), full


def hull_distance(points_a, points_b):
    """Exact distance between conv(points_a) and conv(points_b), with the
    closest pair of witness points.

    Returns (dist, point_in_a, point_in_b); dist == 0.0 when the hulls
    intersect.
    """
    A = np.asarray(points_a, dtype=float)
    B = np.asarray(points_b, dtype=float)
    diff = (A[:, None, :] - B[None, :, :]).reshape(-1, 3)
    x, wfull = min_norm_point(diff)
    d = float(np.linalg.norm(x))
    W = wfull.reshape(len(A), len(B))
    wa = W.sum(axis=1)
    wb = W.sum(axis=0)
    return d, wa @ A, wb @ B


def hulls_disjoint(points_a, points_b, clearance=EPS_GEO):
    """True when the hulls are separated by more than clearance."""
    A = np.asarray(points_a, dtype=float)
    B = np.asarray(points_b, dtype=float)
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    ra = float(np.max(np.linalg.norm(A - ca, axis=1)))
    rb = float(np.max(np.linalg.norm(B - cb, axis=1)))
    if float(np.linalg.norm(ca - cb)) - ra - rb > clearance:
        return True
    d, _, _ = hull_distance(A, B)
    return d > clearance


def separating_hyperplane(free_points, obstacle):
    """Max-margin plane between conv(free_points) and an obstacle.

    Returns (Halfspace, delta) where the halfspace normal points from the
    obstacle toward the free set, the offset touches the obstacle's support,
    and delta is the hull-to-hull distance (the slack of the tightest free
    point). Raises SeparationInfeasibleError when the hulls touch.
    """
    F = np.atleast_2d(np.asarray(free_points, dtype=float))
    V = obstacle.vertices if isinstance(obstacle, ConvexObstacle) else np.asarray(obstacle, dtype=float)
    d, qf, qo = hull_distance(F, V)
    if d <= EPS_GEO:
        raise SeparationInfeasibleError(
            f"hulls touch (distance {d:.3e}); no separating plane"
        )
    a = (qf - qo) / d
    b = float(np.max(V @ a))
    delta = float(np.min(F @ a)) - b
    return Halfspace(normal=a, offset=b), delta


def segment_clear(segment, obstacles, clearance=0.0):
    """True when the segment misses every obstacle (inflated on the fly by
    ``clearance`` via face offsets).

    Conservative: grazing contact counts as blocked. Uses 1D slab clipping
    of the segment against each face set.
    """
    p = np.asarray(segment.start, dtype=float)
    q = np.asarray(segment.end, dtype=float)
    d = q - p
    for obs in obstacles:
        # cheap reject on the bounding sphere
        if _point_segment_distance(obs.centroid, p, q) > obs.bound_radius + clearance + EPS_GEO:
            continue
        if _segment_hits_faces(p, d, obs.normals, obs.offsets + clearance):
            return False
    return True


def _segment_hits_faces(p, d, normals, offsets):
    an = normals @ p - offsets
    ad = normals @ d
    t_lo, t_hi = 0.0, 1.0
    for i in range(len(an)):
        if ad[i] > EPS_GEO:
            t_hi = min(t_hi, (EPS_GEO - an[i]) / ad[i])
        elif ad[i] < -EPS_GEO:
            t_lo = max(t_lo, (EPS_GEO - an[i]) / ad[i])
        elif an[i] > EPS_GEO:
            return False
        if t_lo > t_hi:
            return False
    return True


def segments_clear_batch(starts, ends, obstacles, clearance=0.0):
    """Vectorized segment_clear over many segments at once.

    starts/ends: (S, 3). Returns a bool array of length S, True where the
    segment misses every obstacle. Same conservative slab test as
    segment_clear.
    """
    P = np.asarray(starts, dtype=float)
    Q = np.asarray(ends, dtype=float)
    D = Q - P
    clear = np.ones(len(P), dtype=bool)
    for obs in obstacles:
        offs = obs.offsets + clearance
        an = P @ obs.normals.T - offs          # (S, m)
        ad = D @ obs.normals.T                 # (S, m)
        t_lo = np.zeros(len(P))
        t_hi = np.ones(len(P))
        feasible = np.ones(len(P), dtype=bool)
        pos = ad > EPS_GEO
        neg = ad < -EPS_GEO
        flat = ~pos & ~neg
        with np.errstate(divide="ignore", invalid="ignore"):
            bound = (EPS_GEO - an) / ad
        hi = np.where(pos, bound, np.inf).min(axis=1)
        lo = np.where(neg, bound, -np.inf).max(axis=1)
        t_hi = np.minimum(t_hi, hi)
        t_lo = np.maximum(t_lo, lo)
        feasible &= ~np.any(flat & (an > EPS_GEO), axis=1)
        hits = feasible & (t_lo <= t_hi)
        clear &= ~hits
    return clear


def _point_segment_distance(c, p, q):
    d = q - p
    dd = float(d @ d)
    if dd <= EPS_GEO:
        return float(np.linalg.norm(c - p))
    t = float(np.clip((c - p) @ d / dd, 0.0, 1.0))
    return float(np.linalg.norm(c - (p + t * d)))


def segment_obstacle_distance(segment, obstacle):
    """Exact distance between a segment and a polytope (0 if they touch)."""
    pts = np.vstack([segment.start, segment.end])
    d, _, _ = hull_distance(pts, obstacle.vertices)
    return d


def point_free(p, obstacles, clearance=0.0):
    """True when p is farther than clearance from every obstacle."""
    p = np.asarray(p, dtype=float)
    for obs in obstacles:
        if float(np.linalg.norm(p - obs.centroid)) > obs.bound_radius + clearance + EPS_GEO:
            continue
        if obs.face_margin(p) > clearance + EPS_GEO:
            continue
        if obs.distance_to_point(p) <= clearance + EPS_GEO:
            return False
    return True
