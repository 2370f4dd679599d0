"""Slow reference implementations used to cross-check the fast paths.

Everything here is deliberately independent of the package internals:
cvxpy for distances, dense sampling for containment, grid search for
1-D minimization.
"""

import numpy as np


def hull_distance_qp(points_a, points_b):
    """Distance between convex hulls as a QP over combination weights."""
    import cvxpy as cp

    A = np.asarray(points_a, dtype=float)
    B = np.asarray(points_b, dtype=float)
    lam = cp.Variable(len(A), nonneg=True)
    mu = cp.Variable(len(B), nonneg=True)
    prob = cp.Problem(
        cp.Minimize(cp.sum_squares(A.T @ lam - B.T @ mu)),
        [cp.sum(lam) == 1, cp.sum(mu) == 1],
    )
    prob.solve(solver=cp.CLARABEL)
    return float(np.sqrt(max(prob.value, 0.0)))


def fibonacci_directions(n):
    """Roughly uniform unit vectors for grid search over orientations."""
    i = np.arange(n)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def best_plane_margin(free_pts, obs_pts, n_dirs=20000):
    """Grid search over plane orientations: the best achievable margin
    min_a(free . a) - max(obs . a). Lower bound on the true max margin."""
    F = np.asarray(free_pts, dtype=float)
    V = np.asarray(obs_pts, dtype=float)
    dirs = fibonacci_directions(n_dirs)
    margins = (F @ dirs.T).min(axis=0) - (V @ dirs.T).max(axis=0)
    k = int(np.argmax(margins))
    return float(margins[k]), dirs[k]


def grid_min_eta(feasible, step=1e-5):
    """Smallest eta on a uniform grid with feasible(eta) true."""
    for eta in np.arange(0.0, 1.0 + step, step):
        if feasible(min(eta, 1.0)):
            return float(min(eta, 1.0))
    raise AssertionError("predicate infeasible even at eta=1")


def segment_samples(p, q, n=1000):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return np.asarray(p) * (1 - t) + np.asarray(q) * t


def random_box(rng, center_range=20.0, half_min=0.5, half_max=3.0):
    """Axis-aligned box vertices at a random location."""
    c = rng.uniform(-center_range, center_range, 3)
    half = rng.uniform(half_min, half_max, 3)
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    return c + corners * half


def _roll_positions(p0, v0, us, h):
    """Literal step-by-step rollout, kept independent of the package's
    closed-form stacked maps."""
    p = np.asarray(p0, dtype=float).copy()
    v = np.asarray(v0, dtype=float).copy()
    out_p, out_v = [], []
    for u in us:
        p = p + h * v + 0.5 * h * h * np.asarray(u, dtype=float)
        v = v + h * np.asarray(u, dtype=float)
        out_p.append(p.copy())
        out_v.append(v.copy())
    return np.array(out_p), np.array(out_v)


def _impulse_maps(K, h):
    """Position/velocity response to unit control impulses, by simulation."""
    n = 3 * K
    Pmap = np.zeros((n, n))
    Vmap = np.zeros((n, n))
    for col in range(n):
        us = np.zeros((K, 3))
        us[col // 3, col % 3] = 1.0
        ps, vs = _roll_positions(np.zeros(3), np.zeros(3), us, h)
        Pmap[:, col] = ps.ravel()
        Vmap[:, col] = vs.ravel()
    return Pmap, Vmap


class _BallSet:
    """{u : ||B u + d|| <= r}; exact projection via the 1-D dual."""

    def __init__(self, B, d, r):
        self.B, self.d, self.r = B, np.asarray(d, dtype=float), float(r)
        self.U, self.S, self.Vt = np.linalg.svd(B, full_matrices=False)

    def project(self, u0):
        y0 = self.B @ u0 + self.d
        if np.linalg.norm(y0) <= self.r:
            return u0

        def resid(lam):
            # y(lam) = B(I+lam B'B)^-1 (u0 - lam B'd) + d, via the SVD;
            # monotone decreasing in lam
            t = (self.S * (self.Vt @ u0) - lam * self.S ** 2 * (self.U.T @ self.d)) \
                / (1.0 + lam * self.S ** 2)
            return float(np.linalg.norm(self.U @ t + self.d)) - self.r

        lo, hi = 0.0, 1.0
        while resid(hi) > 0:
            hi *= 2.0
            if hi > 1e12:
                break
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if resid(mid) > 0:
                lo = mid
            else:
                hi = mid
        lam = hi
        t = (self.S * (self.Vt @ u0) - lam * self.S ** 2 * (self.U.T @ self.d)) \
            / (1.0 + lam * self.S ** 2)
        y = self.U @ t + self.d
        return u0 - lam * self.B.T @ y


class _HalfspaceSet:
    """{u : g . u >= c}."""

    def __init__(self, g, c):
        self.g = np.asarray(g, dtype=float)
        self.c = float(c)
        self.gg = float(self.g @ self.g)

    def project(self, u0):
        gap = self.c - float(self.g @ u0)
        if gap <= 0:
            return u0
        return u0 + self.g * (gap / self.gg)


class _TerminalSet:
    """{u : sum_k u_k = rhs} per axis."""

    def __init__(self, K, rhs):
        self.K = K
        self.rhs = np.asarray(rhs, dtype=float)

    def project(self, u0):
        u = u0.reshape(self.K, 3).copy()
        u -= (u.sum(axis=0) - self.rhs) / self.K
        return u.ravel()


class _BlockBallSet:
    """{u : ||u_k|| <= r} on one 3-coordinate block."""

    def __init__(self, k, r):
        self.sl = slice(3 * k, 3 * k + 3)
        self.r = float(r)

    def project(self, u0):
        u = u0.copy()
        nrm = float(np.linalg.norm(u[self.sl]))
        if nrm > self.r:
            u[self.sl] *= self.r / nrm
        return u


def _dykstra(sets, u0, passes=400, tol=1e-13):
    u = u0.copy()
    corr = [np.zeros_like(u0) for _ in sets]
    for _ in range(passes):
        shift = 0.0
        for i, s in enumerate(sets):
            prev = u
            u = s.project(prev + corr[i])
            corr[i] = prev + corr[i] - u
            shift = max(shift, float(np.abs(u - prev).max()))
        if shift < tol:
            break
    return u


def pg_qcqp_oracle(K, h, p0, v0, Qp, q, halfspaces, balls, v_max, a_max,
                   warm_controls, max_iter=20000, rtol=1e-10):
    """Accelerated projected gradient on the control stack, run to
    convergence. Projection onto the feasible intersection is computed by
    Dykstra's alternating method with exact per-set projections. Returns
    (objective, controls)."""
    Pmap, Vmap = _impulse_maps(K, h)
    pf, vf = _roll_positions(p0, v0, np.zeros((K, 3)), h)
    pf, vf = pf.ravel(), vf.ravel()

    sets = [_TerminalSet(K, -np.asarray(v0, dtype=float) / h)]
    for k in range(K):
        rows = slice(3 * k, 3 * k + 3)
        for a, b in halfspaces[k]:
            sets.append(_HalfspaceSet(np.asarray(a) @ Pmap[rows], b - float(np.asarray(a) @ pf[rows])))
        for c, r in balls[k]:
            sets.append(_BallSet(Pmap[rows], pf[rows] - np.asarray(c, dtype=float), r))
        sets.append(_BallSet(Vmap[rows], vf[rows], v_max))
        sets.append(_BlockBallSet(k, a_max))

    H = Pmap.T @ Qp @ Pmap
    lin = Pmap.T @ (Qp @ pf + q)
    L = float(np.linalg.eigvalsh(H).max())

    def fval(u):
        p = Pmap @ u + pf
        return 0.5 * float(p @ Qp @ p) + float(q @ p)

    u = _dykstra(sets, np.asarray(warm_controls, dtype=float).ravel())
    y = u.copy()
    t = 1.0
    best = (fval(u), u.copy())
    prev_f = best[0]
    stall = 0
    for it in range(max_iter):
        grad = H @ y + lin
        u_next = _dykstra(sets, y - grad / L)
        f_next = fval(u_next)
        if f_next < best[0]:
            best = (f_next, u_next.copy())
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        if f_next > prev_f:
            y = u_next.copy()
            t_next = 1.0
        else:
            y = u_next + ((t - 1.0) / t_next) * (u_next - u)
        u, t, prev_f = u_next, t_next, f_next
        if it % 50 == 49:
            if abs(prev_f - best[0]) <= rtol * max(1.0, abs(best[0])) and stall >= 1:
                break
            stall += 1 if abs(prev_f - best[0]) <= rtol * max(1.0, abs(best[0])) else 0
    return best[0], best[1].reshape(K, 3)


def make_qcqp_instance(seed, K=3, h=0.5, n_halfspaces=2, n_balls=1,
                       v_max=2.0, a_max=1.5):
    """Random small instance that is feasible by construction: constraints
    are placed with slack around the hover warm start."""
    r = np.random.default_rng(seed)
    p0 = r.uniform(-2, 2, 3)
    v0 = r.uniform(-0.3, 0.3, 3)
    warm = np.tile(-v0 / (h * K), (K, 1))
    pos, _ = _roll_positions(p0, v0, warm, h)
    goal = p0 + r.uniform(-2.5, 2.5, 3)
    n = 3 * K
    Qp = np.zeros((n, n))
    q = np.zeros(n)
    Qp[n - 3:, n - 3:] += 10.0 * np.eye(3)
    q[n - 3:] -= 10.0 * goal
    for k in range(K - 1):
        i, j = 3 * k, 3 * (k + 1)
        Qp[i:i + 3, i:i + 3] += np.eye(3)
        Qp[j:j + 3, j:j + 3] += np.eye(3)
        Qp[i:i + 3, j:j + 3] -= np.eye(3)
        Qp[j:j + 3, i:i + 3] -= np.eye(3)
    hs = [[] for _ in range(K)]
    balls = [[] for _ in range(K)]
    for _ in range(n_halfspaces):
        k = int(r.integers(K))
        a = r.normal(size=3)
        a /= np.linalg.norm(a)
        hs[k].append((a, float(a @ pos[k]) - r.uniform(0.2, 1.5)))
    for _ in range(n_balls):
        k = int(r.integers(K))
        c = pos[k] + r.uniform(-0.4, 0.4, 3)
        balls[k].append((c, float(np.linalg.norm(pos[k] - c)) + r.uniform(0.4, 2.0)))
    return dict(K=K, h=h, p0=p0, v0=v0, Qp=Qp, q=q, halfspaces=hs,
                balls=balls, v_max=v_max, a_max=a_max, warm_controls=warm)
