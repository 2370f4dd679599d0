"""Per-agent trajectory QCQP.

Quadratic objective over stacked plan positions, linear halfspaces, shared
connectivity balls, velocity/input norm bounds and a zero terminal
velocity. Solved in a condensed control space: the terminal equality is
eliminated exactly through a null-space parameterization, every remaining
constraint becomes either a scalar lower bound or a Euclidean ball on an
affine image of the variable, and consensus ADMM alternates a single
Cholesky solve with closed-form projections. An active-set polish sharpens
the ADMM point and a safeguarded line search from the (always feasible)
warm start guarantees the returned plan is feasible and never worse than
the shifted previous plan.
"""

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, null_space

FEAS_TOL = 1e-9
OUT_TOL = 1e-6

DEFAULT_SETTINGS = {
    "rho": None,          # None: scale from the objective curvature
    "max_iter": 400,
    "tol": 1e-7,
    "over_relax": 1.6,
    "polish": True,
    "polish_rounds": 6,
}


@dataclass
class QcqpProblem:
    K: int
    h: float
    p0: np.ndarray
    v0: np.ndarray
    Qp: np.ndarray                 # (3K, 3K) objective curvature on positions
    q: np.ndarray                  # (3K,) objective linear term on positions
    halfspaces: list               # per stage: [(a, b)]
    balls: list                    # per stage: [(center, radius)]
    v_max: float
    a_max: float
    warm_controls: np.ndarray      # (K, 3)
    theta_v: np.ndarray | None = None
    theta_a: np.ndarray | None = None

    def to_dict(self):
        return {
            "K": self.K, "h": self.h,
            "p0": self.p0.tolist(), "v0": self.v0.tolist(),
            "Qp": self.Qp.tolist(), "q": self.q.tolist(),
            "halfspaces": [[(a.tolist(), float(b)) for a, b in st] for st in self.halfspaces],
            "balls": [[(c.tolist(), float(r)) for c, r in st] for st in self.balls],
            "v_max": self.v_max, "a_max": self.a_max,
            "warm_controls": self.warm_controls.tolist(),
        }


@dataclass
class QcqpSolution:
    controls: np.ndarray           # (K, 3)
    positions: np.ndarray          # (K, 3)
    velocities: np.ndarray         # (K, 3)
    objective: float
    status: str                    # optimal | feasible-suboptimal | fault
    iterations: int = 0
    max_violation: float = 0.0


def step_dynamics(x, u, h):
    """One exact double-integrator step: x = (p, v) -> (p', v')."""
    p, v = x
    u = np.asarray(u, dtype=float)
    return (p + h * v + 0.5 * h * h * u, v + h * u)


def rollout(p0, v0, controls, h):
    """Positions and velocities at stages 1..K from stacked controls."""
    K = len(controls)
    pos = np.empty((K, 3))
    vel = np.empty((K, 3))
    x = (np.asarray(p0, dtype=float), np.asarray(v0, dtype=float))
    for k in range(K):
        x = step_dynamics(x, controls[k], h)
        pos[k], vel[k] = x
    return pos, vel


class _Condensed:
    """Affine maps from stacked controls to stacked positions/velocities,
    with the terminal velocity equality eliminated: u = u_part + N w."""

    _null_cache = {}

    def __init__(self, prob):
        K, h = prob.K, prob.h
        self.K, self.h = K, h
        kk = np.arange(1, K + 1)
        jj = np.arange(K)
        coef = h * h * (kk[:, None] - jj[None, :] - 0.5)
        coef[jj[None, :] >= kk[:, None]] = 0.0
        self.Sp = np.kron(coef, np.eye(3))                       # (3K, 3K)
        vcoef = h * (jj[None, :] < kk[:, None]).astype(float)
        self.Sv = np.kron(vcoef, np.eye(3))
        self.p_free = (np.asarray(prob.p0)[None, :] + kk[:, None] * h * np.asarray(prob.v0)[None, :]).ravel()
        self.v_free = np.tile(np.asarray(prob.v0, dtype=float), K)
        if K not in self._null_cache:
            nk = null_space(np.ones((1, K)))
            self._null_cache[K] = np.kron(nk, np.eye(3))
        self.N = self._null_cache[K]                             # (3K, 3K-3)
        self.u_part = np.tile(-np.asarray(prob.v0, dtype=float) / (h * K), K)

    def u_of(self, w):
        return self.u_part + self.N @ w

    def w_of(self, u):
        return self.N.T @ (u.ravel() - self.u_part)

    def positions(self, u):
        return (self.Sp @ u + self.p_free).reshape(self.K, 3)


def _theta_matrix(theta):
    if theta is None:
        return np.eye(3)
    theta = np.asarray(theta, dtype=float)
    return np.diag(theta) if theta.ndim == 1 else theta


def _build_stacked(prob, cond):
    """One stacked constraint system y = A w + b with grouped projections:
    scalar rows need y >= 0, 3-row groups need ||y|| <= radius."""
    K = prob.K
    SpN = cond.Sp @ cond.N
    SvN = cond.Sv @ cond.N
    p_aff = (cond.Sp @ cond.u_part + cond.p_free).reshape(K, 3)
    v_aff = (cond.Sv @ cond.u_part + cond.v_free).reshape(K, 3)
    th_v = _theta_matrix(prob.theta_v)
    th_a = _theta_matrix(prob.theta_a)

    rows, offs = [], []
    for k in range(K):
        blk = SpN[3 * k:3 * k + 3]
        for a, b in prob.halfspaces[k]:
            rows.append(a @ blk)
            offs.append(float(a @ p_aff[k]) - b)
    n_scalar = len(rows)

    groups = []          # (radius,) per 3-row group appended after scalar rows
    for k in range(K):
        blk = SpN[3 * k:3 * k + 3]
        for c, r in prob.balls[k]:
            rows.extend(blk)
            offs.extend(p_aff[k] - c)
            groups.append(r)
    for k in range(K):
        blk = th_v @ SvN[3 * k:3 * k + 3]
        rows.extend(blk)
        offs.extend(th_v @ v_aff[k])
        groups.append(prob.v_max)
    NU = cond.N
    for k in range(K):
        blk = th_a @ NU[3 * k:3 * k + 3]
        rows.extend(blk)
        offs.extend(th_a @ cond.u_part[3 * k:3 * k + 3])
        groups.append(prob.a_max)

    A = np.array(rows) if rows else np.zeros((0, cond.N.shape[1]))
    b = np.array(offs)
    radii = np.array(groups)
    return A, b, n_scalar, radii


def _project(y, n_scalar, radii):
    out = y.copy()
    out[:n_scalar] = np.maximum(out[:n_scalar], 0.0)
    blocks = out[n_scalar:].reshape(-1, 3)
    norms = np.linalg.norm(blocks, axis=1)
    over = norms > radii
    if np.any(over):
        blocks[over] *= (radii[over] / norms[over])[:, None]
    return out


def _violation(y, n_scalar, radii):
    v = 0.0
    if n_scalar:
        v = max(v, float(-(y[:n_scalar].min())) if len(y[:n_scalar]) else 0.0)
    blocks = y[n_scalar:].reshape(-1, 3)
    if len(blocks):
        v = max(v, float((np.linalg.norm(blocks, axis=1) - radii).max()))
    return max(v, 0.0)


def solve(problem, settings=None):
    """Solve the per-agent QCQP from a feasible warm start.

    Never reports infeasible when the warm start validates: any internal
    failure degrades to the warm start (status feasible-suboptimal). A
    warm start that does not validate is a planner bug upstream and comes
    back with status "fault" and the warm start echoed.
    """
    cfg = dict(DEFAULT_SETTINGS)
    if settings:
        cfg.update(settings)
    cond = _Condensed(problem)
    H_u = cond.Sp.T @ problem.Qp @ cond.Sp
    g_u = cond.Sp.T @ (problem.Qp @ cond.p_free + problem.q)
    H = cond.N.T @ H_u @ cond.N
    g = cond.N.T @ (H_u @ cond.u_part + g_u)
    A, b, n_scalar, radii = _build_stacked(problem, cond)

    def feas(w):
        return _violation(A @ w + b, n_scalar, radii)

    def obj(w):
        return 0.5 * float(w @ H @ w) + float(g @ w)

    warm = np.asarray(problem.warm_controls, dtype=float)
    w0 = cond.w_of(warm)
    warm_gap = float(np.abs(cond.u_of(w0).reshape(problem.K, 3) - warm).max())
    if warm_gap > 1e-8 or feas(w0) > OUT_TOL:
        pos, vel = rollout(problem.p0, problem.v0, warm, problem.h)
        return QcqpSolution(
            controls=warm, positions=pos, velocities=vel,
            objective=objective_value(problem, pos), status="fault", iterations=0,
            max_violation=verify_solution(problem, warm, pos, vel),
        )

    # unconstrained shortcut: common once the fleet is settled
    cho_H = cho_factor(H + 1e-12 * np.eye(len(H)))
    w_unc = cho_solve(cho_H, -g)
    if feas(w_unc) <= FEAS_TOL:
        return _package(problem, cond, w_unc, status="optimal", iterations=0)

    rho = cfg["rho"]
    if rho is None:
        denom = float(np.einsum("ij,ij->", A, A)) or 1.0
        rho = max(float(np.trace(H)) / denom, 1e-3)
    M = cho_factor(H + rho * (A.T @ A))
    alpha = cfg["over_relax"]
    w = w0
    y = _project(A @ w + b, n_scalar, radii)
    lam = np.zeros_like(y)
    scale = 1.0 + float(np.abs(b).max()) if len(b) else 1.0
    it = 0
    for it in range(1, cfg["max_iter"] + 1):
        w = cho_solve(M, -g + rho * (A.T @ (y - lam - b)))
        yhat = A @ w + b
        y_prev = y
        y_relax = alpha * yhat + (1 - alpha) * y_prev
        y = _project(y_relax + lam, n_scalar, radii)
        lam = lam + y_relax - y
        r_prim = float(np.abs(yhat - y).max()) if len(y) else 0.0
        r_dual = rho * float(np.abs(A.T @ (y - y_prev)).max()) if len(y) else 0.0
        if r_prim < cfg["tol"] * scale and r_dual < cfg["tol"] * scale:
            break
    converged = it < cfg["max_iter"]

    candidates = [(w, converged)]
    if cfg["polish"]:
        wp = _polish(w, H, g, A, b, n_scalar, radii, cfg["polish_rounds"])
        if wp is not None:
            candidates.insert(0, (wp, True))

    best_w, best_obj, best_status = w0, obj(w0), "feasible-suboptimal"
    for wc, opt in candidates:
        wf = _safeguard(w0, wc, feas)
        jf = obj(wf)
        if jf < best_obj - 1e-12:
            direct = feas(wc) <= FEAS_TOL and np.allclose(wc, wf, atol=1e-12)
            best_w, best_obj = wf, jf
            best_status = "optimal" if (opt and direct) else "feasible-suboptimal"
    if best_status == "feasible-suboptimal" and candidates and converged:
        # warm start already optimal: ADMM found nothing better
        if abs(obj(candidates[-1][0]) - best_obj) <= 1e-9 * (1 + abs(best_obj)):
            best_status = "optimal"
    return _package(problem, cond, best_w, status=best_status, iterations=it)


def _safeguard(w0, w1, feas):
    """Largest feasible step from the feasible w0 toward w1 (the feasible
    set is convex, so feasibility along the segment is an interval)."""
    if feas(w1) <= FEAS_TOL:
        return w1
    lo, hi = 0.0, 1.0
    for _ in range(40):
        mid = (lo + hi) / 2.0
        if feas(w0 + mid * (w1 - w0)) <= FEAS_TOL:
            lo = mid
        else:
            hi = mid
    return w0 + lo * (w1 - w0)


def _polish(w, H, g, A, b, n_scalar, radii, rounds):
    """Newton-style active-set cleanup around the splitting solution.

    Scalar constraints active near zero slack become equalities; active
    balls are linearized at their current boundary normal and re-linearized
    each round. The caller safeguards the result, so a misidentified
    active set degrades gracefully instead of failing."""
    n = len(w)
    act_tol = 1e-5
    for _ in range(rounds):
        y = A @ w + b
        rows = []
        rhs = []
        if n_scalar:
            for i in np.flatnonzero(y[:n_scalar] < act_tol):
                rows.append(A[i])
                rhs.append(-b[i])
        blocks = y[n_scalar:].reshape(-1, 3)
        norms = np.linalg.norm(blocks, axis=1)
        for gi in np.flatnonzero(norms > radii - act_tol):
            nb = blocks[gi] / (norms[gi] or 1.0)
            Ag = A[n_scalar + 3 * gi: n_scalar + 3 * gi + 3]
            bg = b[n_scalar + 3 * gi: n_scalar + 3 * gi + 3]
            rows.append(nb @ Ag)
            rhs.append(radii[gi] - float(nb @ bg))
        if not rows:
            wn = np.linalg.solve(H + 1e-12 * np.eye(n), -g)
        else:
            Ae = np.array(rows)
            be = np.array(rhs)
            m = len(rows)
            KKT = np.block([[H, Ae.T], [Ae, np.zeros((m, m))]])
            try:
                sol = np.linalg.solve(KKT, np.concatenate([-g, be]))
            except np.linalg.LinAlgError:
                sol, *_ = np.linalg.lstsq(KKT, np.concatenate([-g, be]), rcond=None)
            wn = sol[:n]
        if np.linalg.norm(wn - w) <= 1e-11 * (1.0 + np.linalg.norm(w)):
            return wn
        w = wn
    return w


def objective_value(problem, positions):
    """The caller's functional at stacked plan positions."""
    p = np.asarray(positions, dtype=float).ravel()
    return 0.5 * float(p @ problem.Qp @ p) + float(problem.q @ p)


def _package(problem, cond, w, status, iterations):
    u = cond.u_of(w).reshape(problem.K, 3)
    pos, vel = rollout(problem.p0, problem.v0, u, problem.h)
    viol = verify_solution(problem, u, pos, vel)
    if status != "fault" and viol > OUT_TOL:
        status = "fault"
    return QcqpSolution(
        controls=u, positions=pos, velocities=vel,
        objective=objective_value(problem, pos), status=status,
        iterations=iterations, max_violation=viol,
    )


def verify_solution(problem, controls, positions=None, velocities=None):
    """Independent constraint evaluation: worst violation over all stages,
    recomputed from the controls alone."""
    if positions is None or velocities is None:
        positions, velocities = rollout(problem.p0, problem.v0, controls, problem.h)
    th_v = _theta_matrix(problem.theta_v)
    th_a = _theta_matrix(problem.theta_a)
    worst = float(np.linalg.norm(velocities[-1]))
    for k in range(problem.K):
        p = positions[k]
        for a, b in problem.halfspaces[k]:
            worst = max(worst, b - float(a @ p))
        for c, r in problem.balls[k]:
            worst = max(worst, float(np.linalg.norm(p - c)) - r)
        worst = max(worst, float(np.linalg.norm(th_v @ velocities[k])) - problem.v_max)
        worst = max(worst, float(np.linalg.norm(th_a @ controls[k])) - problem.a_max)
    return worst


def dump_fault(problem, path):
    """Write a reproducible problem dump next to the run artifacts."""
    with open(path, "w") as f:
        json.dump(problem.to_dict(), f, indent=1)
