"""Lock-step fleet planning: one MPC tick for every deployed agent.

Tick phases (barrier-synchronized, deterministic agent order):

1. every agent shifts its previous plan and broadcasts the extended
   predetermined trajectory (current state, K shifted points, tail: a
   searcher's intermediate target, or the last point again);
2. the designated builder of each tree edge (the parent; the child for
   root edges, since the ground station does not compute) derives the
   shared ball centers and LOS planes and sends them to the edge;
3. every agent assembles its constraint set, checks that the shifted plan
   is a feasible witness, and solves its QCQP;
4. the caller commits stage one of every plan simultaneously.

The sampled-time constraints are padded so they certify the continuous
motion between samples, not just the stage points:

- separation halfspaces and obstacle corridors use an agent radius padded
  by the worst-case quadratic-arc sag h^2*a_max/8;
- the corridor planes of adjacent chords are both applied to the shared
  plan point (plus a stage-0 corridor from the current state), so every
  executed and planned chord lies inside one certified polyhedron;
- connectivity balls use radius d_c/2 - h^2*a_max/4: both endpoints of an
  edge inside one shared ball keeps the pair within d_c along the arc;
- LOS zones are built against obstacles inflated by d_m plus half a step
  of worst-case motion, so sight lines keep >= d_m clearance mid-step.

The recursive-feasibility window for the ball radius requires
d_w + h*v_max + h^2*a_max <= d_c, validated at construction.
"""

import time
from dataclasses import dataclass

import numpy as np

from .constraints import (
    ConstraintSet,
    ExtendedPredeterminedTrajectory,
    RecursiveFeasibilityFault,
    build_corridor,
    build_edge_bundle,
    mbvc_halfspace,
    r_min_buffer,
    update_intermediate_target,
)
from .geometry import Segment, hulls_disjoint, point_free, segment_clear
from .qcqp import QcqpProblem, dump_fault, solve
from .topo import Anchor, compare_paths, mini_edge_rrt_star

WITNESS_TOL = 1e-7
MBVC_CULL_SLACK = 1.0


class SynchronizationFault(RuntimeError):
    """An agent entered its solve phase without the full lock-step inbox."""


def check_window(params):
    """The ball-radius feasibility window: d_w small enough that a shifted
    plan is always inside the shared connectivity balls."""
    d_c, d_w = params["d_c"], params["d_w"]
    h, v_max, a_max = params["h"], params["v_max"], params["a_max"]
    need = d_w + h * v_max + h * h * a_max
    if need > d_c + 1e-9:
        raise ValueError(
            f"d_w={d_w} too close to d_c={d_c}: "
            f"need d_w + h*v_max + h^2*a_max = {need:.4f} <= d_c"
        )


def conn_ball_radius(params):
    return params["d_c"] / 2.0 - params["h"] ** 2 * params["a_max"] / 4.0


@dataclass
class World:
    """Planner-facing world model: the true obstacle hulls plus the two
    inflation levels the constraint builders work against."""

    obstacles: list
    corridor_obstacles: list      # inflated by r_a + arc sag
    los_obstacles: list           # inflated by d_m + half-step sweep
    p_g: np.ndarray
    bounds: np.ndarray            # (2, 3) sampling box

    @classmethod
    def from_params(cls, obstacles, p_g, bounds, params):
        h, a_max, v_max = params["h"], params["a_max"], params["v_max"]
        r_pad = params["r_a"] + h * h * a_max / 8.0
        m_pad = params["d_m"] + h * v_max / 2.0 + h * h * a_max / 8.0
        return cls(
            obstacles=list(obstacles),
            corridor_obstacles=[o.inflate(r_pad) for o in obstacles],
            los_obstacles=[o.inflate(m_pad) for o in obstacles],
            p_g=np.asarray(p_g, dtype=float),
            bounds=np.asarray(bounds, dtype=float),
        )


@dataclass
class AgentRole:
    """One agent's place in the deployment tree."""

    agent_id: int
    kind: str                     # "searcher" | "connector"
    parent: int
    children: list
    slot: np.ndarray | None = None        # synthesized tree position
    target_id: int | None = None
    waypoints: np.ndarray | None = None   # reference path, root first

    @property
    def goal(self):
        return None if self.waypoints is None else self.waypoints[-1]


def roles_from_tree(tree, searcher_paths):
    """Partition tree nodes into searcher/connector roles; node index is
    the agent id, node 0 is the static ground station."""
    children = {n.index: [] for n in tree.nodes}
    for n in tree.nodes:
        if n.parent_index is not None:
            children[n.parent_index].append(n.index)
    path_at = {tree.target_node_indices[p.target_id]: p for p in searcher_paths}
    roles = {}
    for n in tree.nodes[1:]:
        path = path_at.get(n.index)
        roles[n.index] = AgentRole(
            agent_id=n.index,
            kind="connector" if path is None else "searcher",
            parent=n.parent_index,
            children=sorted(children[n.index]),
            slot=np.asarray(n.position, dtype=float).copy(),
            target_id=None if path is None else path.target_id,
            waypoints=None if path is None else np.array(path.waypoints, dtype=float),
        )
    return roles


@dataclass
class PlanState:
    """One agent's committed state and current plan."""

    position: np.ndarray
    velocity: np.ndarray
    controls: np.ndarray          # (K, 3)
    positions: np.ndarray         # (K, 3) plan stages 1..K
    velocities: np.ndarray
    waypoint_index: int = 0

    @classmethod
    def hover(cls, position, K):
        position = np.asarray(position, dtype=float)
        return cls(
            position=position.copy(), velocity=np.zeros(3),
            controls=np.zeros((K, 3)),
            positions=np.tile(position, (K, 1)),
            velocities=np.zeros((K, 3)),
        )

    def commit(self, plan):
        self.controls = plan.controls
        self.positions = plan.positions
        self.velocities = plan.velocities
        self.position = plan.positions[0].copy()
        self.velocity = plan.velocities[0].copy()


@dataclass
class TickMessage:
    """Lock-step broadcast: phase-1 messages carry the extended
    predetermined trajectory, phase-2 messages a shared edge bundle."""

    sender: int
    tick: int
    ept: np.ndarray | None = None          # (K+2, 3)
    bundle: object = None                  # EdgeBundle


@dataclass
class QuadraticObjective:
    """1/2 p'Qp p + q'p + const over stacked plan positions."""

    Qp: np.ndarray
    q: np.ndarray
    const: float

    def value(self, positions):
        p = np.asarray(positions, dtype=float).ravel()
        return 0.5 * float(p @ self.Qp @ p) + float(self.q @ p) + self.const


def searcher_objective(K, target, q_terminal=10.0, q_smooth=1.0):
    """Terminal attraction to the current target plus step smoothing:
    q_terminal/2 ||p_K - g||^2 + q_smooth/2 sum_k ||p_{k+1} - p_k||^2."""
    target = np.asarray(target, dtype=float)
    Qp = np.zeros((3 * K, 3 * K))
    eye = np.eye(3)
    for k in range(K - 1):
        a, b = 3 * k, 3 * (k + 1)
        Qp[a:a + 3, a:a + 3] += q_smooth * eye
        Qp[b:b + 3, b:b + 3] += q_smooth * eye
        Qp[a:a + 3, b:b + 3] -= q_smooth * eye
        Qp[b:b + 3, a:a + 3] -= q_smooth * eye
    t = 3 * (K - 1)
    Qp[t:, t:] += q_terminal * eye
    q = np.zeros(3 * K)
    q[t:] = -q_terminal * target
    return QuadraticObjective(Qp=Qp, q=q, const=0.5 * q_terminal * float(target @ target))


def track_objective(tracked):
    """Stage-wise tracking: 1/2 sum_k ||p_k - tracked_k||^2."""
    tracked = np.asarray(tracked, dtype=float)
    K = len(tracked)
    return QuadraticObjective(
        Qp=np.eye(3 * K), q=-tracked.ravel(),
        const=0.5 * float(np.sum(tracked * tracked)),
    )


def neighbor_mean(child_points, parent_points, alpha_c=3.0, alpha_p=1.0):
    """Weighted mean of the neighbors' predetermined points, stage by
    stage; a single neighbor is tracked exactly (weights cancel)."""
    if not child_points and not parent_points:
        raise ValueError("connector with no neighbors")
    total = 0.0
    for pts in child_points:
        total = total + alpha_c * np.asarray(pts, dtype=float)
    for pts in parent_points:
        total = total + alpha_p * np.asarray(pts, dtype=float)
    return total / (alpha_c * len(child_points) + alpha_p * len(parent_points))


def connector_objective(child_points, parent_points, alpha_c=3.0, alpha_p=1.0):
    """Track the weighted mean of the neighbors' predetermined points."""
    return track_objective(neighbor_mean(child_points, parent_points,
                                         alpha_c, alpha_p))


def shift_plan(positions):
    """Next tick's predetermined trajectory: drop the first plan point,
    duplicate the last."""
    positions = np.asarray(positions, dtype=float)
    return np.vstack([positions[1:], positions[-1:]])


def shift_controls(controls):
    """Controls that reproduce the shifted plan from the committed state;
    exact because every plan ends at zero velocity, so hovering extends it."""
    controls = np.asarray(controls, dtype=float)
    return np.vstack([controls[1:], np.zeros((1, 3))])


def termination_check(roles, states, tol=0.1, tol_v=0.05):
    """True when every searcher rests within tol of its final target with
    speed below tol_v."""
    for i in sorted(roles):
        role = roles[i]
        if role.kind != "searcher":
            continue
        st = states[i]
        if float(np.linalg.norm(st.position - role.goal)) > tol:
            return False
        if float(np.linalg.norm(st.velocity)) > tol_v:
            return False
    return True


@dataclass
class PlannedTrajectory:
    agent: int
    controls: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    objective: float
    status: str
    iterations: int
    witness_violation: float
    constraint_counts: dict
    build_ms: float
    solve_ms: float


def plan_tick(role, state, inbox, roles, world, params, solver_settings=None,
              tick=0):
    """Phase 3 for one agent: assemble constraints from the inbox, verify
    the shifted-plan witness, solve, and return the planned trajectory.

    The inbox must hold predetermined trajectories for the whole roster
    (the ground station included) and bundles for every incident edge;
    anything missing is a lock-step protocol violation and aborts the tick.
    """
    t0 = time.perf_counter()
    K = int(params["K"])
    h = float(params["h"])
    a_max = float(params["a_max"])

    epts, bundles = {}, {}
    for msg in inbox:
        if msg.ept is not None:
            epts[msg.sender] = msg.ept
        if msg.bundle is not None:
            bundles[msg.bundle.edge] = msg.bundle
    missing = sorted((set(roles) | {0}) - set(epts))
    if missing:
        raise SynchronizationFault(
            f"agent {role.agent_id} tick {tick}: missing trajectories {missing}"
        )
    my_edges = [(role.parent, role.agent_id)]
    my_edges += [(role.agent_id, c) for c in sorted(role.children)]
    absent = [e for e in my_edges if e not in bundles]
    if absent:
        raise SynchronizationFault(
            f"agent {role.agent_id} tick {tick}: missing edge bundles {absent}"
        )

    ept = epts[role.agent_id]
    cs = ConstraintSet(K=K)

    # separation halfspaces against every other agent, skipping pairs no
    # admissible pair of plans could bring inside the buffer
    r_pad = params["r_a"] + h * h * a_max / 8.0
    buffer = r_min_buffer(r_pad, h, params["v_max"])
    for j in sorted(roles):
        if j == role.agent_id:
            continue
        other = epts[j]
        for k in range(1, K + 1):
            dev = h * h * a_max * k * k
            if float(np.linalg.norm(ept[k] - other[k])) > buffer + 2.0 * dev + MBVC_CULL_SLACK:
                continue
            hs = mbvc_halfspace(ept[k], other[k], r_pad, h, params["v_max"])
            cs.add_halfspace(k, hs, "pair")

    # obstacle corridor over the full extended trajectory (state, K shifted
    # points, tail); stage k takes the planes of both adjacent chords
    corridor = build_corridor(
        ExtendedPredeterminedTrajectory(positions=ept, owner=role.agent_id, tick=tick),
        world.corridor_obstacles, h=h, a_max=a_max,
    )
    for k in range(1, K + 1):
        for hs in corridor[k - 1] + corridor[k]:
            cs.add_halfspace(k, hs, "obs")

    radius = conn_ball_radius(params)
    for edge in my_edges:
        bundle = bundles[edge]
        for k in range(1, K + 1):
            cs.add_ball(k, bundle.centers[k - 1], radius, "conn")
            for hs in bundle.los[k - 1]:
                cs.add_halfspace(k, hs, "los")

    if role.kind == "searcher":
        objective = searcher_objective(
            K, ept[K + 1], params.get("q_terminal", 10.0), params.get("q_smooth", 1.0))
    else:
        child_pts = [epts[c][1:K + 1] for c in sorted(role.children)]
        parent_pts = [epts[role.parent][1:K + 1]]
        tracked = neighbor_mean(
            child_pts, parent_pts, params.get("alpha_c", 3.0), params.get("alpha_p", 1.0))
        # The mean can land behind an obstacle neither tree edge can round:
        # the chain goes taut over a corner and every endpoint wedges on the
        # shared sight-line plane. When the straight pull is blocked, retreat
        # to the synthesized relay slot, which the tree validated against
        # both edges with clearance.
        chord = np.vstack([state.position, tracked[-1]])
        if not all(hulls_disjoint(chord, o.vertices) for o in world.los_obstacles):
            tracked = np.tile(role.slot, (K, 1))
        objective = track_objective(tracked)

    warm = shift_controls(state.controls)
    witness = cs.max_violation(ept[1:K + 1])
    if witness > WITNESS_TOL:
        detail = ", ".join(
            f"{tag}={v:.3e}@k{stage}"
            for tag, (v, stage) in sorted(cs.violation_by_tag(ept[1:K + 1]).items()))
        raise RecursiveFeasibilityFault(
            f"agent {role.agent_id} tick {tick}: shifted plan violates its "
            f"own constraint set by {witness:.3e} ({detail})"
        )

    problem = QcqpProblem(
        K=K, h=h, p0=state.position, v0=state.velocity,
        Qp=objective.Qp, q=objective.q,
        halfspaces=[[(a, b) for a, b, _ in st] for st in cs.halfspaces],
        balls=[[(c, r) for c, r, _ in st] for st in cs.balls],
        v_max=params["v_max"], a_max=a_max, warm_controls=warm,
    )
    build_ms = (time.perf_counter() - t0) * 1e3

    t1 = time.perf_counter()
    solution = solve(problem, solver_settings)
    solve_ms = (time.perf_counter() - t1) * 1e3
    if solution.status == "fault":
        # unreachable once the witness validates; keep the run alive on the
        # witness plan and leave a reproducible dump
        dump_dir = params.get("fault_dump_dir")
        if dump_dir:
            dump_fault(problem, f"{dump_dir}/fault_t{tick}_a{role.agent_id}.json")

    return PlannedTrajectory(
        agent=role.agent_id,
        controls=solution.controls,
        positions=solution.positions,
        velocities=solution.velocities,
        objective=solution.objective + objective.const,
        status=solution.status,
        iterations=solution.iterations,
        witness_violation=witness,
        constraint_counts=cs.counts(),
        build_ms=build_ms,
        solve_ms=solve_ms,
    )


class FleetPlanner:
    """Tick orchestration for the whole fleet.

    Owns roles and reference paths; the caller owns agent states and
    commits plans between ticks. Solves run in sorted agent order but each
    depends only on phase-committed inputs, so any order gives identical
    results.
    """

    def __init__(self, tree, searcher_paths, world, params, solver_settings=None):
        check_window(params)
        self.roles = roles_from_tree(tree, searcher_paths)
        self.world = world
        self.params = params
        self.solver_settings = solver_settings
        self.K = int(params["K"])
        self.edges = sorted((n.parent_index, n.index) for n in tree.nodes[1:])
        self.tick_index = 0
        self.moves = 0

    def initial_states(self, placements):
        return {i: PlanState.hover(placements[i], self.K) for i in sorted(self.roles)}

    def _broadcast(self, states):
        tick = self.tick_index
        messages = [TickMessage(sender=0, tick=tick,
                                ept=np.tile(self.world.p_g, (self.K + 2, 1)))]
        for i in sorted(self.roles):
            role, st = self.roles[i], states[i]
            shifted = shift_plan(st.positions)
            if role.kind == "searcher":
                # Gate the pull on the larger (visibility) inflation: a tail
                # the agent could reach but its tree edges could not follow
                # drags the pair into a pocket and stalls the whole branch.
                tail, st.waypoint_index = update_intermediate_target(
                    role.waypoints, st.waypoint_index, shifted[-1],
                    self.world.los_obstacles)
            else:
                tail = shifted[-1]
            ept = np.vstack([st.position[None, :], shifted, tail[None, :]])
            messages.append(TickMessage(sender=i, tick=tick, ept=ept))
        return messages

    def _edge_bundles(self, epts):
        tick = self.tick_index
        messages = []
        costs = {}
        for a, b in self.edges:
            builder = a if a != 0 else b
            t0 = time.perf_counter()
            bundle = build_edge_bundle(
                edge=(a, b),
                ept_i=ExtendedPredeterminedTrajectory(epts[a][1:], owner=a, tick=tick),
                ept_j=ExtendedPredeterminedTrajectory(epts[b][1:], owner=b, tick=tick),
                obstacles_dm=self.world.los_obstacles,
                d_w=self.params["d_w"], d_c=self.params["d_c"],
                h=self.params["h"], a_max=self.params["a_max"],
            )
            costs[builder] = costs.get(builder, 0.0) + (time.perf_counter() - t0) * 1e3
            messages.append(TickMessage(sender=builder, tick=tick, bundle=bundle))
        return messages, costs

    def tick(self, states):
        """Run one full four-phase tick; returns {agent: PlannedTrajectory}.
        The caller commits the plans (states[i].commit(plans[i]))."""
        phase1 = self._broadcast(states)
        epts = {m.sender: m.ept for m in phase1}
        phase2, bundle_ms = self._edge_bundles(epts)
        inbox = phase1 + phase2
        plans = {}
        for i in sorted(self.roles):
            plans[i] = plan_tick(
                self.roles[i], states[i], inbox, self.roles, self.world,
                self.params, self.solver_settings, tick=self.tick_index)
        for i, ms in bundle_ms.items():
            plans[i].build_ms += ms
        self.tick_index += 1
        return plans

    def move_target(self, target_id, new_position, states):
        """Re-route one searcher to a moved target; returns (ok, reason).

        Straight-line extension when the segment from the old target clears
        both planner obstacle inflations; otherwise a sampled branch search
        anchored on the searcher's still-ahead waypoints, preserving the
        path prefix so the current intermediate target stays valid.
        """
        role = next((r for r in self.roles.values() if r.target_id == target_id), None)
        if role is None:
            return False, f"no searcher assigned to target {target_id}"
        new = np.asarray(new_position, dtype=float)
        lo, hi = self.world.bounds
        if np.any(new < lo) or np.any(new > hi):
            return False, "target outside the workspace"
        blocked = self.world.corridor_obstacles + self.world.los_obstacles
        if not point_free(new, blocked):
            return False, "target inside obstacle clearance"

        cap = self.params.get("plan_edge_cap", self.params["d_w"])
        old = role.waypoints[-1]
        seg = Segment(old, new)
        if (float(np.linalg.norm(new - old)) <= cap
                and segment_clear(seg, self.world.corridor_obstacles)
                and segment_clear(seg, self.world.los_obstacles)):
            role.waypoints = np.vstack([role.waypoints, new[None, :]])
            return True, ""

        start = states[role.agent_id].waypoint_index
        ahead = role.waypoints[start:]
        along = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(ahead, axis=0), axis=1))])
        anchors = [Anchor(node_index=start + i, position=ahead[i], root_length=along[i])
                   for i in range(len(ahead))]
        self.moves += 1
        clearance = max(self.params["r_a"], self.params["d_m"]) + self.params["h"] * self.params["v_max"]
        found = mini_edge_rrt_star(
            new, anchors, self.world.obstacles, cap,
            budget=self.params.get("reroute_budget", 0.5),
            rng_seed=[int(self.params.get("seed", 0)), target_id, self.moves],
            bounds=self.world.bounds,
            node_clearance=clearance, los_clearance=clearance,
        )
        best = None
        for path in found.values():
            best = compare_paths(path, best)
        if best is None:
            return False, "no route to the moved target"
        role.waypoints = np.vstack([role.waypoints[:best.anchor_index + 1],
                                    best.waypoints[1:]])
        return True, ""
