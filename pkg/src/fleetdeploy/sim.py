"""Scenario execution: initial placement, the tick loop, invariant
monitors, per-tick metrics, and the newline-delimited run log.

Monitors re-check the deployed fleet from outside the planner: agent pair
distances, obstacle containment, and tree-edge length/visibility, sampled
along the exact quadratic motion arc between ticks, not just at commit
points. A monitor breach means a planner bug and aborts the run.
"""

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .constraints import r_min_buffer
from .geometry import Segment, point_free, segment_obstacle_distance, segments_clear_batch
from .plan import FleetPlanner, World, conn_ball_radius, termination_check
from .topo import opt_tree

RUNLOG_VERSION = "runlog.v1"
ARC_SAMPLES = 10                      # subintervals per tick for arc checks
TIMING_KEYS = frozenset({
    "wall_ms", "mean_solve_ms", "mean_constraint_ms", "solve_ms",
    "build_ms", "topology_ms", "total_wall_ms",
})


class PlacementError(RuntimeError):
    """The free neighborhood of the ground station cannot host the fleet."""


class MonitorBreach(RuntimeError):
    def __init__(self, tick, kind, detail):
        super().__init__(f"tick {tick}: {kind} breach: {detail}")
        self.tick = tick
        self.kind = kind
        self.detail = detail


def branch_index(tree):
    """Branch id per node: the tree builder appends each branch as a
    contiguous chain, so a new branch starts wherever a node's parent is
    not its predecessor."""
    out = {}
    branch = 0
    for n in tree.nodes[1:]:
        if n.index > 1 and n.parent_index != n.index - 1:
            branch += 1
        out[n.index] = branch
    return out


def placement_spacing(params, margin=None):
    h, v_max, a_max = params["h"], params["v_max"], params["a_max"]
    r_eff = params["r_a"] + h * h * a_max / 8.0
    if margin is None:
        margin = params["r_a"]
    return max(r_min_buffer(r_eff, h, v_max), 2.0 * params["r_a"]) + margin


def initial_placement(tree, world, params, margin=None):
    """Comb layout near the ground station: one row per tree depth along
    the deployment direction, one lane per branch across it.

    Spacing covers the pair buffer plus a margin, every slot and initial
    edge is checked against the planner's inflated obstacle sets, and any
    failure raises PlacementError (the workspace cannot host the fleet)."""
    s = placement_spacing(params, margin)
    p_g = world.p_g
    lo, hi = world.bounds
    centroid = np.mean([n.position for n in tree.nodes[1:]], axis=0)
    heading = centroid - p_g
    heading[2] = 0.0
    norm = float(np.linalg.norm(heading))
    direction = heading / norm if norm > 1e-9 else np.array([1.0, 0.0, 0.0])
    perp = np.array([-direction[1], direction[0], 0.0])

    lanes = branch_index(tree)
    slots = {}
    for n in tree.nodes[1:]:
        lane = lanes[n.index]
        lateral = (lane + 1) // 2 * (1 if lane % 2 else -1)
        slot = p_g + direction * (s * tree.depth(n.index)) + perp * (s * lateral)
        slots[n.index] = slot

    r_a = params["r_a"]
    edge_cap = min(params["d_w"], 2.0 * conn_ball_radius(params)) - 1e-6
    for i, slot in sorted(slots.items()):
        if np.any(slot < lo + r_a) or np.any(slot > hi - r_a):
            raise PlacementError(
                f"agent {i} slot {slot.tolist()} leaves the workspace; "
                "the fleet does not fit beside the ground station")
        if not point_free(slot, world.los_obstacles):
            raise PlacementError(
                f"agent {i} slot {slot.tolist()} too close to an obstacle")
    ids = sorted(slots)
    for a in ids:
        for b in ids:
            if a < b and np.linalg.norm(slots[a] - slots[b]) < s - 1e-9:
                raise PlacementError(f"agents {a} and {b} overlap in the comb")
    pos_of = lambda i: p_g if i == 0 else slots[i]
    starts, ends = [], []
    for a, b in tree.edges():
        gap = float(np.linalg.norm(pos_of(a) - pos_of(b)))
        if gap > edge_cap:
            raise PlacementError(
                f"initial edge ({a},{b}) spans {gap:.2f} m, over the {edge_cap:.2f} m cap")
        starts.append(pos_of(a))
        ends.append(pos_of(b))
    if starts and not np.all(segments_clear_batch(np.array(starts), np.array(ends),
                                                  world.los_obstacles)):
        raise PlacementError("an initial tree edge passes too close to an obstacle")
    return slots


@dataclass
class RunMetrics:
    """Per-tick traces; lengths equal the tick count."""

    tick: list = field(default_factory=list)
    t: list = field(default_factory=list)
    min_pair_dist: list = field(default_factory=list)
    min_los_obs_dist: list = field(default_factory=list)
    max_edge_dist: list = field(default_factory=list)
    mean_solve_ms: list = field(default_factory=list)
    mean_constraint_ms: list = field(default_factory=list)

    COLUMNS = ("tick", "t", "min_pair_dist", "min_los_obs_dist",
               "max_edge_dist", "mean_solve_ms", "mean_constraint_ms")

    def append(self, **row):
        for col in self.COLUMNS:
            getattr(self, col).append(row[col])

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(self.COLUMNS) + "\n")
            for i in range(len(self.tick)):
                fh.write(",".join(repr(getattr(self, c)[i]) for c in self.COLUMNS) + "\n")


class Monitors:
    """Independent invariant checks over committed states and motion arcs."""

    def __init__(self, world, edges, params):
        self.world = world
        self.edges = edges
        self.d_c = params["d_c"]
        self.two_ra = 2.0 * params["r_a"]
        self.h = params["h"]

    def _positions(self, ids, states):
        return np.array([states[i].position for i in ids])

    def _edge_points(self, pts_by_id):
        starts = np.array([pts_by_id[a] for a, _ in self.edges])
        ends = np.array([pts_by_id[b] for _, b in self.edges])
        return starts, ends

    def _check_samples(self, tick, samples, ids):
        """samples: (S, n, 3) synchronized fleet positions."""
        S, n, _ = samples.shape
        if n >= 2:
            for si in range(S):
                P = samples[si]
                diff = P[:, None, :] - P[None, :, :]
                dist = np.linalg.norm(diff, axis=2)
                np.fill_diagonal(dist, np.inf)
                worst = float(dist.min())
                if worst < self.two_ra - 1e-9:
                    a, b = np.unravel_index(int(dist.argmin()), dist.shape)
                    raise MonitorBreach(
                        tick, "separation",
                        f"agents {ids[a]} and {ids[b]} at {worst:.4f} m")
        flat = samples.reshape(-1, 3)
        for oi, obs in enumerate(self.world.obstacles):
            margins = flat @ obs.normals.T - obs.offsets
            inside = np.all(margins < -1e-9, axis=1)
            if np.any(inside):
                bad = int(np.argmax(inside))
                raise MonitorBreach(
                    tick, "obstacle",
                    f"agent {ids[bad % len(ids)]} inside obstacle {oi}")
        pts = {0: np.tile(self.world.p_g, (S, 1))}
        for col, i in enumerate(ids):
            pts[i] = samples[:, col, :]
        for a, b in self.edges:
            gaps = np.linalg.norm(pts[a] - pts[b], axis=1)
            if gaps.max() > self.d_c + 1e-9:
                raise MonitorBreach(
                    tick, "range",
                    f"edge ({a},{b}) stretched to {gaps.max():.4f} m")
        if self.world.obstacles and self.edges:
            starts = np.vstack([pts[a] for a, _ in self.edges])
            ends = np.vstack([pts[b] for _, b in self.edges])
            clear = segments_clear_batch(starts, ends, self.world.obstacles)
            if not np.all(clear):
                bad = int(np.argmax(~clear))
                a, b = self.edges[bad // S]
                raise MonitorBreach(tick, "los", f"edge ({a},{b}) lost line of sight")

    def _commit_metrics(self, states, ids):
        pos = {0: self.world.p_g}
        pos.update({i: states[i].position for i in ids})
        if len(ids) >= 2:
            P = self._positions(ids, states)
            diff = P[:, None, :] - P[None, :, :]
            dist = np.linalg.norm(diff, axis=2)
            np.fill_diagonal(dist, np.inf)
            min_pair = float(dist.min())
        else:
            min_pair = float("inf")
        edge_gaps = [float(np.linalg.norm(pos[a] - pos[b])) for a, b in self.edges]
        max_edge = max(edge_gaps) if edge_gaps else 0.0
        min_los = float("inf")
        for a, b in self.edges:
            seg = Segment(pos[a], pos[b])
            for obs in self.world.obstacles:
                min_los = min(min_los, segment_obstacle_distance(seg, obs))
        return {"min_pair_dist": min_pair, "min_los_obs_dist": min_los,
                "max_edge_dist": max_edge}

    def static_check(self, tick, states):
        ids = sorted(states)
        self._check_samples(tick, self._positions(ids, states)[None, :, :], ids)
        return self._commit_metrics(states, ids)

    def arc_check(self, tick, prev_pos, prev_vel, controls, states):
        """Check the exact quadratic arcs from the previous commit to this
        one, subsampled ARC_SAMPLES times, endpoints included."""
        ids = sorted(states)
        P0 = np.array([prev_pos[i] for i in ids])
        V0 = np.array([prev_vel[i] for i in ids])
        U = np.array([controls[i] for i in ids])
        ts = np.linspace(0.0, self.h, ARC_SAMPLES + 1)[:, None, None]
        samples = P0[None] + V0[None] * ts + 0.5 * U[None] * ts * ts
        end_err = np.abs(samples[-1] - self._positions(ids, states)).max()
        if end_err > 1e-9:
            raise MonitorBreach(tick, "dynamics",
                                f"arc endpoint off by {end_err:.2e} m")
        self._check_samples(tick, samples, ids)
        return self._commit_metrics(states, ids)


def _strip_timing(doc):
    if isinstance(doc, dict):
        return {k: _strip_timing(v) for k, v in doc.items() if k not in TIMING_KEYS}
    if isinstance(doc, list):
        return [_strip_timing(v) for v in doc]
    return doc


def runlog_hash(lines):
    """Digest of the run's deterministic content: wall-clock timings are
    stripped, everything else is hashed in canonical JSON form."""
    digest = hashlib.sha256()
    for line in lines:
        digest.update(json.dumps(_strip_timing(line), sort_keys=True).encode())
        digest.update(b"\n")
    return digest.hexdigest()


def write_runlog(lines, path):
    with open(path, "w") as fh:
        for line in lines:
            fh.write(json.dumps(line, sort_keys=True) + "\n")


@dataclass
class RunResult:
    terminated: bool
    reason: str
    ticks: int
    sim_time: float
    metrics: RunMetrics
    runlog: list
    log_hash: str
    tree: object
    searcher_paths: list
    planner: object
    states: dict
    relay_count: int
    hop_count: int
    topology_ms: float
    total_wall_ms: float
    searcher_mean_speed: float
    los_soft_warnings: int


def _vec(a):
    return [float(x) for x in a]


def _jnum(x):
    """Strict-JSON number: infinities map to null (browser JSON.parse
    rejects Infinity)."""
    x = float(x)
    return x if np.isfinite(x) else None


def run(config, seed=None, tick_budget=None, command_source=None,
        frame_sink=None, stop_on_arrival=True):
    """Execute a scenario end to end.

    ``command_source(tick)`` may inject steering commands at tick
    boundaries; each returned entry is ``{"kind": "move_target", "target":
    id, "position": [x, y, z]}``. Applied commands are part of the run log,
    so a recorded script replays to an identical hash. A command may carry
    a ``_reply`` callable (not recorded) that receives the outcome entry.
    ``frame_sink`` gets one frame dict per tick for live viewers.
    ``stop_on_arrival=False`` keeps ticking until the budget even once all
    searchers are parked, so live viewers can keep steering targets.

    Returns RunResult; raises MonitorBreach on any invariant violation.
    """
    params = dict(config.params)
    if seed is not None:
        params["seed"] = int(seed)
    if tick_budget is None:
        tick_budget = int(params.get("tick_budget", 1000))
    h = params["h"]
    wall0 = time.perf_counter()

    topo0 = time.perf_counter()
    tree, searcher_paths = opt_tree(
        config.p_g, config.targets, config.obstacles,
        {**params, "bounds": config.bounds})
    topology_ms = (time.perf_counter() - topo0) * 1e3

    world = World.from_params(config.obstacles, config.p_g, config.bounds, params)
    slots = initial_placement(tree, world, params)
    planner = FleetPlanner(tree, searcher_paths, world, params)
    states = planner.initial_states(slots)
    monitors = Monitors(world, planner.edges, params)
    metrics = RunMetrics()

    lines = [{
        "type": "header", "schema_version": RUNLOG_VERSION,
        "scenario": config.to_dict(), "seed": params.get("seed", 0),
        "tick_budget": tick_budget,
    }, {
        "type": "tree", "topology_ms": topology_ms,
        **tree.to_dict(searcher_paths),
    }, {
        "type": "placement",
        "slots": {str(i): _vec(p) for i, p in sorted(slots.items())},
    }]

    monitor_values = monitors.static_check(0, states)
    searcher_ids = [i for i, r in planner.roles.items() if r.kind == "searcher"]
    arrived = {}
    speed_sums = {i: 0.0 for i in searcher_ids}
    los_soft = 0
    d_m = params["d_m"]
    reason = "tick_budget"
    tick = 0

    try:
        for tick in range(1, tick_budget + 1):
            applied = []
            if command_source is not None:
                for cmd in command_source(tick):
                    ok, why = planner.move_target(
                        int(cmd["target"]), np.asarray(cmd["position"], float), states)
                    entry = {"kind": "move_target",
                             "target": int(cmd["target"]),
                             "position": _vec(cmd["position"]),
                             "applied": bool(ok), "reason": why}
                    applied.append(entry)
                    if ok:
                        arrived.pop(int(cmd["target"]), None)
                    reply = cmd.get("_reply")
                    if reply is not None:
                        reply({**entry, "tick": tick})
            prev_pos = {i: st.position.copy() for i, st in states.items()}
            prev_vel = {i: st.velocity.copy() for i, st in states.items()}
            plans = planner.tick(states)
            controls = {i: plans[i].controls[0] for i in plans}
            for i, plan in plans.items():
                states[i].commit(plan)
            monitor_values = monitors.arc_check(tick, prev_pos, prev_vel, controls, states)
            if monitor_values["min_los_obs_dist"] < d_m:
                los_soft += 1
            for i in searcher_ids:
                role = planner.roles[i]
                tid = role.target_id
                if tid not in arrived:
                    speed_sums[i] += float(np.linalg.norm(states[i].velocity))
                    if (np.linalg.norm(states[i].position - role.goal) <= 0.1
                            and np.linalg.norm(states[i].velocity) <= 0.05):
                        arrived[tid] = tick
            solve_ms = [plans[i].solve_ms for i in sorted(plans)]
            build_ms = [plans[i].build_ms for i in sorted(plans)]
            row = {
                "tick": tick, "t": tick * h,
                "mean_solve_ms": float(np.mean(solve_ms)),
                "mean_constraint_ms": float(np.mean(build_ms)),
                **monitor_values,
            }
            metrics.append(**row)
            lines.append({
                "type": "tick", "tick": tick, "t": tick * h,
                "agents": {str(i): {"p": _vec(states[i].position),
                                    "v": _vec(states[i].velocity),
                                    "u": _vec(controls[i])}
                           for i in sorted(states)},
                "commands": applied,
                "monitors": {k: _jnum(monitor_values[k]) for k in sorted(monitor_values)},
                "mean_solve_ms": row["mean_solve_ms"],
                "mean_constraint_ms": row["mean_constraint_ms"],
            })
            if frame_sink is not None:
                frame_sink(build_frame(tick, tick * h, planner, states,
                                       monitor_values))
            if stop_on_arrival and termination_check(planner.roles, states):
                reason = "terminated"
                break
    except MonitorBreach as breach:
        lines.append({"type": "end", "reason": "breach", "ticks": breach.tick,
                      "detail": str(breach)})
        raise

    lines.append({"type": "end", "reason": reason, "ticks": tick,
                  "sim_time": tick * h,
                  "total_wall_ms": (time.perf_counter() - wall0) * 1e3})

    mean_speeds = []
    for i in searcher_ids:
        tid = planner.roles[i].target_id
        upto = arrived.get(tid, tick)
        if upto > 0:
            mean_speeds.append(speed_sums[i] / upto)
    return RunResult(
        terminated=(reason == "terminated"), reason=reason, ticks=tick,
        sim_time=tick * h, metrics=metrics, runlog=lines,
        log_hash=runlog_hash(lines), tree=tree, searcher_paths=searcher_paths,
        planner=planner, states=states,
        relay_count=tree.relay_count(),
        hop_count=sum(tree.depth(idx) for idx in tree.target_node_indices.values()),
        topology_ms=topology_ms,
        total_wall_ms=(time.perf_counter() - wall0) * 1e3,
        searcher_mean_speed=float(np.mean(mean_speeds)) if mean_speeds else 0.0,
        los_soft_warnings=los_soft,
    )


def build_frame(tick, t, planner, states, monitor_values):
    """One ``frame.v1`` dict for live viewers."""
    world = planner.world
    pos = {0: world.p_g}
    pos.update({i: states[i].position for i in sorted(states)})
    edges = []
    for a, b in planner.edges:
        seg = Segment(pos[a], pos[b])
        margin = min((segment_obstacle_distance(seg, o) for o in world.obstacles),
                     default=float("inf"))
        edges.append({"a": a, "b": b,
                      "length": float(np.linalg.norm(pos[a] - pos[b])),
                      "los_margin": _jnum(margin)})
    agents = []
    for i in sorted(states):
        role = planner.roles[i]
        agents.append({"id": i, "kind": role.kind,
                       "p": _vec(states[i].position),
                       "v": _vec(states[i].velocity),
                       "target": role.target_id})
    targets = [{"id": r.target_id, "p": _vec(r.goal)}
               for r in planner.roles.values() if r.kind == "searcher"]
    targets.sort(key=lambda d: d["id"])
    return {
        "schema_version": "frame.v1",
        "tick": tick, "t": t,
        "p_g": _vec(world.p_g),
        "agents": agents,
        "edges": edges,
        "targets": targets,
        "monitors": {k: _jnum(monitor_values[k]) for k in sorted(monitor_values)},
    }
