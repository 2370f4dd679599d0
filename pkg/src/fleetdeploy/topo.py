"""Relay-minimal spanning tree construction.

Grows one branch per iteration with a minimum-edge variant of RRT*: edge
count dominates the cost (large additive penalty per edge), samples stay
within communication range of the tree, and each remaining target keeps its
best-ever candidate branch between iterations. A visibility-graph MST
baseline is provided for comparison runs.

Budgets are given in seconds but executed as a deterministic iteration
count (ITERS_PER_SECOND), so identical seeds give identical trees on any
machine. When several targets are searched in one iteration the per-call
budget is the wall deadline divided across the concurrent searches, which
is what a fixed per-iteration deadline on limited cores yields; total wall
time then grows linearly with target count.
"""

import heapq
import json
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra, minimum_spanning_tree

from .geometry import Segment, point_free, segment_clear, segments_clear_batch

ITERS_PER_SECOND = 2000
MIN_ITERS = 48
MAX_CONCEIVABLE_EDGES = 1024


class UnreachableTargetError(RuntimeError):
    """No branch to one or more targets within the retry budget."""


@dataclass
class TreeNode:
    index: int
    position: np.ndarray
    parent_index: int | None


@dataclass
class SpanTree:
    """Embedded spanning tree: node 0 is the ground station, every other
    node is one agent to deploy."""

    nodes: list
    target_node_indices: dict

    @property
    def agent_count(self):
        return len(self.nodes) - 1

    def depth(self, index):
        d = 0
        while self.nodes[index].parent_index is not None:
            index = self.nodes[index].parent_index
            d += 1
        return d

    def path_to_root(self, index):
        """Node indices from the given node up to and including the root."""
        chain = [index]
        while self.nodes[chain[-1]].parent_index is not None:
            chain.append(self.nodes[chain[-1]].parent_index)
        return chain

    def edges(self):
        return [(n.parent_index, n.index) for n in self.nodes if n.parent_index is not None]

    def relay_count(self):
        searcher_nodes = set(self.target_node_indices.values())
        return self.agent_count - len(searcher_nodes)

    def validate(self, obstacles, d_c):
        assert self.nodes[0].parent_index is None and self.nodes[0].index == 0
        seen = {0}
        for n in self.nodes[1:]:
            assert n.parent_index in seen, f"node {n.index} parent out of order"
            seen.add(n.index)
            parent = self.nodes[n.parent_index]
            length = float(np.linalg.norm(n.position - parent.position))
            assert length <= d_c + 1e-9, f"edge {n.index} length {length} > {d_c}"
            assert segment_clear(Segment(parent.position, n.position), obstacles), \
                f"edge {n.index} blocked"
        for m, idx in self.target_node_indices.items():
            assert 0 < idx < len(self.nodes), f"target {m} node missing"

    def to_dict(self, searcher_paths=None):
        doc = {
            "schema_version": "tree.v1",
            "nodes": [
                {
                    "index": n.index,
                    "position": [float(c) for c in n.position],
                    "parent": n.parent_index,
                }
                for n in self.nodes
            ],
            "targets": {str(m): idx for m, idx in self.target_node_indices.items()},
        }
        if searcher_paths is not None:
            doc["paths"] = [
                {
                    "target": p.target_id,
                    "waypoints": [[float(c) for c in w] for w in p.waypoints],
                    "edge_count": int(p.edge_count),
                    "root_cost": float(p.root_cost),
                }
                for p in searcher_paths
            ]
        return doc

    def to_json(self, searcher_paths=None):
        return json.dumps(self.to_dict(searcher_paths), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, doc):
        nodes = [
            TreeNode(d["index"], np.array(d["position"], dtype=float), d["parent"])
            for d in sorted(doc["nodes"], key=lambda d: d["index"])
        ]
        targets = {int(m): idx for m, idx in doc["targets"].items()}
        return cls(nodes=nodes, target_node_indices=targets)


@dataclass
class Path:
    """Branch from an anchor node to a target (or root to target once the
    tree is assembled)."""

    waypoints: np.ndarray          # (n, 3), anchor first
    edge_count: int
    root_cost: float
    anchor_index: int = -1
    target_id: int = -1


def compare_paths(candidate, incumbent):
    """Fewer edges wins; equal edges, smaller root_cost wins; None loses."""
    if candidate is None:
        return incumbent
    if incumbent is None:
        return candidate
    ck = (candidate.edge_count, candidate.root_cost)
    ik = (incumbent.edge_count, incumbent.root_cost)
    return candidate if ck < ik else incumbent


@dataclass
class Anchor:
    """Connection point a new branch may attach to: an existing tree node
    plus its accumulated path length from the root."""

    node_index: int
    position: np.ndarray
    root_length: float


def mini_edge_rrt_star(target, anchors, obstacles, d_c, budget, rng_seed,
                       bounds, node_clearance=0.0, los_clearance=0.0,
                       goal_bias=0.1):
    """Minimum-edge RRT* rooted at the target, connecting back to anchors.

    Cost is edge_count * P + length with P large enough that edge count
    always dominates; steering is capped at d_c so every sample stays within
    communication range of the tree. Returns {anchor node_index: Path} for
    each anchor reached; the Path runs anchor -> target. Deterministic for
    a fixed rng_seed.
    """
    target = np.asarray(target, dtype=float)
    lo, hi = np.asarray(bounds[0], dtype=float), np.asarray(bounds[1], dtype=float)
    diag = float(np.linalg.norm(hi - lo))
    penalty = 10.0 * diag * MAX_CONCEIVABLE_EDGES
    rng = np.random.default_rng(rng_seed)
    iters = max(MIN_ITERS, int(budget * ITERS_PER_SECOND))

    cap = iters + 1
    pos = np.empty((cap, 3))
    parent = np.full(cap, -1, dtype=np.int64)
    cost_len = np.zeros(cap)
    cost_edges = np.zeros(cap, dtype=np.int64)
    children = [[] for _ in range(cap)]
    pos[0] = target
    n = 1

    anchor_pos = np.array([a.position for a in anchors])
    # (node, anchor) pairs known to be connectable; costs resolved at the end
    connections = [set() for _ in anchors]
    for ai in range(len(anchors)):
        d = float(np.linalg.norm(target - anchor_pos[ai]))
        if d <= d_c and segment_clear(Segment(target, anchor_pos[ai]), obstacles,
                                      clearance=los_clearance):
            connections[ai].add(0)

    gamma = 3.0 * d_c

    for _ in range(iters):
        if rng.random() < goal_bias:
            sample = anchor_pos[rng.integers(len(anchors))]
        else:
            sample = rng.uniform(lo, hi)
        dists = np.linalg.norm(pos[:n] - sample, axis=1)
        near_i = int(np.argmin(dists))
        gap = dists[near_i]
        if gap < 1e-9:
            continue
        step = min(gap, d_c)
        new = pos[near_i] + (sample - pos[near_i]) * (step / gap)
        if not point_free(new, obstacles, clearance=node_clearance):
            continue

        r_near = min(d_c, gamma * (np.log(n + 1) / (n + 1)) ** (1.0 / 3.0))
        nd = np.linalg.norm(pos[:n] - new, axis=1)
        neighbor_idx = np.flatnonzero(nd <= r_near)
        if near_i not in neighbor_idx:
            neighbor_idx = np.append(neighbor_idx, near_i)
        # candidate parents in ascending resulting-cost order
        cand_cost = (cost_edges[neighbor_idx] + 1) * penalty + cost_len[neighbor_idx] + nd[neighbor_idx]
        order = np.argsort(cand_cost, kind="stable")
        chosen = -1
        for oi in order:
            j = int(neighbor_idx[oi])
            if nd[j] > d_c + 1e-12:
                continue
            if segment_clear(Segment(pos[j], new), obstacles, clearance=los_clearance):
                chosen = j
                break
        if chosen < 0:
            continue
        idx = n
        pos[idx] = new
        parent[idx] = chosen
        cost_len[idx] = cost_len[chosen] + nd[chosen]
        cost_edges[idx] = cost_edges[chosen] + 1
        children[chosen].append(idx)
        n += 1

        # rewire neighbors through the new node when strictly cheaper
        new_base = (cost_edges[idx] + 1) * penalty + cost_len[idx]
        for j in neighbor_idx:
            j = int(j)
            if j == chosen or j == 0:
                continue
            alt = new_base + nd[j]
            cur = cost_edges[j] * penalty + cost_len[j]
            if alt < cur - 1e-9 and segment_clear(Segment(new, pos[j]), obstacles,
                                                  clearance=los_clearance):
                children[parent[j]].remove(j)
                parent[j] = idx
                children[idx].append(j)
                d_edges = cost_edges[idx] + 1 - cost_edges[j]
                d_len = cost_len[idx] + nd[j] - cost_len[j]
                stack = [j]
                while stack:
                    k = stack.pop()
                    cost_edges[k] += d_edges
                    cost_len[k] += d_len
                    stack.extend(children[k])

        ad = np.linalg.norm(anchor_pos - new, axis=1)
        for ai in np.flatnonzero(ad <= d_c):
            if segment_clear(Segment(new, anchor_pos[int(ai)]), obstacles,
                             clearance=los_clearance):
                connections[int(ai)].add(idx)

    out = {}
    for ai, anchor in enumerate(anchors):
        best = None
        for node in connections[ai]:
            hop = float(np.linalg.norm(pos[node] - anchor.position))
            cand = (int(cost_edges[node]) + 1,
                    anchor.root_length + cost_len[node] + hop, node)
            if best is None or cand < best:
                best = cand
        if best is None:
            continue
        edges_total, root_cost, node = best
        chain = [node]
        while parent[chain[-1]] >= 0:
            chain.append(int(parent[chain[-1]]))
        waypoints = np.vstack([anchor.position, pos[chain]])
        out[anchor.node_index] = Path(
            waypoints=waypoints,
            edge_count=edges_total,
            root_cost=root_cost,
            anchor_index=anchor.node_index,
        )
    return out


def _default_bounds(p_g, targets, obstacles, d_c):
    pts = [np.asarray(p_g, dtype=float)] + [np.asarray(t, dtype=float) for t in targets]
    for o in obstacles:
        pts.append(o.vertices.min(axis=0))
        pts.append(o.vertices.max(axis=0))
    stack = np.vstack(pts)
    return np.array([stack.min(axis=0) - d_c, stack.max(axis=0) + d_c])


def _tree_params(params):
    d_c = params["d_c"]
    bounds = params.get("bounds")
    return {
        "d_c": d_c,
        "cap": params.get("plan_edge_cap", params.get("d_w", d_c)),
        "budget": params.get("rrt_budget", 0.4),
        "seed": params.get("seed", 0),
        "bounds": None if bounds is None else np.asarray(bounds, dtype=float),
        "node_clearance": params.get("node_clearance", 0.0),
        "los_clearance": params.get("los_clearance", 0.0),
        "workers": params.get("parallel_workers", 1),
        "retries": params.get("rrt_retries", 3),
        "anchor_all_nodes": params.get("anchor_all_nodes", False),
    }


def opt_tree(p_g, targets, obstacles, params):
    """Greedy tree construction: per iteration, search a branch for every
    remaining target from the newest branch's nodes, keep each target's
    best-ever candidate, then commit the branch with the fewest edges.

    Returns (SpanTree, searcher paths root->target ordered by target id).
    """
    p = _tree_params(params)
    p_g = np.asarray(p_g, dtype=float)
    targets = [np.asarray(t, dtype=float) for t in targets]
    if p["bounds"] is None:
        p["bounds"] = _default_bounds(p_g, targets, obstacles, p["d_c"])

    nodes = [TreeNode(0, p_g, None)]
    root_length = [0.0]
    newest = [0]            # anchor candidates: latest branch incl. its anchor
    remaining = list(range(len(targets)))
    incumbent = {i: None for i in remaining}
    target_nodes = {}
    iteration = 0

    while remaining:
        iteration += 1
        share = p["budget"] * min(1.0, p["workers"] / len(remaining))
        anchor_ids = sorted(set(range(len(nodes))) if p["anchor_all_nodes"] else set(newest))
        anchors = [Anchor(i, nodes[i].position, root_length[i]) for i in anchor_ids]
        progress = False
        for attempt in range(p["retries"] + 1):
            budget = share * (2 ** attempt)
            for i in remaining:
                found = mini_edge_rrt_star(
                    targets[i], anchors, obstacles, p["cap"], budget,
                    rng_seed=[p["seed"], i, iteration, attempt],
                    bounds=p["bounds"], node_clearance=p["node_clearance"],
                    los_clearance=p["los_clearance"],
                )
                for path in found.values():
                    path.target_id = i
                    incumbent[i] = compare_paths(path, incumbent[i])
            if any(incumbent[i] is not None for i in remaining):
                progress = True
                break
        if not progress:
            detail = ", ".join(f"target {i} at {targets[i].tolist()}" for i in remaining)
            raise UnreachableTargetError(
                f"no branch found after {p['retries']} retries: {detail}"
            )

        best_i = min(
            (i for i in remaining if incumbent[i] is not None),
            key=lambda i: (incumbent[i].edge_count, incumbent[i].root_cost, i),
        )
        path = incumbent.pop(best_i)
        remaining.remove(best_i)
        newest = [path.anchor_index]
        prev = path.anchor_index
        for wp in path.waypoints[1:]:
            idx = len(nodes)
            nodes.append(TreeNode(idx, np.asarray(wp, dtype=float), prev))
            root_length.append(root_length[prev] + float(np.linalg.norm(wp - nodes[prev].position)))
            newest.append(idx)
            prev = idx
        target_nodes[best_i] = prev

    tree = SpanTree(nodes=nodes, target_node_indices=target_nodes)
    searcher_paths = []
    for i in range(len(targets)):
        chain = tree.path_to_root(target_nodes[i])[::-1]
        waypoints = np.array([nodes[j].position for j in chain])
        searcher_paths.append(Path(
            waypoints=waypoints,
            edge_count=len(chain) - 1,
            root_cost=root_length[target_nodes[i]],
            anchor_index=0,
            target_id=i,
        ))
    return tree, searcher_paths


def hop_count(tree):
    """Total hops from the root to all targets."""
    return sum(tree.depth(idx) for idx in tree.target_node_indices.values())


def mst_baseline(p_g, targets, obstacles, d_c, params=None):
    """Visibility-graph MST over root, targets and sampled relay candidates,
    with long edges subdivided into relay chains.

    The standard relay-placement baseline: build the metric closure of the
    terminals over a sampled visibility graph, take its MST, expand each
    MST edge into its underlying shortest path, then drop relays every
    cap meters along edges longer than the cap.
    """
    params = dict(params or {})
    params.setdefault("d_c", d_c)
    p = _tree_params(params)
    rng = np.random.default_rng(p["seed"])
    p_g = np.asarray(p_g, dtype=float)
    targets = [np.asarray(t, dtype=float) for t in targets]
    if p["bounds"] is None:
        p["bounds"] = _default_bounds(p_g, targets, obstacles, p["d_c"])
    clearance = max(p["node_clearance"], p["los_clearance"])

    n_cand = params.get("mst_candidates", 160)
    lo, hi = p["bounds"]
    cand = []
    tries = 0
    while len(cand) < n_cand and tries < n_cand * 40:
        tries += 1
        q = rng.uniform(lo, hi)
        if point_free(q, obstacles, clearance=p["node_clearance"]):
            cand.append(q)
    pts = np.vstack([p_g] + targets + cand) if cand else np.vstack([p_g] + targets)
    n_term = 1 + len(targets)
    n_pts = len(pts)

    ii, jj = np.triu_indices(n_pts, k=1)
    lengths = np.linalg.norm(pts[ii] - pts[jj], axis=1)
    within = lengths <= params.get("mst_edge_cap", 3.0 * p["cap"])
    ii, jj, lengths = ii[within], jj[within], lengths[within]
    vis = segments_clear_batch(pts[ii], pts[jj], obstacles, clearance=clearance)
    ii, jj, lengths = ii[vis], jj[vis], lengths[vis]

    graph = csr_matrix((lengths, (ii, jj)), shape=(n_pts, n_pts))
    dist, pred = dijkstra(graph, directed=False, indices=np.arange(n_term),
                          return_predecessors=True)
    closure = dist[:, :n_term]
    if not np.all(np.isfinite(closure)):
        raise UnreachableTargetError("MST baseline: some terminal unreachable")
    mst = minimum_spanning_tree(csr_matrix(closure)).tocoo()

    # union of expanded terminal-to-terminal shortest paths
    adj = {}
    def add_edge(a, b):
        w = float(np.linalg.norm(pts[a] - pts[b]))
        adj.setdefault(a, {})[b] = w
        adj.setdefault(b, {})[a] = w
    for a, b in zip(mst.row, mst.col):
        node = int(b)
        while node != a:
            prv = int(pred[a, node])
            add_edge(prv, node)
            node = prv

    # shortest-path tree of the union, rooted at the ground station
    best = {0: 0.0}
    par = {0: None}
    heap = [(0.0, 0)]
    while heap:
        d0, u = heapq.heappop(heap)
        if d0 > best.get(u, np.inf):
            continue
        for v, w in adj.get(u, {}).items():
            nd = d0 + w
            if nd < best.get(v, np.inf) - 1e-12:
                best[v] = nd
                par[v] = u
                heapq.heappush(heap, (nd, v))

    # parents come out strictly closer to the root, so distance order is safe
    order = sorted(best, key=lambda u: best[u])
    nodes = [TreeNode(0, pts[0], None)]
    new_index = {0: 0}
    for u in order[1:]:
        pu = par[u]
        a, b = pts[pu], pts[u]
        length = float(np.linalg.norm(b - a))
        prev = new_index[pu]
        n_seg = max(1, int(np.ceil(length / p["cap"] - 1e-12)))
        for s in range(1, n_seg + 1):
            q = a + (b - a) * (s / n_seg)
            idx = len(nodes)
            nodes.append(TreeNode(idx, q, prev))
            prev = idx
        new_index[u] = prev

    target_nodes = {m: new_index[1 + m] for m in range(len(targets))}
    return SpanTree(nodes=nodes, target_node_indices=target_nodes)
