"""Scenario files (schema ``scenario.v1``) and deterministic world generators.

A scenario bundles the workspace box, convex obstacles, the ground station,
the target list, and the parameter block consumed by the topology stage and
the planner. Validation produces single-line, path-qualified messages so a
bad file points at the exact field.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import ConvexObstacle, point_free

SCHEMA_VERSION = "scenario.v1"

DESK_PARAMS = {
    "r_a": 0.25, "d_c": 18.0, "d_m": 0.4, "d_w": 17.0,
    "v_max": 1.8, "a_max": 0.36, "h": 0.5, "K": 10,
    "q_terminal": 10.0, "q_smooth": 1.0, "alpha_c": 3.0, "alpha_p": 1.0,
    "seed": 0, "rrt_budget": 0.4, "reroute_budget": 0.5,
    "node_clearance": 1.0, "los_clearance": 1.0,
    "plan_edge_cap": 17.0, "tick_budget": 1000,
}

# full-size analogue of the desk block (distances x8.33, speeds x8.33)
FIELD_PARAMS = {
    "r_a": 2.0, "d_c": 150.0, "d_m": 3.0, "d_w": 141.0,
    "v_max": 15.0, "a_max": 3.0, "h": 0.5, "K": 10,
    "q_terminal": 10.0, "q_smooth": 1.0, "alpha_c": 3.0, "alpha_p": 1.0,
    "seed": 0, "rrt_budget": 0.4, "reroute_budget": 0.5,
    "node_clearance": 7.5, "los_clearance": 7.5,
    "plan_edge_cap": 141.0, "tick_budget": 1000,
}

_REQUIRED = ("r_a", "d_c", "d_m", "d_w", "v_max", "a_max", "h", "K")
_OPTIONAL_POSITIVE = ("q_terminal", "q_smooth", "alpha_c", "alpha_p",
                      "rrt_budget", "reroute_budget", "plan_edge_cap")


class ScenarioError(ValueError):
    """Malformed scenario; message is one line, qualified by field path."""


def _fail(path, msg):
    raise ScenarioError(f"{path}: {msg}")


def _vector(doc, path, n=3):
    try:
        arr = np.asarray(doc, dtype=float)
    except (TypeError, ValueError):
        _fail(path, "expected a list of numbers")
    if arr.shape != (n,) or not np.all(np.isfinite(arr)):
        _fail(path, f"expected {n} finite numbers")
    return arr


@dataclass
class ScenarioConfig:
    name: str
    bounds: np.ndarray                 # (2, 3) lo/hi corners
    p_g: np.ndarray
    targets: np.ndarray                # (M, 3)
    obstacles: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc, name="scenario"):
        if not isinstance(doc, dict):
            _fail("scenario", "expected a JSON object")
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            _fail("scenario.schema_version", f"expected {SCHEMA_VERSION!r}, got {version!r}")
        raw_bounds = doc.get("bounds")
        if not isinstance(raw_bounds, (list, tuple)) or len(raw_bounds) != 2:
            _fail("scenario.bounds", "expected [lo, hi] corner pair")
        bounds = np.vstack([_vector(raw_bounds[0], "scenario.bounds[0]"),
                            _vector(raw_bounds[1], "scenario.bounds[1]")])
        p_g = _vector(doc.get("p_g"), "scenario.p_g")
        raw_targets = doc.get("targets")
        if not isinstance(raw_targets, (list, tuple)) or len(raw_targets) == 0:
            _fail("scenario.targets", "expected a non-empty list of points")
        targets = np.vstack([_vector(t, f"scenario.targets[{i}]")
                             for i, t in enumerate(raw_targets)])
        obstacles = []
        for i, entry in enumerate(doc.get("obstacles", [])):
            path = f"scenario.obstacles[{i}]"
            if not isinstance(entry, dict) or "vertices" not in entry:
                _fail(path, "expected an object with a 'vertices' list")
            raw = entry["vertices"]
            if not isinstance(raw, (list, tuple)) or len(raw) < 4:
                _fail(f"{path}.vertices", "a convex body needs at least 4 vertices")
            verts = np.vstack([_vector(v, f"{path}.vertices[{j}]")
                               for j, v in enumerate(raw)])
            if np.linalg.matrix_rank(verts[1:] - verts[0], tol=1e-9) < 3:
                _fail(f"{path}.vertices", "degenerate body: needs 4 affinely independent points")
            obstacles.append(ConvexObstacle.from_vertices(verts))
        raw_params = doc.get("params")
        if not isinstance(raw_params, dict):
            _fail("scenario.params", "expected an object")
        config = cls(name=str(doc.get("name", name)), bounds=bounds, p_g=p_g,
                     targets=targets, obstacles=obstacles, params=dict(raw_params))
        config.validate()
        return config

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as err:
                _fail("scenario", f"invalid JSON ({err})")
        return cls.from_dict(doc, name=str(path))

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "bounds": [self.bounds[0].tolist(), self.bounds[1].tolist()],
            "p_g": self.p_g.tolist(),
            "targets": [t.tolist() for t in self.targets],
            "obstacles": [{"vertices": o.vertices.tolist()} for o in self.obstacles],
            "params": {k: self.params[k] for k in sorted(self.params)},
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    def validate(self):
        lo, hi = self.bounds
        if not np.all(lo < hi):
            _fail("scenario.bounds", f"lo must be strictly below hi (got {lo.tolist()} / {hi.tolist()})")
        p = self.params
        for key in _REQUIRED:
            if key not in p:
                _fail(f"scenario.params.{key}", "missing required parameter")
            try:
                val = float(p[key])
            except (TypeError, ValueError):
                _fail(f"scenario.params.{key}", f"expected a number, got {p[key]!r}")
            if not np.isfinite(val) or val <= 0:
                _fail(f"scenario.params.{key}", f"must be a positive number (got {p[key]!r})")
            p[key] = val
        if int(p["K"]) != p["K"] or p["K"] < 2:
            _fail("scenario.params.K", f"must be an integer >= 2 (got {p['K']!r})")
        p["K"] = int(p["K"])
        if p["d_w"] >= p["d_c"]:
            _fail("scenario.params.d_w", f"must be below d_c={p['d_c']} (got {p['d_w']})")
        window = p["d_w"] + p["h"] * p["v_max"] + p["h"] ** 2 * p["a_max"]
        if window > p["d_c"] + 1e-9:
            _fail("scenario.params.d_w",
                  f"d_w + h*v_max + h^2*a_max = {window:.4f} exceeds d_c={p['d_c']}; "
                  "the shifted plan could leave communication range")
        for key in _OPTIONAL_POSITIVE:
            if key in p and (not np.isfinite(float(p[key])) or float(p[key]) <= 0):
                _fail(f"scenario.params.{key}", f"must be a positive number (got {p[key]!r})")
        for key in ("seed", "tick_budget"):
            if key in p:
                if int(p[key]) != p[key] or p[key] < 0:
                    _fail(f"scenario.params.{key}", f"must be a non-negative integer (got {p[key]!r})")
                p[key] = int(p[key])
        if not (np.all(self.p_g >= lo) and np.all(self.p_g <= hi)):
            _fail("scenario.p_g", f"outside workspace bounds (got {self.p_g.tolist()})")
        if not point_free(self.p_g, self.obstacles, clearance=p["r_a"]):
            _fail("scenario.p_g", "inside an obstacle (or closer than r_a)")
        for i, t in enumerate(self.targets):
            if not (np.all(t >= lo) and np.all(t <= hi)):
                _fail(f"scenario.targets[{i}]", f"outside workspace bounds (got {t.tolist()})")
            if not point_free(t, self.obstacles, clearance=p["r_a"]):
                _fail(f"scenario.targets[{i}]", "inside an obstacle (or closer than r_a)")


def _box(lo, hi):
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0])
                        for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    return ConvexObstacle.from_vertices(corners)


def _sample_targets(rng, count, box_lo, box_hi, obstacles, clearance,
                    min_gap, p_g, max_tries=4000):
    out = []
    for _ in range(max_tries):
        cand = rng.uniform(box_lo, box_hi)
        if not point_free(cand, obstacles, clearance=clearance):
            continue
        if out and min(np.linalg.norm(cand - t) for t in out) < min_gap:
            continue
        if np.linalg.norm(cand - p_g) < min_gap:
            continue
        out.append(cand)
        if len(out) == count:
            return np.vstack(out)
    raise RuntimeError(f"could not place {count} targets after {max_tries} tries")


def desk_scenario(seed, n_targets=None, n_obstacles=None):
    """Randomized desk-scale world: 60x60x15 m box, box-like convex
    obstacles standing on the floor, ground station near the west wall."""
    rng = np.random.default_rng([int(seed), 101])
    params = dict(DESK_PARAMS, seed=int(seed))
    lo = np.zeros(3)
    hi = np.array([60.0, 60.0, 15.0])
    p_g = np.array([6.0, float(rng.uniform(22.0, 38.0)), 2.0])
    if n_obstacles is None:
        n_obstacles = int(rng.integers(4, 11))
    if n_targets is None:
        n_targets = int(rng.integers(3, 9))

    obstacles = []
    guard = 0
    while len(obstacles) < n_obstacles and guard < 2000:
        guard += 1
        center = rng.uniform([16.0, 6.0], [54.0, 54.0])
        if np.linalg.norm(center - p_g[:2]) < 18.0:
            continue
        half = rng.uniform(1.0, 4.0, size=2)
        height = float(rng.uniform(3.0, 12.0))
        blo = np.maximum([center[0] - half[0], center[1] - half[1], 0.0], lo)
        bhi = np.minimum([center[0] + half[0], center[1] + half[1], height], hi)
        box = _box(blo, bhi)
        # keep a flyable gap between bodies so every pocket stays reachable
        if any(np.linalg.norm(box.centroid[:2] - o.centroid[:2])
               < (box.bound_radius + o.bound_radius + 2.4) for o in obstacles):
            continue
        obstacles.append(box)

    targets = _sample_targets(
        rng, n_targets, [14.0, 4.0, 1.0], [57.0, 56.0, 12.0],
        obstacles, clearance=2.5, min_gap=4.0, p_g=p_g)
    config = ScenarioConfig(name=f"desk-{seed}", bounds=np.vstack([lo, hi]),
                            p_g=p_g, targets=targets, obstacles=obstacles,
                            params=params)
    config.validate()
    return config


def corridor_scenario(seed, n_targets=4):
    """Fixed two-wall corridor world for topology comparisons: both walls
    are full height with offset gaps, so routes zig-zag and relays pay off
    when branches share the passage."""
    rng = np.random.default_rng([int(seed), 202])
    params = dict(DESK_PARAMS, seed=int(seed))
    params["target_box"] = [[46.0, 3.0, 1.0], [57.0, 57.0, 12.0]]
    lo = np.zeros(3)
    hi = np.array([60.0, 60.0, 15.0])
    obstacles = [
        _box((24.0, 0.0, 0.0), (26.0, 24.0, 15.0)),
        _box((24.0, 32.0, 0.0), (26.0, 60.0, 15.0)),
        _box((38.0, 0.0, 0.0), (40.0, 16.0, 15.0)),
        _box((38.0, 24.0, 0.0), (40.0, 60.0, 15.0)),
        _box((12.0, 44.0, 0.0), (18.0, 52.0, 10.0)),
    ]
    p_g = np.array([4.0, 30.0, 2.0])
    targets = _sample_targets(
        rng, n_targets, params["target_box"][0], params["target_box"][1],
        obstacles, clearance=2.5, min_gap=4.0, p_g=p_g)
    config = ScenarioConfig(name=f"corridor-{seed}", bounds=np.vstack([lo, hi]),
                            p_g=p_g, targets=targets, obstacles=obstacles,
                            params=params)
    config.validate()
    return config


def resample_targets(config, count, seed):
    """Same world, fresh target set: used by the comparison runner to sweep
    target counts over one scenario file."""
    rng = np.random.default_rng([int(seed), 303])
    box = config.params.get("target_box")
    if box is None:
        pad = config.params.get("node_clearance", 1.0) + 2.0
        box = [config.bounds[0] + pad, config.bounds[1] - pad]
    clearance = max(config.params.get("node_clearance", 1.0),
                    config.params.get("los_clearance", 1.0)) + 1.5
    targets = _sample_targets(
        rng, count, np.asarray(box[0], float), np.asarray(box[1], float),
        config.obstacles, clearance=clearance,
        min_gap=16.0 * config.params["r_a"], p_g=config.p_g)
    return ScenarioConfig(name=f"{config.name}-m{count}", bounds=config.bounds,
                          p_g=config.p_g, targets=targets,
                          obstacles=config.obstacles, params=dict(config.params))


def valley_scenario():
    """Full-size benchmark: a 500x500x100 m valley between two long ridges
    with a knoll in the channel and seven targets spread past the ridge
    line. The channel gives searchers room to run near full speed."""
    params = dict(FIELD_PARAMS)
    lo = np.zeros(3)
    hi = np.array([500.0, 500.0, 100.0])
    obstacles = [
        _box((120.0, 330.0, 0.0), (420.0, 500.0, 70.0)),   # north ridge
        _box((120.0, 0.0, 0.0), (420.0, 170.0, 70.0)),     # south ridge
        _box((260.0, 225.0, 0.0), (300.0, 275.0, 40.0)),   # channel knoll
    ]
    p_g = np.array([40.0, 250.0, 10.0])
    targets = np.array([
        [460.0, 250.0, 15.0],
        [430.0, 120.0, 20.0],
        [430.0, 380.0, 20.0],
        [200.0, 250.0, 12.0],
        [350.0, 200.0, 12.0],
        [470.0, 60.0, 15.0],
        [470.0, 440.0, 15.0],
    ])
    config = ScenarioConfig(name="valley", bounds=np.vstack([lo, hi]),
                            p_g=p_g, targets=targets, obstacles=obstacles,
                            params=params)
    config.validate()
    return config


def grid_scenario(index):
    """Small flat worlds with provably minimal relay counts, for checking
    the topology search against exhaustive enumeration. All geometry sits
    in a thin z slab so the optimum is pinned by planar structure."""
    if not 0 <= index < 10:
        raise ValueError(f"grid world index out of range: {index}")
    lo = np.zeros(3)
    hi = np.array([24.0, 14.0, 2.0])
    z0, z1 = 0.0, 2.0
    mid = 1.0

    def world(d_c, walls, targets, name):
        # edge cap equals d_c: these drills measure the topology search
        # against enumeration, they are never deployed
        params = dict(DESK_PARAMS, seed=index, d_c=float(d_c),
                      d_w=float(d_c) - 1.2, plan_edge_cap=float(d_c),
                      node_clearance=0.3, los_clearance=0.3, rrt_budget=2.0)
        obstacles = [_box((w[0], w[1], z0), (w[2], w[3], z1)) for w in walls]
        config = ScenarioConfig(
            name=name, bounds=np.vstack([lo, hi]),
            p_g=np.array([2.0, 7.0, mid]),
            targets=np.array([[t[0], t[1], mid] for t in targets]),
            obstacles=obstacles, params=params)
        config.validate()
        return config

    layouts = [
        # open reach: distance alone forces relays
        lambda: world(8.0, [], [(22.0, 7.0)], "grid-0"),
        lambda: world(7.0, [], [(20.0, 7.0)], "grid-1"),
        # one wall, gap at the top
        lambda: world(8.0, [(11.0, 0.0, 12.0, 9.0)], [(21.0, 5.0)], "grid-2"),
        lambda: world(7.0, [(10.0, 0.0, 11.0, 10.0)], [(19.0, 4.0)], "grid-3"),
        # one wall, gap at the bottom
        lambda: world(8.0, [(11.0, 5.0, 12.0, 14.0)], [(21.0, 9.0)], "grid-4"),
        # double baffle: gaps on opposite sides
        lambda: world(8.0, [(8.0, 0.0, 9.0, 9.0), (15.0, 5.0, 16.0, 14.0)],
                      [(22.0, 7.0)], "grid-5"),
        lambda: world(7.5, [(8.0, 0.0, 9.0, 10.0), (15.0, 4.0, 16.0, 14.0)],
                      [(21.0, 7.0)], "grid-6"),
        # two targets far enough out that one shared relay is forced
        lambda: world(8.0, [], [(14.0, 3.0), (14.0, 11.0)], "grid-7"),
        lambda: world(8.0, [(11.0, 6.0, 12.0, 14.0)], [(17.0, 11.0), (17.0, 3.0)],
                      "grid-8"),
        # pillar field
        lambda: world(8.0, [(9.0, 5.5, 11.0, 8.5), (16.0, 0.0, 17.0, 6.0)],
                      [(22.0, 4.0)], "grid-9"),
    ]
    return layouts[index]()
