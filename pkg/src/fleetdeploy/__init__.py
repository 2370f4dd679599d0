"""Relay-tree deployment planning and simulation for agent fleets.

Plan a minimum-relay spanning tree over line-of-sight links, then drive
every agent with a connectivity- and collision-safe MPC until each
searcher parks on its target. Entry points:

- ``scenarios.ScenarioConfig`` loads and validates scenario files;
- ``topo.opt_tree`` / ``topo.mst_baseline`` synthesize topologies;
- ``sim.run`` executes a full deployment and returns logs and metrics;
- ``cli.main`` is the command-line front door (also ``fleetdeploy`` on
  PATH).
"""

from .scenarios import ScenarioConfig, ScenarioError, desk_scenario, valley_scenario
from .sim import MonitorBreach, RunResult, run, runlog_hash
from .topo import SpanTree, UnreachableTargetError, mst_baseline, opt_tree

__all__ = [
    "MonitorBreach",
    "RunResult",
    "ScenarioConfig",
    "ScenarioError",
    "SpanTree",
    "UnreachableTargetError",
    "desk_scenario",
    "mst_baseline",
    "opt_tree",
    "run",
    "runlog_hash",
    "valley_scenario",
]
