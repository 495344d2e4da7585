"""Closed-loop simulation harness: scenario files, run logs and metrics."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .barrier import BarrierParams, CircularObstacle, distance_margin
from .dynamics import PlantModel, UnicycleModel
from .engine import BoxBounds, CmpcConfig, CmpcEngine
from .graph import Topology, in_neighbors
from .qp import SolverSettings

__all__ = [
    "Scenario",
    "RunLog",
    "SimulationAborted",
    "run_closed_loop",
    "metrics",
    "export",
    "load_run_log",
    "builtin_scenario_path",
]

_MODELS = {"unicycle": UnicycleModel}


class SimulationAborted(RuntimeError):
    """Unrecoverable plant or geometry failure; carries the partial log."""

    def __init__(self, message: str, partial_log: "RunLog | None" = None):
        super().__init__(message)
        self.partial_log = partial_log


def _weight_matrix(value, size: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(size)
    if arr.ndim == 1:
        if arr.size != size:
            raise ValueError(f"{name} diagonal must have {size} entries, got {arr.size}")
        return np.diag(arr)
    if arr.shape != (size, size):
        raise ValueError(f"{name} must be {size}x{size}, got {arr.shape}")
    return arr


@dataclass
class Scenario:
    """Complete experiment description, loadable from a JSON document."""

    model_name: str
    dt: float
    topology: Topology
    initial_states: np.ndarray
    goal_state: np.ndarray | None
    leader_mode: str
    obstacles: tuple[CircularObstacle, ...]
    bounds: BoxBounds
    barrier: BarrierParams
    horizon: int
    Q: np.ndarray
    R: np.ndarray
    R_w: float
    P: np.ndarray
    eps_abs: float
    eps_rel: float
    s_max: int
    trust_region: float | None
    solver: dict
    sim_steps: int
    out_dir: str | None = None
    seed: int = 0

    # ------------------------------------------------------------------
    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        plant = doc["plant"]
        topology = Topology(np.asarray(doc["topology"]["adjacency"], dtype=float))
        init = np.asarray(doc["agents"]["initial_states"], dtype=float)
        leader = doc.get("leader", {})
        goal = leader.get("goal")
        goal_state = None if goal is None else np.asarray(goal, dtype=float)
        obstacles = tuple(
            CircularObstacle(center=np.asarray(o["center"], dtype=float), radius=float(o["radius"]))
            for o in doc.get("obstacles", []))
        b = doc["bounds"]
        bounds = BoxBounds(x_min=b["x_min"], x_max=b["x_max"],
                           u_min=b["u_min"], u_max=b["u_max"])
        bdoc = doc["barrier"]
        barrier = BarrierParams(gammas=tuple(bdoc["gammas"]),
                                relative_degree=int(bdoc["r"]),
                                safe_distance=float(bdoc["d"]))
        c = doc["cmpc"]
        model_cls = _MODELS.get(plant["model"])
        if model_cls is None:
            raise ValueError(f"unknown plant model {plant['model']!r}")
        model = model_cls(float(plant["dt"]))
        sim = doc.get("sim", {})
        return cls(
            model_name=plant["model"],
            dt=float(plant["dt"]),
            topology=topology,
            initial_states=init,
            goal_state=goal_state,
            leader_mode=leader.get("mode", "tracking"),
            obstacles=obstacles,
            bounds=bounds,
            barrier=barrier,
            horizon=int(c["T_p"]),
            Q=_weight_matrix(c["Q"], model.output_dim, "Q"),
            R=_weight_matrix(c["R"], model.input_dim, "R"),
            R_w=float(c["R_w"]),
            P=_weight_matrix(c["P"], model.output_dim, "P"),
            eps_abs=float(c.get("eps_abs", 1e-4)),
            eps_rel=float(c.get("eps_rel", 1e-2)),
            s_max=int(c.get("s_max", 30)),
            trust_region=None if c.get("trust_region") is None else float(c["trust_region"]),
            solver=dict(doc.get("solver", {})),
            sim_steps=int(sim.get("steps", 0)),
            out_dir=sim.get("out_dir"),
            seed=int(sim.get("seed", 0)),
        )

    @classmethod
    def from_json_file(cls, path: str | Path) -> "Scenario":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {
            "plant": {"model": self.model_name, "dt": self.dt},
            "topology": {"adjacency": self.topology.adjacency.tolist()},
            "agents": {"initial_states": self.initial_states.tolist()},
            "leader": {
                "goal": None if self.goal_state is None else self.goal_state.tolist(),
                "mode": self.leader_mode,
            },
            "obstacles": [{"center": o.center.tolist(), "radius": o.radius}
                          for o in self.obstacles],
            "bounds": {"x_min": self.bounds.x_min.tolist(), "x_max": self.bounds.x_max.tolist(),
                       "u_min": self.bounds.u_min.tolist(), "u_max": self.bounds.u_max.tolist()},
            "barrier": {"d": self.barrier.safe_distance, "r": self.barrier.relative_degree,
                        "gammas": list(self.barrier.gammas)},
            "cmpc": {"T_p": self.horizon, "Q": self.Q.tolist(), "R": self.R.tolist(),
                     "R_w": self.R_w, "P": self.P.tolist(), "eps_abs": self.eps_abs,
                     "eps_rel": self.eps_rel, "s_max": self.s_max,
                     "trust_region": self.trust_region},
            "solver": dict(self.solver),
            "sim": {"steps": self.sim_steps, "out_dir": self.out_dir, "seed": self.seed},
        }

    # ------------------------------------------------------------------
    def build_model(self) -> PlantModel:
        return _MODELS[self.model_name](self.dt)

    def build_config(self, model: PlantModel) -> CmpcConfig:
        goal_output = None
        if self.goal_state is not None:
            goal_output = model.output_matrix @ self.goal_state
        return CmpcConfig(
            horizon=self.horizon, Q=self.Q, R=self.R, R_w=self.R_w, P=self.P,
            eps_abs=self.eps_abs, eps_rel=self.eps_rel, s_max=self.s_max,
            trust_region=self.trust_region, goal_output=goal_output,
            leader_mode=self.leader_mode)

    def build_engine(self) -> CmpcEngine:
        model = self.build_model()
        settings = SolverSettings(**self.solver) if self.solver else None
        return CmpcEngine(model=model, topology=self.topology, obstacles=self.obstacles,
                          barrier_params=self.barrier, bounds=self.bounds,
                          config=self.build_config(model), solver_settings=settings)

    def start_states(self) -> np.ndarray:
        """Initial states, with leaders moved to the goal in pinned mode."""
        states = self.initial_states.copy()
        if self.leader_mode == "pinned" and self.goal_state is not None:
            for i in range(self.topology.n_agents):
                if not in_neighbors(self.topology, i):
                    states[i] = self.goal_state
        return states

    def validate(self) -> list[str]:
        """Invariant violations as human-readable strings; empty when valid."""
        problems: list[str] = []
        model = self.build_model()
        n = self.topology.n_agents
        if self.initial_states.shape != (n, model.state_dim):
            problems.append(
                f"initial states must have shape ({n}, {model.state_dim}), "
                f"got {self.initial_states.shape}")
            return problems
        states = self.start_states()
        pos = list(model.position_indices)
        for i in range(n):
            x = states[i]
            if np.any(x < self.bounds.x_min) or np.any(x > self.bounds.x_max):
                problems.append(f"agent {i} starts outside the state box")
            for idx, obs in enumerate(self.obstacles):
                if distance_margin(x[pos], obs.center, obs.radius) <= 0.0:
                    problems.append(f"agent {i} starts inside obstacle {idx}")
        d = self.barrier.safe_distance
        for i in range(n):
            for j in in_neighbors(self.topology, i):
                gap = float(np.linalg.norm(states[i][pos] - states[j][pos]))
                if gap <= d:
                    problems.append(
                        f"agents {i} and {j} start within the safe distance "
                        f"({gap:.4f} <= {d})")
        if self.barrier.relative_degree > self.horizon:
            problems.append("relative degree exceeds the prediction horizon")
        if self.sim_steps < 0:
            problems.append("sim steps must be non-negative")
        return problems


@dataclass
class RunLog:
    """Closed-loop history of one simulation run.

    Arrays are indexed by time step; ``pair_margins`` carries the quadratic
    inter-agent clearances for ``pairs`` (unordered neighbour pairs) and
    ``obstacle_margins`` the per-agent, per-obstacle clearances. Wall times
    cover the controller solve only.
    """

    scenario: dict
    code_version: str
    states: np.ndarray
    inputs: np.ndarray
    outputs: np.ndarray
    obstacle_margins: np.ndarray
    pair_margins: np.ndarray
    pairs: list[tuple[int, int]]
    cost: np.ndarray
    sqp_iterations: np.ndarray
    converged: np.ndarray
    qp_infeasible: np.ndarray
    wall_times: np.ndarray
    events: list[dict] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return self.states.shape[0]

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "code_version": self.code_version,
            "states": self.states.tolist(),
            "inputs": self.inputs.tolist(),
            "outputs": self.outputs.tolist(),
            "obstacle_margins": self.obstacle_margins.tolist(),
            "pair_margins": self.pair_margins.tolist(),
            "pairs": [list(p) for p in self.pairs],
            "cost": self.cost.tolist(),
            "sqp_iterations": self.sqp_iterations.tolist(),
            "converged": self.converged.tolist(),
            "qp_infeasible": self.qp_infeasible.tolist(),
            "wall_times": self.wall_times.tolist(),
            "events": self.events,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunLog":
        return cls(
            scenario=doc["scenario"],
            code_version=doc["code_version"],
            states=np.asarray(doc["states"], dtype=float),
            inputs=np.asarray(doc["inputs"], dtype=float),
            outputs=np.asarray(doc["outputs"], dtype=float),
            obstacle_margins=np.asarray(doc["obstacle_margins"], dtype=float),
            pair_margins=np.asarray(doc["pair_margins"], dtype=float),
            pairs=[tuple(p) for p in doc["pairs"]],
            cost=np.asarray(doc["cost"], dtype=float),
            sqp_iterations=np.asarray(doc["sqp_iterations"], dtype=int),
            converged=np.asarray(doc["converged"], dtype=bool),
            qp_infeasible=np.asarray(doc["qp_infeasible"], dtype=bool),
            wall_times=np.asarray(doc["wall_times"], dtype=float),
            events=list(doc.get("events", [])),
        )

    def equals(self, other: "RunLog", ignore_timing: bool = True) -> bool:
        """Bit-exact comparison; timing fields optionally excluded."""
        same = (
            self.scenario == other.scenario
            and self.code_version == other.code_version
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.inputs, other.inputs)
            and np.array_equal(self.outputs, other.outputs)
            and np.array_equal(self.obstacle_margins, other.obstacle_margins)
            and np.array_equal(self.pair_margins, other.pair_margins)
            and self.pairs == other.pairs
            and np.array_equal(self.cost, other.cost)
            and np.array_equal(self.sqp_iterations, other.sqp_iterations)
            and np.array_equal(self.converged, other.converged)
            and np.array_equal(self.qp_infeasible, other.qp_infeasible)
            and self.events == other.events
        )
        if not ignore_timing:
            same = same and np.array_equal(self.wall_times, other.wall_times)
        return same


def _neighbor_pairs(topology: Topology) -> list[tuple[int, int]]:
    pairs = set()
    for i in range(topology.n_agents):
        for j in in_neighbors(topology, i):
            pairs.add((min(i, j), max(i, j)))
    return sorted(pairs)


def run_closed_loop(scenario: Scenario) -> RunLog:
    """Simulate the receding-horizon loop for ``scenario.sim_steps`` steps.

    At each step the controller plan is solved, the first input of every
    agent is applied through the true plant, and the result is logged.
    Infeasible subproblems are logged as events; geometry failures abort
    with the partial log attached.
    """
    engine = scenario.build_engine()
    model = engine.model
    n = scenario.topology.n_agents
    steps = scenario.sim_steps
    pairs = _neighbor_pairs(scenario.topology)
    pos = list(model.position_indices)

    states = np.zeros((steps, n, model.state_dim))
    inputs = np.zeros((steps, n, model.input_dim))
    outputs = np.zeros((steps, n, model.output_dim))
    obstacle_margins = np.zeros((steps, n, len(scenario.obstacles)))
    pair_margins = np.zeros((steps, len(pairs)))
    cost = np.zeros(steps)
    sqp_iterations = np.zeros(steps, dtype=int)
    converged = np.zeros(steps, dtype=bool)
    qp_infeasible = np.zeros(steps, dtype=bool)
    wall_times = np.zeros(steps)
    events: list[dict] = []

    def partial(t: int) -> RunLog:
        return RunLog(
            scenario=scenario.to_dict(), code_version=__version__,
            states=states[:t].copy(), inputs=inputs[:t].copy(), outputs=outputs[:t].copy(),
            obstacle_margins=obstacle_margins[:t].copy(), pair_margins=pair_margins[:t].copy(),
            pairs=pairs, cost=cost[:t].copy(), sqp_iterations=sqp_iterations[:t].copy(),
            converged=converged[:t].copy(), qp_infeasible=qp_infeasible[:t].copy(),
            wall_times=wall_times[:t].copy(), events=events)

    x = scenario.start_states()
    trace = None
    for t in range(steps):
        warm = engine.zero_input_rollout(x) if trace is None \
            else engine.shift_warm_start(trace, x)
        start = time.perf_counter()
        try:
            trace = engine.sqp_solve(t, x, warm)
        except Exception as exc:  # geometry/plant failures are unrecoverable
            events.append({"t": t, "type": "abort", "detail": str(exc)})
            raise SimulationAborted(f"controller failed at step {t}: {exc}",
                                    partial_log=partial(t)) from exc
        wall_times[t] = time.perf_counter() - start

        if trace.qp_infeasible:
            events.append({"t": t, "type": "qp_infeasible"})
        for agent, kind, target, step in trace.nominal_inside_events:
            events.append({"t": t, "type": "nominal_inside", "agent": agent,
                           "kind": kind, "target": target, "step": step})

        applied = trace.inputs[:, 0]
        states[t] = x
        inputs[t] = applied
        for i in range(n):
            outputs[t, i] = model.output(x[i])
            for o, obs in enumerate(scenario.obstacles):
                obstacle_margins[t, i, o] = obs.margin(x[i][pos])
        for p, (i, j) in enumerate(pairs):
            pair_margins[t, p] = distance_margin(
                x[i][pos], x[j][pos], scenario.barrier.safe_distance)
        cost[t] = trace.objective
        sqp_iterations[t] = trace.iterations_used
        converged[t] = trace.converged
        qp_infeasible[t] = trace.qp_infeasible

        x = np.stack([model.step(x[i], applied[i]) for i in range(n)])

    return partial(steps)


def metrics(log: RunLog, epsilon: float) -> dict:
    """Consensus, safety and performance summary of one run."""
    if log.n_steps == 0:
        raise ValueError("metrics need a non-empty run log")
    adjacency = np.asarray(log.scenario["topology"]["adjacency"], dtype=float)
    topology = Topology(adjacency)
    edges = [(i, j) for i in range(topology.n_agents)
             for j in in_neighbors(topology, i)]
    steps = log.n_steps

    edge_errors = np.zeros((steps, len(edges)))
    for e, (i, j) in enumerate(edges):
        edge_errors[:, e] = np.linalg.norm(log.outputs[:, i] - log.outputs[:, j], axis=1)
    max_edge_error = edge_errors.max(axis=1) if edges else np.zeros(steps)

    consensus_time = None
    if edges:
        suffix_max = np.maximum.accumulate(max_edge_error[::-1])[::-1]
        below = np.flatnonzero(suffix_max <= epsilon)
        consensus_time = int(below[0]) if below.size else None
    else:
        consensus_time = 0

    u_min = np.asarray(log.scenario["bounds"]["u_min"], dtype=float)
    u_max = np.asarray(log.scenario["bounds"]["u_max"], dtype=float)
    input_violations = int(np.sum(
        (log.inputs < u_min - 1e-9) | (log.inputs > u_max + 1e-9)))

    cost_increases = int(np.sum(log.cost[1:] > log.cost[:-1] + 1e-6))
    after = slice(10, None)
    cost_tail = log.cost[after]
    cost_increases_tail = int(np.sum(cost_tail[1:] > cost_tail[:-1] + 1e-6)) \
        if cost_tail.size > 1 else 0

    tail_iters = log.sqp_iterations[10:]
    return {
        "epsilon": epsilon,
        "consensus_time": consensus_time,
        "max_edge_error_final": float(max_edge_error[-1]) if edges else 0.0,
        "min_obstacle_margin": float(log.obstacle_margins.min())
        if log.obstacle_margins.size else float("inf"),
        "min_pair_margin": float(log.pair_margins.min())
        if log.pair_margins.size else float("inf"),
        "cost_increases": cost_increases,
        "cost_increases_after_10": cost_increases_tail,
        "input_violations": input_violations,
        "mean_wall_time": float(log.wall_times.mean()),
        "max_wall_time": float(log.wall_times.max()),
        "mean_sqp_iterations_after_10": float(tail_iters.mean())
        if tail_iters.size else float("nan"),
        "qp_infeasible_steps": int(log.qp_infeasible.sum()),
    }


def export(log: RunLog, out_dir: str | Path, fmt: str = "csv") -> list[Path]:
    """Write the run log as CSV tables or a lossless JSON mirror."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    try:
        if fmt == "csv":
            traj = out / "trajectory.csv"
            with open(traj, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["t", "agent", "p_x", "p_y", "theta", "v",
                                 "u1", "u2", "h2_min"])
                for t in range(log.n_steps):
                    for i in range(log.states.shape[1]):
                        h2 = log.obstacle_margins[t, i].min() \
                            if log.obstacle_margins.shape[2] else float("inf")
                        writer.writerow([t, i, *log.states[t, i].tolist(),
                                         *log.inputs[t, i].tolist(), h2])
            written.append(traj)
            summary = out / "summary.csv"
            with open(summary, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["t", "J", "sqp_iters", "wall_ms"])
                for t in range(log.n_steps):
                    writer.writerow([t, log.cost[t], log.sqp_iterations[t],
                                     1e3 * log.wall_times[t]])
            written.append(summary)
        elif fmt == "json":
            path = out / "run_log.json"
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(log.to_dict(), fh)
            written.append(path)
        else:
            raise ValueError(f"unknown export format {fmt!r}")
    except OSError as exc:
        raise OSError(f"failed writing run log under {out}: {exc}") from exc
    return written


def load_run_log(path: str | Path) -> RunLog:
    with open(path, "r", encoding="utf-8") as fh:
        return RunLog.from_dict(json.load(fh))


def builtin_scenario_path(name: str) -> Path:
    """Path of a scenario file bundled with the package."""
    from importlib.resources import files

    resource = files("cmpc") / "scenarios" / f"{name}.json"
    path = Path(str(resource))
    if not path.exists():
        raise FileNotFoundError(f"no bundled scenario named {name!r}")
    return path
