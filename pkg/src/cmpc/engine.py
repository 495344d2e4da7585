"""Receding-horizon consensus controller built on successive convexification.

At every time step the nonlinear multi-agent optimal control problem is
approximated by a convex QP around a nominal trajectory: the dynamics enter
in linearized deviation form, keep-out constraints enter as slack-relaxed
halfplane rows, and the quadratic consensus/input/slack cost is exact. The
QP solution becomes the next nominal, and the loop repeats until the
predicted output trajectory stops moving or an iteration cap is hit.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import barrier as bar
from .dynamics import LinearizedStep, PlantModel
from .graph import Topology, in_neighbors
from .qp import QpProblem, QpSolution, QpSolver, QpStatus, SolverSettings, polish

__all__ = [
    "BoxBounds",
    "CmpcConfig",
    "NominalTrajectory",
    "ConstraintInstance",
    "DecisionLayout",
    "SqpIteration",
    "SqpTrace",
    "FeasibilityMargin",
    "CmpcEngine",
]


@dataclass(frozen=True)
class BoxBounds:
    """Elementwise state and input boxes."""

    x_min: np.ndarray
    x_max: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray

    def __post_init__(self) -> None:
        for name in ("x_min", "x_max", "u_min", "u_max"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.x_min > self.x_max) or np.any(self.u_min > self.u_max):
            raise ValueError("box bounds are empty (min exceeds max)")


@dataclass(frozen=True)
class CmpcConfig:
    """Horizon, weights and stopping rules for the controller.

    ``Q``/``R`` weigh the stage consensus error and input effort, ``P`` the
    terminal consensus error, and ``R_w`` the deviation of each constraint
    slack from one. Iterations stop when the absolute or the relative change
    of the stacked predicted outputs drops below ``eps_abs``/``eps_rel``, or
    after ``s_max`` iterations. ``goal_output`` drives agents without
    in-neighbors; ``trust_region`` optionally boxes deviations from the
    nominal trajectory.
    """

    horizon: int
    Q: np.ndarray
    R: np.ndarray
    R_w: float
    P: np.ndarray
    eps_abs: float = 1e-4
    eps_rel: float = 1e-2
    s_max: int = 30
    trust_region: float | None = None
    goal_output: np.ndarray | None = None
    leader_mode: str = "tracking"

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if self.eps_abs <= 0.0 or self.eps_rel <= 0.0:
            raise ValueError("convergence thresholds must be positive")
        if self.s_max < 1:
            raise ValueError(f"s_max must be >= 1, got {self.s_max}")
        if self.leader_mode not in ("tracking", "pinned"):
            raise ValueError(f"unknown leader mode {self.leader_mode!r}")
        for name in ("Q", "R", "P"):
            w = np.array(getattr(self, name), dtype=float)
            _require_positive_definite(w, name)
            w.setflags(write=False)
            object.__setattr__(self, name, w)
        if self.R_w <= 0.0:
            raise ValueError(f"R_w must be positive, got {self.R_w}")
        if self.goal_output is not None:
            g = np.array(self.goal_output, dtype=float)
            g.setflags(write=False)
            object.__setattr__(self, "goal_output", g)


def _require_positive_definite(w: np.ndarray, name: str) -> None:
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {w.shape}")
    if np.any(np.abs(w - w.T) > 1e-12):
        raise ValueError(f"{name} must be symmetric")
    if np.any(np.linalg.eigvalsh(w) <= 0.0):
        raise ValueError(f"{name} must be positive definite")


@dataclass
class NominalTrajectory:
    """Per-agent predicted states and inputs used as a linearization anchor.

    ``states`` has shape ``(N, horizon + 1, n)`` and ``inputs`` shape
    ``(N, horizon, m)``; ``states[:, 0]`` carries the measured states.
    """

    states: np.ndarray
    inputs: np.ndarray


@dataclass(frozen=True)
class ConstraintInstance:
    """One keep-out source for one agent: a static obstacle or a neighbour."""

    kind: str  # "obstacle" | "neighbor"
    target: int


class DecisionLayout:
    """Index map for the flat decision vector ``z = [U; X; W]``.

    Inputs are ordered step-major then agent, states likewise for steps
    ``1..horizon``, and one slack follows per (agent, constraint instance,
    order, step). The map is bijective onto ``range(dim)``.
    """

    def __init__(self, n_agents: int, state_dim: int, input_dim: int, horizon: int,
                 instances: tuple[tuple[ConstraintInstance, ...], ...], relative_degree: int):
        self.n_agents = n_agents
        self.state_dim = state_dim
        self.input_dim = input_dim
        self.horizon = horizon
        self.instances = instances
        self.relative_degree = relative_degree
        self.n_inputs = n_agents * horizon * input_dim
        self.n_states = n_agents * horizon * state_dim
        self._slack_map: dict[tuple[int, str, int, int, int], int] = {}
        offset = self.n_inputs + self.n_states
        for k in range(horizon):
            for agent in range(n_agents):
                for inst in instances[agent]:
                    for order in range(1, relative_degree + 1):
                        key = (agent, inst.kind, inst.target, order, k)
                        self._slack_map[key] = offset
                        offset += 1
        self.n_slacks = offset - self.n_inputs - self.n_states
        self.dim = offset

    def u_slice(self, agent: int, k: int) -> slice:
        if not 0 <= k < self.horizon:
            raise IndexError(f"input step {k} outside horizon {self.horizon}")
        start = (k * self.n_agents + agent) * self.input_dim
        return slice(start, start + self.input_dim)

    def x_slice(self, agent: int, k: int) -> slice:
        if not 1 <= k <= self.horizon:
            raise IndexError(f"state step {k} must be in 1..{self.horizon}")
        start = self.n_inputs + ((k - 1) * self.n_agents + agent) * self.state_dim
        return slice(start, start + self.state_dim)

    def slack_index(self, agent: int, kind: str, target: int, order: int, k: int) -> int:
        return self._slack_map[(agent, kind, target, order, k)]

    def slack_keys(self) -> list[tuple[int, str, int, int, int]]:
        return list(self._slack_map.keys())


@dataclass(frozen=True)
class SqpIteration:
    e_abs: float
    e_rel: float
    qp_status: QpStatus
    qp_iterations: int


@dataclass
class SqpTrace:
    """Record of one time step's convexification loop and its final iterate."""

    time_step: int
    iterations: list[SqpIteration]
    converged: bool
    qp_infeasible: bool
    states: np.ndarray
    inputs: np.ndarray
    slacks: np.ndarray
    objective: float
    nominal_inside_events: list[tuple[int, str, int, int]] = field(default_factory=list)

    @property
    def iterations_used(self) -> int:
        return len(self.iterations)


@dataclass(frozen=True)
class FeasibilityMargin:
    """Input-authority versus worst-case decay diagnostics for one row group.

    ``eta`` is the input coefficient row of the input-explicit barrier form;
    ``u_min``/``u_max`` bound its reachable range over the input box, and
    ``f_max`` is the largest decayed margin demand over the state box. The
    margin certificate holds when ``u_min >= f_max``.
    """

    agent: int
    kind: str
    target: int
    step: int
    eta: np.ndarray
    u_min: float
    u_max: float
    f_max: float

    @property
    def holds(self) -> bool:
        return self.u_min >= self.f_max


class CmpcEngine:
    """Centralized convex-MPC engine for one multi-agent scenario.

    One engine instance drives one simulation run on a single thread; all
    returned objects are plain values.
    """

    def __init__(self, model: PlantModel, topology: Topology,
                 obstacles: tuple[bar.CircularObstacle, ...],
                 barrier_params: bar.BarrierParams, bounds: BoxBounds,
                 config: CmpcConfig, solver_settings: SolverSettings | None = None):
        if topology.n_agents < 1:
            raise ValueError("need at least one agent")
        if barrier_params.relative_degree > config.horizon:
            raise ValueError("relative degree cannot exceed the horizon")
        if config.Q.shape[0] != model.output_dim or config.P.shape[0] != model.output_dim:
            raise ValueError("Q and P must match the output dimension")
        if config.R.shape[0] != model.input_dim:
            raise ValueError("R must match the input dimension")
        self.model = model
        self.topology = topology
        self.obstacles = tuple(obstacles)
        self.barrier_params = barrier_params
        self.bounds = bounds
        self.config = config
        self.solver = QpSolver(solver_settings)

        self.n_agents = topology.n_agents
        self.neighbors = [sorted(in_neighbors(topology, i)) for i in range(self.n_agents)]
        self.leaders = [i for i in range(self.n_agents) if not self.neighbors[i]]
        instances = []
        for i in range(self.n_agents):
            per_agent = [ConstraintInstance("obstacle", idx) for idx in range(len(self.obstacles))]
            per_agent += [ConstraintInstance("neighbor", j) for j in self.neighbors[i]]
            instances.append(tuple(per_agent))
        self.layout = DecisionLayout(
            self.n_agents, model.state_dim, model.input_dim, config.horizon,
            tuple(instances), barrier_params.relative_degree)

        self._pos = list(model.position_indices)
        self._H, self._f = self._build_cost()
        self._lb_static, self._ub_static = self._build_bounds()
        self._qp_warm: QpSolution | None = None
        self._last_problem: QpProblem | None = None

    # ------------------------------------------------------------------
    # construction of the time-invariant QP pieces

    def _build_cost(self) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.config
        lay = self.layout
        C = self.model.output_matrix
        H = np.zeros((lay.dim, lay.dim))
        f = np.zeros(lay.dim)
        track_leaders = cfg.leader_mode == "tracking" and cfg.goal_output is not None
        for k in range(1, cfg.horizon + 1):
            W = cfg.P if k == cfg.horizon else cfg.Q
            M2 = 2.0 * C.T @ W @ C
            for i in range(self.n_agents):
                si = lay.x_slice(i, k)
                for j in self.neighbors[i]:
                    w_ij = self.topology.adjacency[i, j]
                    sj = lay.x_slice(j, k)
                    H[si, si] += w_ij * M2
                    H[sj, sj] += w_ij * M2
                    H[si, sj] -= w_ij * M2
                    H[sj, si] -= w_ij * M2
                if track_leaders and i in self.leaders:
                    H[si, si] += M2
                    f[si] -= 2.0 * C.T @ W @ cfg.goal_output
        R2 = 2.0 * cfg.R
        for k in range(cfg.horizon):
            for i in range(self.n_agents):
                su = lay.u_slice(i, k)
                H[su, su] += R2
        for key in lay.slack_keys():
            idx = lay.slack_index(*key)
            H[idx, idx] += 2.0 * cfg.R_w
            f[idx] -= 2.0 * cfg.R_w
        return H, f

    def _build_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lay = self.layout
        lb = np.full(lay.dim, -np.inf)
        ub = np.full(lay.dim, np.inf)
        pin_leaders = self.config.leader_mode == "pinned"
        for k in range(lay.horizon):
            for i in range(self.n_agents):
                su = lay.u_slice(i, k)
                if pin_leaders and i in self.leaders:
                    lb[su] = 0.0
                    ub[su] = 0.0
                else:
                    lb[su] = self.bounds.u_min
                    ub[su] = self.bounds.u_max
        for k in range(1, lay.horizon + 1):
            for i in range(self.n_agents):
                sx = lay.x_slice(i, k)
                lb[sx] = self.bounds.x_min
                ub[sx] = self.bounds.x_max
        return lb, ub

    # ------------------------------------------------------------------
    # nominal trajectories

    def zero_input_rollout(self, measured: np.ndarray) -> NominalTrajectory:
        """Initial nominal at the first time step: hold zero input."""
        measured = np.asarray(measured, dtype=float)
        T = self.config.horizon
        n, m = self.model.state_dim, self.model.input_dim
        states = np.zeros((self.n_agents, T + 1, n))
        inputs = np.zeros((self.n_agents, T, m))
        for i in range(self.n_agents):
            states[i, 0] = measured[i]
            for k in range(T):
                states[i, k + 1] = self.model.step(states[i, k], inputs[i, k])
        return NominalTrajectory(states=states, inputs=inputs)

    def shift_warm_start(self, trace: SqpTrace, new_measured: np.ndarray) -> NominalTrajectory:
        """Shift the previous optimal inputs by one step and re-roll the states.

        The last input is held for the appended step, and the states are
        regenerated from the new measured states through the true dynamics,
        so the nominal is anchored exactly at the measurement.
        """
        new_measured = np.asarray(new_measured, dtype=float)
        T = self.config.horizon
        inputs = np.concatenate([trace.inputs[:, 1:], trace.inputs[:, -1:]], axis=1)
        states = np.zeros_like(trace.states)
        for i in range(self.n_agents):
            states[i, 0] = new_measured[i]
            for k in range(T):
                states[i, k + 1] = self.model.step(states[i, k], inputs[i, k])
        return NominalTrajectory(states=states, inputs=inputs)

    def linearize_along(self, nominal: NominalTrajectory) -> list[list[LinearizedStep]]:
        """Per-agent, per-step linearizations of the plant along the nominal."""
        lins: list[list[LinearizedStep]] = []
        for i in range(self.n_agents):
            lins.append([self.model.linearize(nominal.states[i, k], nominal.inputs[i, k])
                         for k in range(self.config.horizon)])
        return lins

    # ------------------------------------------------------------------
    # QP assembly

    def _instance_discs(self, nominal: NominalTrajectory, agent: int,
                        inst: ConstraintInstance) -> tuple[np.ndarray, float]:
        T = self.config.horizon
        if inst.kind == "obstacle":
            obs = self.obstacles[inst.target]
            centers = np.tile(obs.center, (T + 1, 1))
            return centers, obs.radius
        centers = nominal.states[inst.target][:, self._pos]
        return centers, self.barrier_params.safe_distance

    def _instance_barriers(self, nominal: NominalTrajectory, agent: int,
                           inst: ConstraintInstance,
                           events: list[tuple[int, str, int, int]]) -> list[bar.AffineBarrier]:
        centers, radius = self._instance_discs(nominal, agent, inst)
        positions = nominal.states[agent][:, self._pos]
        barriers = []
        for step in range(self.config.horizon + 1):
            try:
                halfplane = bar.tangent_halfplane(positions[step], centers[step], radius)
            except bar.InfeasibleNominalError:
                # Nominal grazes or enters the disc: still emit the separating
                # halfplane through the nearest boundary point and flag it.
                halfplane = bar.supporting_halfplane(positions[step], centers[step], radius)
                events.append((agent, inst.kind, inst.target, step))
            barriers.append(halfplane)
        return barriers

    def assemble_qp(self, measured: np.ndarray, nominal: NominalTrajectory,
                    lins: list[list[LinearizedStep]] | None = None,
                    ) -> tuple[QpProblem, list[bar.SafetyRow], list[tuple[int, str, int, int]]]:
        """Build the convex subproblem around the given nominal trajectory."""
        measured = np.asarray(measured, dtype=float)
        if lins is None:
            lins = self.linearize_along(nominal)
        lay = self.layout
        T = self.config.horizon
        n = self.model.state_dim

        A_eq = np.zeros((self.n_agents * T * n, lay.dim))
        b_eq = np.zeros(self.n_agents * T * n)
        row = 0
        for i in range(self.n_agents):
            for k in range(T):
                lin = lins[i][k]
                rows = slice(row, row + n)
                A_eq[rows, lay.x_slice(i, k + 1)] = np.eye(n)
                A_eq[rows, lay.u_slice(i, k)] = -lin.B
                rhs = lin.drift
                if k == 0:
                    rhs = rhs + lin.A @ measured[i]
                else:
                    A_eq[rows, lay.x_slice(i, k)] = -lin.A
                b_eq[rows] = rhs
                row += n

        events: list[tuple[int, str, int, int]] = []
        safety_rows: list[bar.SafetyRow] = []
        for i in range(self.n_agents):
            for inst in lay.instances[i]:
                barriers = self._instance_barriers(nominal, i, inst, events)
                h0_at_x0 = barriers[0].evaluate(measured[i][self._pos])
                safety_rows.extend(bar.build_safety_rows(
                    agent=i, barriers_per_step=barriers, lin_steps=lins[i],
                    gammas=self.barrier_params.gammas, h0_at_x0=h0_at_x0,
                    x0=measured[i], layout=lay, kind=inst.kind, target=inst.target,
                    position_indices=tuple(self._pos)))

        if safety_rows:
            A_in = -np.vstack([r.coeffs for r in safety_rows])
            b_in = -np.asarray([r.rhs for r in safety_rows])
        else:
            A_in, b_in = None, None

        if self.config.trust_region is not None:
            lb, ub = self._trust_region_bounds(nominal)
        else:
            lb, ub = self._lb_static, self._ub_static
        problem = QpProblem(H=self._H, f=self._f.copy(), A_eq=A_eq, b_eq=b_eq,
                            A_in=A_in, b_in=b_in, lb=lb, ub=ub)
        return problem, safety_rows, events

    def _trust_region_bounds(self, nominal: NominalTrajectory) -> tuple[np.ndarray, np.ndarray]:
        radius = float(self.config.trust_region)
        lay = self.layout
        lb = self._lb_static.copy()
        ub = self._ub_static.copy()
        for i in range(self.n_agents):
            for k in range(lay.horizon):
                su = lay.u_slice(i, k)
                lb[su] = np.maximum(lb[su], nominal.inputs[i, k] - radius)
                ub[su] = np.minimum(ub[su], nominal.inputs[i, k] + radius)
            for k in range(1, lay.horizon + 1):
                sx = lay.x_slice(i, k)
                lb[sx] = np.maximum(lb[sx], nominal.states[i, k] - radius)
                ub[sx] = np.minimum(ub[sx], nominal.states[i, k] + radius)
        return lb, ub

    # ------------------------------------------------------------------
    # iteration loop

    def _extract(self, measured: np.ndarray, solution: QpSolution,
                 ) -> tuple[NominalTrajectory, np.ndarray]:
        lay = self.layout
        T = self.config.horizon
        states = np.zeros((self.n_agents, T + 1, self.model.state_dim))
        inputs = np.zeros((self.n_agents, T, self.model.input_dim))
        for i in range(self.n_agents):
            states[i, 0] = measured[i]
            for k in range(1, T + 1):
                states[i, k] = solution.z[lay.x_slice(i, k)]
            for k in range(T):
                inputs[i, k] = solution.z[lay.u_slice(i, k)]
        slacks = solution.z[lay.n_inputs + lay.n_states:].copy()
        return NominalTrajectory(states=states, inputs=inputs), slacks

    def _stack_outputs(self, nominal: NominalTrajectory) -> np.ndarray:
        C = self.model.output_matrix
        # predicted outputs for steps 0..horizon-1, all agents stacked
        return np.einsum("pn,akn->akp", C, nominal.states[:, :self.config.horizon]).ravel()

    def sqp_solve(self, time_step: int, measured: np.ndarray,
                  warm: NominalTrajectory) -> SqpTrace:
        """Iterate linearize / assemble / solve until the prediction settles.

        On a primal-infeasible subproblem the previous iterate is returned
        and the trace is marked; the closed loop treats that as a logged
        event, not a failure.
        """
        measured = np.asarray(measured, dtype=float)
        cfg = self.config
        nominal = warm
        slacks = np.ones(self.layout.n_slacks)
        records: list[SqpIteration] = []
        events: list[tuple[int, str, int, int]] = []
        converged = False
        infeasible = False
        y_prev = self._stack_outputs(nominal)
        last_problem: QpProblem | None = None
        last_solution: QpSolution | None = None

        for _ in range(cfg.s_max):
            lins = self.linearize_along(nominal)
            problem, _, new_events = self.assemble_qp(measured, nominal, lins)
            events.extend(new_events)
            solution = self.solver.solve(problem, warm=self._qp_warm)
            if solution.status is QpStatus.PRIMAL_INFEASIBLE:
                records.append(SqpIteration(
                    e_abs=float("nan"), e_rel=float("nan"),
                    qp_status=solution.status, qp_iterations=solution.iterations))
                infeasible = True
                break
            self._qp_warm = solution
            last_problem, last_solution = problem, solution
            nominal_next, slacks_next = self._extract(measured, solution)
            y_new = self._stack_outputs(nominal_next)
            e_abs = float(np.linalg.norm(y_new - y_prev))
            denom = float(np.linalg.norm(y_prev))
            e_rel = e_abs / denom if denom >= 1e-12 else 0.0
            records.append(SqpIteration(
                e_abs=e_abs, e_rel=e_rel,
                qp_status=solution.status, qp_iterations=solution.iterations))
            nominal, slacks, y_prev = nominal_next, slacks_next, y_new
            if e_abs <= cfg.eps_abs or e_rel <= cfg.eps_rel:
                converged = True
                break

        if last_problem is not None and last_solution is not None:
            refined = polish(last_problem, last_solution)
            if refined is not last_solution:
                self._qp_warm = refined
                nominal, slacks = self._extract(measured, refined)

        objective = self.cost_of(nominal.states, nominal.inputs, slacks)
        return SqpTrace(
            time_step=time_step, iterations=records, converged=converged,
            qp_infeasible=infeasible, states=nominal.states, inputs=nominal.inputs,
            slacks=slacks, objective=objective, nominal_inside_events=events)

    def cost_of(self, states: np.ndarray, inputs: np.ndarray, slacks: np.ndarray) -> float:
        """Full cost of a predicted trajectory, constant terms included."""
        cfg = self.config
        C = self.model.output_matrix
        track_leaders = cfg.leader_mode == "tracking" and cfg.goal_output is not None
        total = 0.0
        for k in range(cfg.horizon + 1):
            W = cfg.P if k == cfg.horizon else cfg.Q
            terminal = k == cfg.horizon
            for i in range(self.n_agents):
                y_i = C @ states[i, k]
                for j in self.neighbors[i]:
                    diff = y_i - C @ states[j, k]
                    total += self.topology.adjacency[i, j] * float(diff @ W @ diff)
                if track_leaders and i in self.leaders:
                    diff = y_i - cfg.goal_output
                    total += float(diff @ W @ diff)
                if not terminal:
                    u = inputs[i, k]
                    total += float(u @ cfg.R @ u)
        total += cfg.R_w * float(np.sum((slacks - 1.0) ** 2))
        return total

    # ------------------------------------------------------------------
    # feasibility margin diagnostics

    def feasibility_margins(self, nominal: NominalTrajectory) -> list[FeasibilityMargin]:
        """Input-authority margins for every constraint instance and step."""
        params = self.barrier_params
        r = params.relative_degree
        g = np.asarray(params.gammas)
        z = bar.z_coefficients(r, g)
        plo = self.bounds.x_min[self._pos]
        phi = self.bounds.x_max[self._pos]
        records: list[FeasibilityMargin] = []
        lins = self.linearize_along(nominal)
        events: list[tuple[int, str, int, int]] = []
        for i in range(self.n_agents):
            for inst in self.layout.instances[i]:
                barriers = self._instance_barriers(nominal, i, inst, events)
                for k in range(self.config.horizon):
                    form = bar.dhcbf_affine(barriers[k], lins[i][k], g, max(r - 1, 0),
                                            position_indices=tuple(self._pos))
                    eta = form.cu
                    eta_pos = np.maximum(eta, 0.0)
                    eta_neg = np.minimum(eta, 0.0)
                    u_min = float(eta_neg @ self.bounds.u_max + eta_pos @ self.bounds.u_min)
                    u_max = float(eta_pos @ self.bounds.u_max + eta_neg @ self.bounds.u_min)
                    decay = (1.0 - g[r - 1]) ** k
                    f_max = _box_supremum(z[0] * decay * barriers[0].a,
                                          z[0] * decay * barriers[0].b, plo, phi)
                    for v in range(1, r + 1):
                        if z[v] == 0.0:
                            continue
                        f_max += _box_supremum(-z[v] * decay * barriers[v].a,
                                               -z[v] * decay * barriers[v].b, plo, phi)
                    records.append(FeasibilityMargin(
                        agent=i, kind=inst.kind, target=inst.target, step=k,
                        eta=eta, u_min=u_min, u_max=u_max, f_max=f_max))
        return records


def _box_supremum(coeffs: np.ndarray, const: float, lo: np.ndarray, hi: np.ndarray) -> float:
    """Supremum of an affine function over a box, by coordinate sign split."""
    return float(const + np.maximum(coeffs * lo, coeffs * hi).sum())
