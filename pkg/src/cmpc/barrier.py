"""Convexified safety constraints: tangent halfplanes and barrier recursions.

Circular keep-out regions (static obstacles, or neighbours treated as discs)
are replaced by supporting halfplanes at the nearest boundary point from a
nominal position. The halfplane margin is then propagated through the plant
linearization by a discrete high-order barrier recursion and flattened into
single linear inequality rows with per-row relaxation slacks.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .dynamics import LinearizedStep

__all__ = [
    "DegenerateGeometryError",
    "InfeasibleNominalError",
    "CircularObstacle",
    "AffineBarrier",
    "AffineForm",
    "BarrierParams",
    "SafetyRow",
    "distance_margin",
    "nearest_boundary_point",
    "tangent_halfplane",
    "supporting_halfplane",
    "z_coefficients",
    "dhcbf_affine",
    "build_safety_rows",
]

_DEGENERATE_TOL = 1e-12


class DegenerateGeometryError(Exception):
    """Nominal position coincides with a disc centre; no projection direction."""


class InfeasibleNominalError(Exception):
    """Nominal position lies inside or on a keep-out disc."""


@dataclass(frozen=True)
class CircularObstacle:
    """Static circular keep-out region in the position plane."""

    center: np.ndarray
    radius: float

    def __post_init__(self) -> None:
        center = np.array(self.center, dtype=float)
        if center.shape != (2,):
            raise ValueError(f"center must be a 2-vector, got shape {center.shape}")
        if self.radius <= 0.0:
            raise ValueError(f"radius must be strictly positive, got {self.radius}")
        center.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radius", float(self.radius))

    def margin(self, p: np.ndarray) -> float:
        """Quadratic clearance ``|p - center|^2 - radius^2``."""
        return distance_margin(p, self.center, self.radius)


def distance_margin(p: np.ndarray, center: np.ndarray, radius: float) -> float:
    """Quadratic clearance of a point from a disc: ``|p - c|^2 - r^2``."""
    d = np.asarray(p, dtype=float) - np.asarray(center, dtype=float)
    return float(d @ d - radius * radius)


@dataclass(frozen=True)
class AffineBarrier:
    """Linear safety margin ``h(p) = a . p + b`` on the position plane.

    The halfplane ``h >= 0`` is a supporting halfplane of a disc exterior, so
    ``h(p) >= 0`` implies the point is outside the disc.
    """

    a: np.ndarray
    b: float

    def __post_init__(self) -> None:
        a = np.array(self.a, dtype=float)
        if a.shape != (2,):
            raise ValueError(f"gradient must be a 2-vector, got shape {a.shape}")
        if float(a @ a) == 0.0:
            raise ValueError("gradient must be non-zero")
        a.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", float(self.b))

    def evaluate(self, p: np.ndarray) -> float:
        return float(self.a @ np.asarray(p, dtype=float) + self.b)

    def state_gradient(self, state_dim: int, position_indices: tuple[int, int] = (0, 1)) -> np.ndarray:
        """Embed the position gradient into a full state-space vector."""
        g = np.zeros(state_dim)
        g[list(position_indices)] = self.a
        return g


@dataclass(frozen=True)
class BarrierParams:
    """Relaxation rates, relative degree and inter-agent safe distance."""

    gammas: tuple[float, ...]
    relative_degree: int
    safe_distance: float

    def __post_init__(self) -> None:
        gammas = tuple(float(g) for g in self.gammas)
        if self.relative_degree < 1:
            raise ValueError(f"relative degree must be >= 1, got {self.relative_degree}")
        if len(gammas) != self.relative_degree:
            raise ValueError(
                f"need {self.relative_degree} gamma values, got {len(gammas)}")
        if any(not 0.0 < g <= 1.0 for g in gammas):
            raise ValueError(f"every gamma must lie in (0, 1], got {gammas}")
        if self.safe_distance <= 0.0:
            raise ValueError(f"safe distance must be positive, got {self.safe_distance}")
        object.__setattr__(self, "gammas", gammas)
        object.__setattr__(self, "safe_distance", float(self.safe_distance))


@dataclass(frozen=True)
class SafetyRow:
    """One linear inequality ``coeffs . z >= rhs`` on the flat decision vector.

    ``slack_coefficient`` is the scale on the row's relaxation variable; the
    entry of ``coeffs`` at ``slack_index`` equals its negative.
    """

    coeffs: np.ndarray
    rhs: float
    agent: int
    kind: str
    target: int
    order: int
    step: int
    slack_index: int
    slack_coefficient: float


def nearest_boundary_point(p: np.ndarray, obstacle: CircularObstacle) -> np.ndarray:
    """Closest point on the disc boundary along the ray from the centre to ``p``."""
    p = np.asarray(p, dtype=float)
    delta = p - obstacle.center
    dist = float(np.linalg.norm(delta))
    if dist < _DEGENERATE_TOL:
        raise DegenerateGeometryError(
            f"point {p} coincides with obstacle centre {obstacle.center}")
    return obstacle.center + obstacle.radius * delta / dist


def supporting_halfplane(p: np.ndarray, center: np.ndarray, radius: float) -> AffineBarrier:
    """Halfplane through the nearest boundary point with outward normal.

    Does not require ``p`` to lie outside the disc; for interior points the
    returned margin is negative at ``p`` and the halfplane pushes outward.
    """
    center = np.asarray(center, dtype=float)
    boundary = nearest_boundary_point(p, CircularObstacle(center=center, radius=radius))
    a = boundary - center
    b = -(radius * radius - float(center @ center) + float(boundary @ center))
    return AffineBarrier(a=a, b=b)


def tangent_halfplane(p: np.ndarray, center: np.ndarray, radius: float) -> AffineBarrier:
    """Supporting halfplane of the disc exterior at the boundary point nearest ``p``.

    ``h`` vanishes at the tangent point and is positive at ``p``; the region
    ``h >= 0`` is contained in the disc exterior. Raises
    :class:`InfeasibleNominalError` when ``p`` is inside or on the disc.
    """
    p = np.asarray(p, dtype=float)
    center = np.asarray(center, dtype=float)
    if float(np.linalg.norm(p - center)) <= radius:
        raise InfeasibleNominalError(
            f"point {p} is not strictly outside the disc at {center} with radius {radius}")
    return supporting_halfplane(p, center, radius)


def z_coefficients(order: int, gammas) -> np.ndarray:
    """Coefficients that flatten the barrier recursion of the given order.

    Returns an array ``Z`` of length ``order + 1``. For ``nu <= order - 2``,
    ``Z[nu]`` sums the products of all size-``(order - nu - 1)`` subsets of
    ``(gamma_1 - 1, ..., gamma_{order-1} - 1)``; ``Z[order - 1]`` is ``-1``
    for ``order >= 2`` and ``1`` for ``order == 1``; ``Z[order]`` is ``0``.
    """
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    g = np.asarray(gammas, dtype=float).ravel()
    if g.size < order - 1:
        raise ValueError(f"need at least {order - 1} gamma values, got {g.size}")
    shifted = g[:order - 1] - 1.0
    z = np.zeros(order + 1)
    for nu in range(order - 1):
        size = order - nu - 1
        z[nu] = sum(float(np.prod(c)) for c in itertools.combinations(shifted, size))
    z[order - 1] = -1.0 if order >= 2 else 1.0
    return z


@dataclass(frozen=True)
class AffineForm:
    """Affine function ``cx . x + cu . u + c0`` of one step's state and input."""

    cx: np.ndarray
    cu: np.ndarray
    c0: float

    def evaluate(self, x: np.ndarray, u: np.ndarray) -> float:
        return float(self.cx @ x + self.cu @ u + self.c0)


def dhcbf_affine(
    h0: AffineBarrier,
    lin: LinearizedStep,
    gammas,
    order: int,
    position_indices: tuple[int, int] = (0, 1),
) -> AffineForm:
    """Barrier recursion of the given order along the linearized step.

    Applies ``h_l = h_{l-1} o f - h_{l-1} + gamma_l h_{l-1}`` with the plant
    step replaced by the affine model of ``lin``; the input is held fixed
    across nested applications, so the result is affine in one step's
    ``(x, u)``. ``order == 0`` returns the embedded halfplane itself.
    """
    g = np.asarray(gammas, dtype=float).ravel()
    if order < 0:
        raise ValueError(f"order must be >= 0, got {order}")
    if order > g.size:
        raise ValueError(f"order {order} exceeds the {g.size} available gamma values")
    n = lin.A.shape[0]
    cx = h0.state_gradient(n, position_indices)
    cu = np.zeros(lin.B.shape[1])
    c0 = h0.b
    drift = lin.drift
    for level in range(order):
        decay = g[level] - 1.0
        cx_next = lin.A.T @ cx + decay * cx
        cu_next = lin.B.T @ cx + cu + decay * cu
        c0_next = float(cx @ drift) + c0 + decay * c0
        cx, cu, c0 = cx_next, cu_next, c0_next
    return AffineForm(cx=cx, cu=cu, c0=c0)


def build_safety_rows(
    agent: int,
    barriers_per_step,
    lin_steps,
    gammas,
    h0_at_x0: float,
    x0: np.ndarray,
    layout,
    kind: str,
    target: int,
    position_indices: tuple[int, int] = (0, 1),
) -> list[SafetyRow]:
    """Linear inequality rows for one constraint instance of one agent.

    Emits one row per (order ``l``, prediction step ``k``) combining the
    input-explicit barrier of order ``l - 1`` at step ``k`` with decayed
    halfplane margins at steps ``1..l`` and the relaxation slack scaled by
    the known margin at the measured state. ``barriers_per_step[v]`` is the
    halfplane computed at the nominal state of step ``v``; ``x0`` is the
    measured state, fixed for the whole horizon.

    ``layout`` must provide ``dim``, ``x_slice(agent, k)`` for ``k >= 1``,
    ``u_slice(agent, k)`` and ``slack_index(agent, kind, target, order, k)``.
    """
    g = np.asarray(gammas, dtype=float).ravel()
    r = g.size
    horizon = len(lin_steps)
    if len(barriers_per_step) < max(horizon, r + 1):
        raise ValueError("need a halfplane for every referenced prediction step")
    pos = list(position_indices)
    rows: list[SafetyRow] = []
    z_tables = {l: z_coefficients(l, g) for l in range(1, r + 1)}
    for l in range(1, r + 1):
        z = z_tables[l]
        gamma_l = g[l - 1]
        for k in range(horizon):
            coeffs = np.zeros(layout.dim)
            const = 0.0
            decay = (1.0 - gamma_l) ** k
            form = dhcbf_affine(barriers_per_step[k], lin_steps[k], g, l - 1,
                                position_indices=position_indices)
            if k == 0:
                const += float(form.cx @ x0)
            else:
                coeffs[layout.x_slice(agent, k)] += form.cx
            coeffs[layout.u_slice(agent, k)] += form.cu
            const += form.c0
            for v in range(1, l + 1):
                if z[v] == 0.0:
                    continue
                bar = barriers_per_step[v]
                scale = z[v] * decay
                coeffs[layout.x_slice(agent, v)][pos] += scale * bar.a
                const += scale * bar.b
            slack_coefficient = float(z[0] * decay * h0_at_x0)
            slack_index = layout.slack_index(agent, kind, target, l, k)
            coeffs[slack_index] = -slack_coefficient
            rows.append(SafetyRow(
                coeffs=coeffs, rhs=-const, agent=agent, kind=kind, target=target,
                order=l, step=k, slack_index=slack_index,
                slack_coefficient=slack_coefficient,
            ))
    return rows
