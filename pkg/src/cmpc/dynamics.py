"""Discrete-time plant models with exact stepping and analytic Jacobians."""
from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np

__all__ = ["PlantModel", "UnicycleModel", "LinearizedStep"]


@dataclass(frozen=True)
class LinearizedStep:
    """First-order model of one plant step around a nominal point.

    Predicts the next state as ``x_next + A (x - x_nom) + B (u - u_nom)``,
    where ``x_next = f(x_nom, u_nom)`` is the exact step at the nominal.
    """

    A: np.ndarray
    B: np.ndarray
    x_nom: np.ndarray
    u_nom: np.ndarray
    x_next: np.ndarray

    @property
    def drift(self) -> np.ndarray:
        """Constant term ``x_next - A x_nom - B u_nom`` of the affine map."""
        return self.x_next - self.A @ self.x_nom - self.B @ self.u_nom

    def predict(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.x_next + self.A @ (x - self.x_nom) + self.B @ (u - self.u_nom)


class PlantModel(abc.ABC):
    """Deterministic discrete-time plant with a linear output map.

    Implementations are immutable value-like objects; all operations are
    pure. ``position_indices`` names the state components that carry planar
    position, which safety constraints act on.
    """

    state_dim: int
    input_dim: int
    output_dim: int
    position_indices: tuple[int, int] = (0, 1)

    @abc.abstractmethod
    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Exact evaluation of the plant map ``f(x, u)``."""

    @abc.abstractmethod
    def jacobians(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(A, B)`` with ``A = df/dx`` and ``B = df/du`` at ``(x, u)``."""

    @property
    @abc.abstractmethod
    def output_matrix(self) -> np.ndarray:
        """Output map ``C`` with shape ``(output_dim, state_dim)``."""

    def output(self, x: np.ndarray) -> np.ndarray:
        x = self._check_state(x)
        return self.output_matrix @ x

    def linearize(self, x: np.ndarray, u: np.ndarray) -> LinearizedStep:
        A, B = self.jacobians(x, u)
        return LinearizedStep(A=A, B=B, x_nom=np.array(x, dtype=float),
                              u_nom=np.array(u, dtype=float), x_next=self.step(x, u))

    def _check_state(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.state_dim,):
            raise ValueError(f"state must have shape ({self.state_dim},), got {x.shape}")
        return x

    def _check_input(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.input_dim,):
            raise ValueError(f"input must have shape ({self.input_dim},), got {u.shape}")
        return u


class UnicycleModel(PlantModel):
    """Planar unicycle with state ``(p_x, p_y, theta, v)``.

    Inputs are angular rate and longitudinal acceleration, integrated with a
    forward-Euler step of length ``dt``. The output selects ``(p_x, theta, v)``.
    The heading angle is not wrapped; it evolves on the real line so that
    output differences stay continuous.
    """

    state_dim = 4
    input_dim = 2
    output_dim = 3
    position_indices = (0, 1)

    def __init__(self, dt: float):
        if dt <= 0.0:
            raise ValueError(f"dt must be positive, got {dt}")
        self.dt = float(dt)
        self._C = np.array([[1.0, 0.0, 0.0, 0.0],
                            [0.0, 0.0, 1.0, 0.0],
                            [0.0, 0.0, 0.0, 1.0]])
        self._C.setflags(write=False)

    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        x = self._check_state(x)
        u = self._check_input(u)
        px, py, theta, v = x
        dt = self.dt
        return np.array([
            px + v * np.cos(theta) * dt,
            py + v * np.sin(theta) * dt,
            theta + u[0] * dt,
            v + u[1] * dt,
        ])

    def jacobians(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = self._check_state(x)
        self._check_input(u)
        _, _, theta, v = x
        dt = self.dt
        A = np.eye(4)
        A[0, 2] = -v * np.sin(theta) * dt
        A[0, 3] = np.cos(theta) * dt
        A[1, 2] = v * np.cos(theta) * dt
        A[1, 3] = np.sin(theta) * dt
        B = np.zeros((4, 2))
        B[2, 0] = dt
        B[3, 1] = dt
        return A, B

    @property
    def output_matrix(self) -> np.ndarray:
        return self._C

    def __repr__(self) -> str:
        return f"UnicycleModel(dt={self.dt})"
