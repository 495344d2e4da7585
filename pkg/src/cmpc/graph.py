"""Directed communication topology among agents."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Topology", "laplacian", "in_neighbors", "has_spanning_tree"]


@dataclass(frozen=True)
class Topology:
    """Weighted directed communication graph.

    ``adjacency[i, j] > 0`` means there is a directed edge ``j -> i``, i.e.
    agent ``i`` receives information from agent ``j``. The diagonal must be
    zero and all weights non-negative. Instances are immutable and safe to
    share between threads.
    """

    adjacency: np.ndarray

    def __post_init__(self) -> None:
        adj = np.array(self.adjacency, dtype=float)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ValueError(f"adjacency must be a square matrix, got shape {adj.shape}")
        if adj.shape[0] == 0:
            raise ValueError("topology needs at least one agent")
        if np.any(adj < 0.0):
            raise ValueError("edge weights must be non-negative")
        if np.any(np.diag(adj) != 0.0):
            raise ValueError("self-loops (non-zero diagonal entries) are not allowed")
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)

    @property
    def n_agents(self) -> int:
        return self.adjacency.shape[0]


def laplacian(topology: Topology) -> np.ndarray:
    """In-degree Laplacian ``L = D - A``. Every row sums to exactly zero."""
    adj = topology.adjacency
    return np.diag(adj.sum(axis=1)) - adj


def in_neighbors(topology: Topology, agent: int) -> set[int]:
    """Set of agents whose information reaches ``agent`` directly."""
    if not 0 <= agent < topology.n_agents:
        raise IndexError(f"agent index {agent} out of range [0, {topology.n_agents})")
    return set(np.flatnonzero(topology.adjacency[agent] > 0.0).tolist())


def has_spanning_tree(topology: Topology) -> bool:
    """True when some root node has a directed path to every other node.

    Edge direction follows information flow: ``adjacency[i, j] > 0`` is an
    edge from ``j`` to ``i``.
    """
    successors = topology.adjacency.T > 0.0  # successors[u, v]: edge u -> v
    n = topology.n_agents
    for root in range(n):
        seen = np.zeros(n, dtype=bool)
        seen[root] = True
        stack = [root]
        while stack:
            u = stack.pop()
            for v in np.flatnonzero(successors[u] & ~seen):
                seen[v] = True
                stack.append(int(v))
        if seen.all():
            return True
    return False
