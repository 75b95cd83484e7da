"""Oriented graphs and incidence matrices for physical and communication networks."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import networkx as nx
import numpy as np

__all__ = [
    "Graph",
    "GraphError",
    "build_incidence",
    "is_connected",
    "line_graph",
    "ring_graph",
    "complete_graph",
    "random_regular",
    "apply_incidence",
    "apply_transpose",
]

MAX_REGULAR_ATTEMPTS = 100


class GraphError(ValueError):
    """Raised for malformed graphs or infeasible generator requests."""


@dataclass(frozen=True)
class Graph:
    """Undirected graph with a fixed orientation per edge.

    Each edge is stored as ``(head, tail)``; the orientation only fixes sign
    conventions of the incidence matrix.
    """

    n: int
    edges: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise GraphError(f"node count must be a positive integer, got {self.n!r}")
        edges = tuple((int(h), int(t)) for h, t in self.edges)
        for l, (h, t) in enumerate(edges):
            if not (0 <= h < self.n and 0 <= t < self.n):
                raise GraphError(f"edge {l} = ({h}, {t}) has a node index outside [0, {self.n})")
            if h == t:
                raise GraphError(f"edge {l} is a self-loop on node {h}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "edges", edges)

    @property
    def m(self) -> int:
        return len(self.edges)

    @cached_property
    def incidence(self) -> np.ndarray:
        E = np.zeros((self.n, self.m))
        for l, (h, t) in enumerate(self.edges):
            E[h, l] = 1.0
            E[t, l] = -1.0
        E.setflags(write=False)
        return E

    def degrees(self) -> np.ndarray:
        return np.abs(self.incidence).sum(axis=1).astype(int)

    def to_networkx(self) -> nx.Graph:
        G = nx.Graph()
        G.add_nodes_from(range(self.n))
        G.add_edges_from(self.edges)
        return G

    def to_dict(self) -> dict:
        return {"n": self.n, "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_dict(cls, data: dict) -> "Graph":
        return cls(int(data["n"]), tuple(tuple(e) for e in data["edges"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Graph":
        return cls.from_dict(json.loads(text))


def build_incidence(g: Graph) -> np.ndarray:
    """Dense ``n x m`` incidence matrix: +1 at each edge's head, -1 at its tail."""
    return g.incidence


def is_connected(g: Graph) -> bool:
    """True iff every node is reachable from node 0, ignoring edge orientation."""
    return nx.is_connected(g.to_networkx())


def line_graph(n: int) -> Graph:
    if n < 2:
        raise GraphError("line graph needs n >= 2")
    return Graph(n, tuple((i, i + 1) for i in range(n - 1)))


def ring_graph(n: int) -> Graph:
    if n < 3:
        raise GraphError("ring graph needs n >= 3")
    return Graph(n, tuple((i, (i + 1) % n) for i in range(n)))


def complete_graph(n: int) -> Graph:
    if n < 2:
        raise GraphError("complete graph needs n >= 2")
    return Graph(n, tuple((i, j) for i in range(n) for j in range(i + 1, n)))


def random_regular(n: int, degree: int, seed: int) -> Graph:
    """Connected random ``degree``-regular graph, deterministic in ``seed``.

    Draws are retried (with derived seeds) until the graph is connected, up to
    ``MAX_REGULAR_ATTEMPTS`` times.
    """
    if n < 2:
        raise GraphError("random regular graph needs n >= 2")
    if degree < 1 or degree >= n or (n * degree) % 2:
        raise GraphError(f"no {degree}-regular graph on {n} nodes (need 1 <= degree < n, n*degree even)")
    rng = np.random.default_rng(seed)
    for _ in range(MAX_REGULAR_ATTEMPTS):
        G = nx.random_regular_graph(degree, n, seed=int(rng.integers(2**31 - 1)))
        if nx.is_connected(G):
            edges = sorted((min(a, b), max(a, b)) for a, b in G.edges())
            return Graph(n, tuple(edges))
    raise GraphError(f"could not draw a connected {degree}-regular graph on {n} nodes "
                     f"in {MAX_REGULAR_ATTEMPTS} attempts")


def apply_incidence(E: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Node injections ``E v`` for edge values ``v`` of shape ``(..., m)``."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != E.shape[1]:
        raise ValueError(f"edge vector has length {v.shape[-1]}, incidence has {E.shape[1]} edges")
    return v @ E.T


def apply_transpose(E: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Edge differences ``E^T y`` (head minus tail) for node values ``(..., n)``."""
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != E.shape[0]:
        raise ValueError(f"node vector has length {y.shape[-1]}, incidence has {E.shape[0]} nodes")
    return y @ E
