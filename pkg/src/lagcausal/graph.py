"""Lagged causal graphs over time-indexed variables.

A graph holds edges ``X^i_{t-lag} -> X^j_t`` with ``lag >= 1``.  The dense
form is a binary tensor ``adj`` of shape ``(V, V, max_lag)`` with

    adj[j, i, max_lag - lag] == 1

so the last slice holds lag 1 and slice 0 holds lag ``max_lag``.  Getting
this orientation wrong silently inverts every lag-resolved evaluation, so
all conversions go through :func:`lag_to_slice` / :func:`slice_to_lag`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import make_rng


class GraphError(ValueError):
    pass


def lag_to_slice(lag: int, max_lag: int) -> int:
    return max_lag - lag


def slice_to_lag(s: int, max_lag: int) -> int:
    return max_lag - s


@dataclass(frozen=True)
class LaggedGraph:
    """Immutable lagged DAG.

    Args:
        num_vars: number of variables ``V``.
        max_lag: maximum lag ``l_max >= 1``; fixes the tensor depth.
        edges: triples ``(i, j, lag)`` meaning ``X^i_{t-lag} -> X^j_t``.
            Stored sorted by ``(j, i, lag)`` with duplicates removed.
    """

    num_vars: int
    max_lag: int
    edges: tuple[tuple[int, int, int], ...] = field(default=())

    def __post_init__(self):
        if self.num_vars < 1:
            raise GraphError(f"num_vars must be >= 1, got {self.num_vars}")
        if self.max_lag < 1:
            raise GraphError(f"max_lag must be >= 1, got {self.max_lag}")
        clean = set()
        for e in self.edges:
            i, j, lag = (int(x) for x in e)
            if not (0 <= i < self.num_vars and 0 <= j < self.num_vars):
                raise GraphError(f"edge {e} references a variable outside 0..{self.num_vars - 1}")
            if not 1 <= lag <= self.max_lag:
                raise GraphError(f"edge {e} has lag outside 1..{self.max_lag}")
            clean.add((i, j, lag))
        object.__setattr__(self, "edges", tuple(sorted(clean, key=lambda e: (e[1], e[0], e[2]))))

    @property
    def adj(self) -> np.ndarray:
        a = np.zeros((self.num_vars, self.num_vars, self.max_lag), dtype=np.int8)
        for i, j, lag in self.edges:
            a[j, i, lag_to_slice(lag, self.max_lag)] = 1
        return a

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @classmethod
    def from_adj(cls, adj: np.ndarray) -> "LaggedGraph":
        adj = np.asarray(adj)
        if adj.ndim != 3 or adj.shape[0] != adj.shape[1]:
            raise GraphError(f"adjacency tensor must have shape (V, V, L), got {adj.shape}")
        if not np.isin(adj, (0, 1)).all():
            raise GraphError("adjacency tensor entries must be 0 or 1")
        max_lag = adj.shape[2]
        edges = [(int(i), int(j), slice_to_lag(int(s), max_lag)) for j, i, s in np.argwhere(adj == 1)]
        return cls(adj.shape[0], max_lag, tuple(edges))

    def padded_adj(self, v_max: int, max_lag: int | None = None) -> np.ndarray:
        """Zero-padded tensor of shape ``(v_max, v_max, max_lag)``.

        Slices are re-indexed by lag, so a lag-1 edge of a graph with a
        smaller ``max_lag`` still lands in the last slice.
        """
        max_lag = self.max_lag if max_lag is None else max_lag
        if v_max < self.num_vars:
            raise GraphError(f"cannot pad {self.num_vars} variables into v_max={v_max}")
        if any(lag > max_lag for _, _, lag in self.edges):
            raise GraphError(f"graph has edges beyond max_lag={max_lag}")
        a = np.zeros((v_max, v_max, max_lag), dtype=np.int8)
        for i, j, lag in self.edges:
            a[j, i, lag_to_slice(lag, max_lag)] = 1
        return a

    def to_json(self) -> dict:
        return {
            "num_vars": self.num_vars,
            "max_lag": self.max_lag,
            "edges": [list(e) for e in self.edges],
        }

    @classmethod
    def from_json(cls, d: dict) -> "LaggedGraph":
        try:
            return cls(int(d["num_vars"]), int(d["max_lag"]), tuple(tuple(e) for e in d["edges"]))
        except (KeyError, TypeError) as exc:
            raise GraphError(f"malformed graph JSON: {exc}") from exc


@dataclass(frozen=True)
class GraphConfig:
    num_vars: int
    max_lag: int = 3
    edge_density: float = 0.2
    allow_self_lagged: bool = True
    min_lag: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.num_vars < 2:
            raise GraphError(f"num_vars must be >= 2, got {self.num_vars}")
        if not 0.0 < self.edge_density <= 1.0:
            raise GraphError(f"edge_density must lie in (0, 1], got {self.edge_density}")
        if self.min_lag < 1:
            raise GraphError(f"min_lag must be >= 1, got {self.min_lag}")
        if self.min_lag > self.max_lag:
            raise GraphError(f"min_lag={self.min_lag} exceeds max_lag={self.max_lag}")


def sample_er_graph(cfg: GraphConfig) -> LaggedGraph:
    """Erdos-Renyi lagged graph: every admissible ``(i, j, lag)`` independently
    with probability ``edge_density``.

    Isolated variables are allowed; nothing forces a parent per variable.
    """
    cfg.validate()
    v, lmax = cfg.num_vars, cfg.max_lag
    rng = make_rng(cfg.seed)
    # one uniform per (j, i, slice) cell, drawn in C order
    u = rng.random((v, v, lmax))
    keep = u < cfg.edge_density
    if not cfg.allow_self_lagged:
        keep[np.arange(v), np.arange(v), :] = False
    # slices holding lags < min_lag are the last (min_lag - 1) ones
    if cfg.min_lag > 1:
        keep[:, :, lmax - cfg.min_lag + 1:] = False
    return LaggedGraph.from_adj(keep.astype(np.int8))


def summary_graph(g: LaggedGraph) -> np.ndarray:
    """``S[j, i] = 1`` iff ``i`` causes ``j`` at some lag."""
    return g.adj.any(axis=2).astype(np.int8)


def parents_of(g: LaggedGraph, j: int) -> list[tuple[int, int]]:
    """Lagged parents of variable ``j`` as ``(i, lag)`` sorted by ``(lag, i)``."""
    if not 0 <= j < g.num_vars:
        raise IndexError(f"variable {j} out of range for a {g.num_vars}-variable graph")
    return sorted(((i, lag) for i, jj, lag in g.edges if jj == j), key=lambda p: (p[1], p[0]))
