"""Anchor selection: stationary distribution of the graph walk and its modes."""

from dataclasses import dataclass

import numpy as np

from .graph import NeighborGraph, NormalizedOperator


@dataclass
class StationaryDistribution:
    pi: np.ndarray
    iterations_used: int
    converged: bool
    l1_delta: float


@dataclass
class AnchorSet:
    """Local maxima of the stationary distribution, sorted by probability."""

    anchor_ids: np.ndarray
    pi_values: np.ndarray

    def __len__(self):
        return len(self.anchor_ids)


def power_iteration(
    operator: NormalizedOperator,
    tolerance: float = 1e-10,
    max_iterations: int = 10000,
    damping: float | None = None,
) -> StationaryDistribution:
    """Iterate pi <- pi P from the uniform distribution until the L1 change
    drops below tolerance.

    The vector is renormalized to sum 1 every step since isolated nodes leak
    mass. Plain iteration can oscillate on bipartite components; the optional
    damping factor beta mixes in the uniform distribution (pi <- beta*pi*P +
    (1-beta)*u) at the cost of deviating from the pi ~ degree law.
    """
    if operator.kind != "stochastic":
        raise ValueError("power_iteration needs the row-stochastic operator")
    if operator.matrix.nnz == 0:
        raise ValueError("graph has no edges; the walk is undefined")
    if damping is not None and not 0.0 < damping <= 1.0:
        raise ValueError(f"damping must be in (0, 1], got {damping}")
    n = operator.n
    pt = operator.matrix.T.tocsr()  # pi @ P as a csr matvec
    pi = np.full(n, 1.0 / n)
    delta = np.inf
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        nxt = pt @ pi
        if damping is not None and damping < 1.0:
            nxt = damping * nxt + (1.0 - damping) / n
        nxt /= nxt.sum()
        delta = float(np.abs(nxt - pi).sum())
        pi = nxt
        if delta <= tolerance:
            return StationaryDistribution(pi, iterations, True, delta)
    return StationaryDistribution(pi, iterations, False, delta)


def local_maxima(graph: NeighborGraph, pi: np.ndarray) -> list[int]:
    """Nodes (degree > 0) whose pi dominates every neighbor.

    An exact-tie plateau (connected nodes with identical pi, none of which has
    a strictly greater neighbor) contributes its smallest index only.
    """
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != (graph.n,):
        raise ValueError(f"pi must have length {graph.n}")
    indptr, cols = graph.adjacency.indptr, graph.adjacency.indices
    visited = np.zeros(graph.n, dtype=bool)
    out = []
    for start in range(graph.n):
        if visited[start] or indptr[start] == indptr[start + 1]:
            continue
        # flood the exact-equality plateau containing `start`
        level = pi[start]
        plateau = [start]
        visited[start] = True
        dominated = False
        q = 0
        while q < len(plateau):
            i = plateau[q]
            q += 1
            for j in cols[indptr[i] : indptr[i + 1]]:
                if pi[j] > level:
                    dominated = True
                elif pi[j] == level and not visited[j]:
                    visited[j] = True
                    plateau.append(j)
        if not dominated:
            out.append(min(plateau))
    out.sort()
    return out


def select_anchors(graph: NeighborGraph, pi: np.ndarray, count: int) -> AnchorSet:
    """The `count` local maxima with largest pi, descending (ties: lower index).

    Returns fewer when maxima are scarce.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    maxima = np.asarray(local_maxima(graph, pi), dtype=np.int64)
    if maxima.size == 0:
        return AnchorSet(anchor_ids=maxima, pi_values=np.zeros(0))
    order = np.lexsort((maxima, -pi[maxima]))[:count]
    chosen = maxima[order]
    return AnchorSet(anchor_ids=chosen, pi_values=np.asarray(pi)[chosen])


def save_anchors(anchor_set: AnchorSet, path) -> None:
    """Text dump: one "id pi" line per anchor, descending pi."""
    with open(path, "w") as fh:
        for i, p in zip(anchor_set.anchor_ids, anchor_set.pi_values):
            fh.write(f"{i} {p:.9g}\n")


def load_anchors(path) -> AnchorSet:
    ids, pis = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if parts:
                ids.append(int(parts[0]))
                pis.append(float(parts[1]))
    return AnchorSet(
        anchor_ids=np.asarray(ids, dtype=np.int64), pi_values=np.asarray(pis)
    )
