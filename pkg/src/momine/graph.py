"""Reciprocal kNN graph over a feature set, plus its normalized operators.

The adjacency keeps an edge only when both endpoints list each other among
their k most similar items; weights are the clipped-cosine similarity cubed.
Everything is stored CSR via scipy.sparse and is immutable once built.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import KTooLarge
from .features import FeatureSet

GRAPH_MAGIC = "MOMG"


@dataclass
class NeighborGraph:
    """Sparse symmetric adjacency with zero diagonal and non-negative weights."""

    n: int
    k: int
    adjacency: sp.csr_matrix
    degrees: np.ndarray

    @property
    def csr_rowptr(self) -> np.ndarray:
        return self.adjacency.indptr

    @property
    def csr_cols(self) -> np.ndarray:
        return self.adjacency.indices

    @property
    def csr_vals(self) -> np.ndarray:
        return self.adjacency.data

    def neighbors(self, i: int) -> np.ndarray:
        return self.adjacency.indices[self.adjacency.indptr[i] : self.adjacency.indptr[i + 1]]

    @classmethod
    def from_edges(cls, n: int, k: int, edges) -> "NeighborGraph":
        """Build a graph from (i, j, w) triples with i < j; each edge is mirrored."""
        rows, cols, vals = [], [], []
        for i, j, w in edges:
            if not 0 <= i < j < n:
                raise ValueError(f"edge ({i},{j}) must satisfy 0 <= i < j < n")
            if w <= 0:
                raise ValueError(f"edge ({i},{j}) must have positive weight, got {w}")
            rows.extend((i, j))
            cols.extend((j, i))
            vals.extend((w, w))
        adj = sp.csr_matrix(
            (np.asarray(vals, dtype=np.float64), (rows, cols)), shape=(n, n)
        )
        degrees = np.asarray(adj.sum(axis=1)).ravel()
        return cls(n=n, k=k, adjacency=adj, degrees=degrees)


@dataclass
class NormalizedOperator:
    """Either the symmetric D^-1/2 A D^-1/2 or the row-stochastic D^-1 A."""

    kind: str  # "symmetric" | "stochastic"
    matrix: sp.csr_matrix
    n: int
    isolated_nodes: int


def euclidean_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Clipped-cosine similarity cubed between two unit vectors: max(a.b, 0)^3."""
    return float(max(float(np.dot(a, b)), 0.0) ** 3)


def _similarity_block(x_block: np.ndarray, x_all: np.ndarray) -> np.ndarray:
    return np.clip(x_block @ x_all.T, 0.0, None) ** 3


def knn_search(features: FeatureSet, k: int, block: int = 1024):
    """Exact brute-force top-k neighbors by similarity for every item.

    Returns (neighbors, sims), both (n, k), ranked by descending similarity
    with ties broken by ascending index. The item itself is excluded.
    """
    n = features.n
    if not 1 <= k < n:
        raise KTooLarge(f"k={k} must satisfy 1 <= k < n={n}")
    x = features.data
    idx = np.arange(n)
    neighbors = np.empty((n, k), dtype=np.int64)
    sims = np.empty((n, k), dtype=np.float64)
    for start in range(0, n, block):
        stop = min(start + block, n)
        s = _similarity_block(x[start:stop], x)
        for r in range(start, stop):
            row = s[r - start]
            row[r] = -np.inf  # exclude self
            order = np.lexsort((idx, -row))[:k]
            neighbors[r] = order
            sims[r] = row[order]
    return neighbors, sims


def build_reciprocal_graph(features: FeatureSet, k: int) -> NeighborGraph:
    """Adjacency with an edge (i,j) iff i and j are mutually in each other's top-k.

    The weight is the pair similarity, computed once per unordered pair so the
    matrix is symmetric bit-for-bit. Pairs with zero similarity are dropped
    (their adjacency entry would be zero anyway).
    """
    n = features.n
    nbrs, _ = knn_search(features, k)
    rows = np.repeat(np.arange(n), k)
    listed = sp.csr_matrix(
        (np.ones(n * k, dtype=bool), (rows, nbrs.ravel())), shape=(n, n)
    )
    mutual = sp.triu(listed.multiply(listed.T), k=1).tocoo()
    ii, jj = mutual.row, mutual.col
    dots = np.einsum("ij,ij->i", features.data[ii], features.data[jj])
    w = np.clip(dots, 0.0, None) ** 3
    keep = w > 0
    ii, jj, w = ii[keep], jj[keep], w[keep]
    adj = sp.csr_matrix(
        (np.concatenate([w, w]), (np.concatenate([ii, jj]), np.concatenate([jj, ii]))),
        shape=(n, n),
    )
    degrees = np.asarray(adj.sum(axis=1)).ravel()
    return NeighborGraph(n=n, k=k, adjacency=adj, degrees=degrees)


def normalize_graph(graph: NeighborGraph, kind: str) -> NormalizedOperator:
    """Build D^-1/2 A D^-1/2 ("symmetric") or D^-1 A ("stochastic").

    Isolated nodes yield all-zero rows/columns; their count is reported on the
    returned operator.
    """
    if kind not in ("symmetric", "stochastic"):
        raise ValueError(f"kind must be 'symmetric' or 'stochastic', got {kind!r}")
    d = graph.degrees
    isolated = int(np.sum(d == 0))
    inv = np.zeros_like(d)
    nz = d > 0
    coo = graph.adjacency.tocoo()
    if kind == "symmetric":
        inv[nz] = 1.0 / np.sqrt(d[nz])
        vals = coo.data * inv[coo.row] * inv[coo.col]
    else:
        inv[nz] = 1.0 / d[nz]
        vals = coo.data * inv[coo.row]
    mat = sp.csr_matrix((vals, (coo.row, coo.col)), shape=(graph.n, graph.n))
    return NormalizedOperator(kind=kind, matrix=mat, n=graph.n, isolated_nodes=isolated)


def save_graph(graph: NeighborGraph, path) -> None:
    """Text format: header "MOMG n k", then "i j w" per edge with i < j."""
    coo = sp.triu(graph.adjacency, k=1).tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as fh:
        fh.write(f"{GRAPH_MAGIC} {graph.n} {graph.k}\n")
        for e in order:
            fh.write(f"{coo.row[e]} {coo.col[e]} {coo.data[e]:.9g}\n")


def load_graph(path) -> NeighborGraph:
    """Read a graph file written by :func:`save_graph`, mirroring each edge."""
    from .errors import BadMagic, TruncatedFile

    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != GRAPH_MAGIC:
            raise BadMagic(f"{path}: expected header '{GRAPH_MAGIC} n k'")
        n, k = int(header[1]), int(header[2])
        edges = []
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise TruncatedFile(f"{path}: malformed edge line {line!r}")
            edges.append((int(parts[0]), int(parts[1]), float(parts[2])))
    return NeighborGraph.from_edges(n, k, edges)
