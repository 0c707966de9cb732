"""Shared builders and independent oracles for the test suite.

The oracles here re-derive expected values straight from definitions
(exhaustive scans, dense solves, hand counting) and never call the code
paths they are checking.
"""

import numpy as np

from momine.graph import NeighborGraph


def random_graph(n, seed, extra_edges=None, connected=True, ensure_triangle=True):
    """Random weighted undirected graph: spanning tree plus extra edges.

    With the defaults the graph is connected and non-bipartite (a triangle
    on nodes 0,1,2 is forced), weights uniform in (0.1, 1].
    """
    rng = np.random.default_rng(seed)
    edges = {}
    if connected:
        for j in range(1, n):
            i = int(rng.integers(j))
            edges[(i, j)] = 0.1 + 0.9 * rng.random()
    if extra_edges is None:
        extra_edges = n
    for _ in range(extra_edges):
        i, j = rng.integers(n), rng.integers(n)
        if i == j:
            continue
        key = (min(i, j), max(i, j))
        edges[key] = 0.1 + 0.9 * rng.random()
    if ensure_triangle and n >= 3:
        for key in ((0, 1), (1, 2), (0, 2)):
            edges.setdefault(key, 0.1 + 0.9 * rng.random())
    return NeighborGraph.from_edges(
        n, k=n, edges=[(i, j, w) for (i, j), w in sorted(edges.items())]
    )


def circulant_graph(n, offsets=(1, 2), weight=1.0):
    """Regular graph: node i linked to i +- each offset (mod n). With offsets
    (1, 2) it contains triangles, hence non-bipartite."""
    edges = {}
    for i in range(n):
        for off in offsets:
            j = (i + off) % n
            key = (min(i, j), max(i, j))
            edges[key] = weight
    return NeighborGraph.from_edges(n, k=n, edges=[(i, j, w) for (i, j), w in sorted(edges.items())])


def knn_oracle(data, k):
    """Exhaustive top-k by clipped-cubed cosine, ties by ascending index."""
    n = data.shape[0]
    out = []
    for i in range(n):
        sims = []
        for j in range(n):
            if j == i:
                continue
            sims.append((-max(float(np.dot(data[i], data[j])), 0.0) ** 3, j))
        sims.sort()
        out.append([j for _, j in sims[:k]])
    return out


def local_maxima_oracle(graph, pi):
    """Direct neighbor comparison; assumes pi has no exact ties."""
    out = []
    for i in range(graph.n):
        nbrs = graph.neighbors(i)
        if len(nbrs) == 0:
            continue
        if all(pi[i] > pi[j] for j in nbrs):
            out.append(i)
    return out


def recall_oracle(embeddings, labels, k):
    """Definition-level Recall@k with the same tie rule (distance, index)."""
    n = len(labels)
    hits = 0
    scorable = 0
    for i in range(n):
        order = sorted(
            (float(np.linalg.norm(embeddings[i] - embeddings[j])), j)
            for j in range(n)
            if j != i
        )
        rel = [j for _, j in order if labels[j] == labels[i]]
        if not rel:
            continue
        scorable += 1
        if any(labels[j] == labels[i] for _, j in order[:k]):
            hits += 1
    return hits / scorable


def ap_oracle(embeddings, labels, query):
    """Average precision for one query, precision accumulated at each hit."""
    n = len(labels)
    order = sorted(
        (float(np.linalg.norm(embeddings[query] - embeddings[j])), j)
        for j in range(n)
        if j != query
    )
    hits = 0
    precisions = []
    for rank, (_, j) in enumerate(order, start=1):
        if labels[j] == labels[query]:
            hits += 1
            precisions.append(hits / rank)
    if not precisions:
        return None
    return float(np.mean(precisions))


def map_oracle(embeddings, labels):
    aps = [ap_oracle(embeddings, labels, q) for q in range(len(labels))]
    aps = [a for a in aps if a is not None]
    return float(np.mean(aps))


def nmi_oracle(a, b):
    """Contingency-table NMI with the arithmetic-mean normalizer."""
    a = np.asarray(a)
    b = np.asarray(b)
    n = len(a)
    mi = 0.0
    pa = {}
    pb = {}
    joint = {}
    for x, y in zip(a, b):
        pa[x] = pa.get(x, 0) + 1
        pb[y] = pb.get(y, 0) + 1
        joint[(x, y)] = joint.get((x, y), 0) + 1
    for (x, y), c in joint.items():
        p = c / n
        mi += p * np.log(p / ((pa[x] / n) * (pb[y] / n)))
    ha = -sum((c / n) * np.log(c / n) for c in pa.values())
    hb = -sum((c / n) * np.log(c / n) for c in pb.values())
    denom = 0.5 * (ha + hb)
    if denom <= 0:
        return 0.0
    return max(0.0, min(1.0, mi / denom))
