"""Label-based embedding metrics: Recall@k, NMI over k-means, and mAP."""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateLabels, LengthMismatch


@dataclass
class EvalReport:
    recall_at: dict
    nmi: float
    map_score: float | None
    n_queries: int
    seed: int


def _check_labels(embeddings: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape[0] != embeddings.shape[0]:
        raise LengthMismatch(
            f"{labels.shape[0]} labels for {embeddings.shape[0]} embeddings"
        )
    if np.unique(labels).size < 2:
        raise DegenerateLabels("all items share one label")
    return labels


def _ranked_others(embeddings: np.ndarray):
    """Per query, all other indices ordered by ascending Euclidean distance,
    ties by ascending index."""
    n = embeddings.shape[0]
    sq = np.sum(embeddings**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (embeddings @ embeddings.T)
    idx = np.arange(n)
    out = np.empty((n, n - 1), dtype=np.int64)
    for i in range(n):
        row = d2[i].copy()
        row[i] = np.inf
        out[i] = np.lexsort((idx, row))[: n - 1]
    return out


def recall_at_k(embeddings: np.ndarray, labels, ks) -> dict:
    """Fraction of queries whose k nearest neighbors contain their label.

    Queries without any same-label counterpart are excluded from the mean.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = _check_labels(embeddings, labels)
    ks = sorted(int(k) for k in ks)
    if ks[0] < 1 or ks[-1] > embeddings.shape[0] - 1:
        raise ValueError(f"ks must lie in [1, n-1], got {ks}")
    ranked = _ranked_others(embeddings)
    scorable = 0
    hits = {k: 0 for k in ks}
    for i in range(embeddings.shape[0]):
        same = labels[ranked[i]] == labels[i]
        if not same.any():
            continue
        scorable += 1
        for k in ks:
            if same[:k].any():
                hits[k] += 1
    if scorable == 0:
        raise DegenerateLabels("no query has a same-label counterpart")
    return {k: hits[k] / scorable for k in ks}


def kmeans(embeddings: np.ndarray, c: int, seed: int = 0, max_iter: int = 100) -> np.ndarray:
    """Lloyd's algorithm with seeded farthest-point initialization.

    Deterministic per seed: argmin/argmax ties go to the lowest index, and an
    emptied cluster keeps its previous center.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= c <= n:
        raise ValueError(f"c must be in [1, n={n}]")
    rng = np.random.default_rng(seed)
    centers = np.empty((c, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    mind = np.linalg.norm(x - centers[0], axis=1)
    for j in range(1, c):
        centers[j] = x[int(np.argmax(mind))]
        mind = np.minimum(mind, np.linalg.norm(x - centers[j], axis=1))
    assign = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iter):
        d2 = (
            np.sum(x**2, axis=1)[:, None]
            - 2.0 * (x @ centers.T)
            + np.sum(centers**2, axis=1)[None, :]
        )
        new_assign = np.argmin(d2, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(c):
            mask = assign == j
            if mask.any():
                centers[j] = x[mask].mean(axis=0)
    return assign


def nmi(labels_a, labels_b, normalizer: str = "arithmetic") -> float:
    """Mutual information normalized by the mean of the two entropies.

    Convention 0/0 -> 0 (e.g. one side is a single cluster).
    """
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape[0] != b.shape[0] or a.shape[0] < 1:
        raise LengthMismatch(f"label lengths differ: {a.shape[0]} vs {b.shape[0]}")
    if normalizer not in ("arithmetic", "geometric"):
        raise ValueError("normalizer must be 'arithmetic' or 'geometric'")
    n = a.shape[0]
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    counts = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(counts, (ai, bi), 1.0)
    pa = counts.sum(axis=1) / n
    pb = counts.sum(axis=0) / n
    pj = counts / n
    nz = pj > 0
    terms = pj[nz] * np.log(pj[nz] / np.outer(pa, pb)[nz])
    # summing in sorted order makes the value exactly transpose-invariant
    mi = float(np.sort(terms).sum())
    ha = float(-np.sum(pa[pa > 0] * np.log(pa[pa > 0])))
    hb = float(-np.sum(pb[pb > 0] * np.log(pb[pb > 0])))
    denom = 0.5 * (ha + hb) if normalizer == "arithmetic" else np.sqrt(ha * hb)
    if denom <= 0.0:
        return 0.0
    return max(0.0, min(1.0, mi / denom))


def mean_average_precision(embeddings: np.ndarray, labels) -> float:
    """Mean AP over queries with at least one same-label item; precision is
    taken at each relevant hit, uninterpolated."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = _check_labels(embeddings, labels)
    ranked = _ranked_others(embeddings)
    aps = []
    for i in range(embeddings.shape[0]):
        rel = labels[ranked[i]] == labels[i]
        total = int(rel.sum())
        if total == 0:
            continue
        hit_ranks = np.flatnonzero(rel) + 1
        precisions = np.arange(1, total + 1) / hit_ranks
        aps.append(float(precisions.mean()))
    if not aps:
        raise DegenerateLabels("no query has a same-label counterpart")
    return float(np.mean(aps))


def evaluate_embeddings(
    embeddings: np.ndarray,
    labels,
    ks=(1, 2, 4, 8),
    seed: int = 0,
    with_map: bool = True,
) -> EvalReport:
    """Full report: Recall@k, NMI of a seeded k-means (one cluster per label
    value), and optionally mAP."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = _check_labels(embeddings, labels)
    n = embeddings.shape[0]
    ks = [k for k in ks if 1 <= k <= n - 1]
    recall = recall_at_k(embeddings, labels, ks)
    c = int(np.unique(labels).size)
    clusters = kmeans(embeddings, c, seed=seed)
    score = nmi(labels, clusters)
    ap = mean_average_precision(embeddings, labels) if with_map else None
    ranked = _ranked_others(embeddings)
    n_queries = int(sum((labels[ranked[i]] == labels[i]).any() for i in range(n)))
    return EvalReport(
        recall_at=recall, nmi=score, map_score=ap, n_queries=n_queries, seed=seed
    )
