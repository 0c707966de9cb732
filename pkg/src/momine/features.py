"""Feature vectors: storage, synthetic generators, normalization, whitening, disk I/O.

Features live in memory as float64 (solvers need the headroom) and on disk as
little-endian float32. Labels are kept in a plain-text sidecar and are only
ever consumed by evaluation and oracle ablations, never by the graph, mining,
or training code paths.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagic,
    BadSpec,
    DimMismatch,
    RankDeficient,
    TruncatedFile,
    ZeroVector,
)

MAGIC = b"MOM1"

SYNTHETIC_KINDS = ("moons", "circles", "swiss-roll", "clusters")


@dataclass
class FeatureSet:
    """An immutable n x d matrix of item features with stable ids.

    ``labels`` is optional and exists for evaluation only.
    """

    data: np.ndarray
    ids: np.ndarray = None
    labels: np.ndarray | None = None
    normalized: bool = False

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"feature matrix must be 2-D and non-empty, got {self.data.shape}")
        if self.ids is None:
            self.ids = np.arange(self.data.shape[0], dtype=np.int64)
        else:
            self.ids = np.asarray(self.ids, dtype=np.int64)
            if not np.array_equal(self.ids, np.arange(self.data.shape[0])):
                raise ValueError("ids must be unique and dense in [0, n)")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.data.shape[0],):
                raise DimMismatch(
                    f"labels length {self.labels.shape[0]} != n={self.data.shape[0]}"
                )
            self.labels.flags.writeable = False
        self.data.flags.writeable = False
        self.ids.flags.writeable = False

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]


@dataclass
class WhiteningTransform:
    """Centering plus projection onto scaled principal axes."""

    mean: np.ndarray
    projection: np.ndarray  # (d, retained_dims), columns scaled by 1/sqrt(eigval + eps)
    retained_dims: int


@dataclass
class SyntheticSpec:
    """Parameters for a synthetic manifold dataset.

    ``noise`` is the ambient Gaussian sigma applied after the (seeded) isometric
    lift into ``ambient_dim`` dimensions; for ``clusters`` it doubles as the
    blob standard deviation.
    """

    kind: str
    per_class: int
    classes: int = 2
    ambient_dim: int = 2
    noise: float = 0.0


def l2_normalize(features: FeatureSet) -> FeatureSet:
    """Divide every row by its Euclidean norm.

    Raises ZeroVector(i) if row i has norm below 1e-12. Idempotent to within
    float64 round-off.
    """
    norms = np.linalg.norm(features.data, axis=1)
    bad = np.flatnonzero(norms < 1e-12)
    if bad.size:
        raise ZeroVector(int(bad[0]))
    return FeatureSet(
        data=features.data / norms[:, None],
        ids=features.ids,
        labels=features.labels,
        normalized=True,
    )


def pca_whiten_fit(
    features: FeatureSet, retained_dims: int, epsilon: float = 1e-9
) -> WhiteningTransform:
    """Fit an unsupervised PCA whitening transform on the feature set.

    Centers by the sample mean, keeps the top ``retained_dims`` principal
    axes, and scales each by 1/sqrt(eigenvalue + epsilon) so the fitting set
    comes out with unit variance per retained component.
    """
    n, d = features.n, features.d
    if n < 2:
        raise ValueError("whitening needs at least 2 samples")
    if not 1 <= retained_dims <= min(n - 1, d):
        raise ValueError(f"retained_dims must be in [1, min(n-1, d)]={min(n - 1, d)}")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    mean = features.data.mean(axis=0)
    centered = features.data - mean
    cov = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]
    usable = int(np.sum(eigvals > epsilon))
    if usable < retained_dims:
        raise RankDeficient(
            f"only {usable} eigenvalues exceed epsilon={epsilon}, need {retained_dims}"
        )
    # canonical sign: largest-magnitude entry of each axis is positive
    for j in range(retained_dims):
        pivot = np.argmax(np.abs(eigvecs[:, j]))
        if eigvecs[pivot, j] < 0:
            eigvecs[:, j] = -eigvecs[:, j]
    proj = eigvecs[:, :retained_dims] / np.sqrt(eigvals[:retained_dims] + epsilon)
    return WhiteningTransform(mean=mean, projection=proj, retained_dims=retained_dims)


def pca_whiten_apply(features: FeatureSet, transform: WhiteningTransform) -> FeatureSet:
    """Apply a fitted whitening transform; output is not normalized."""
    if features.d != transform.mean.shape[0]:
        raise DimMismatch(
            f"transform expects d={transform.mean.shape[0]}, got d={features.d}"
        )
    out = (features.data - transform.mean) @ transform.projection
    return FeatureSet(data=out, ids=features.ids, labels=features.labels, normalized=False)


def _intrinsic_points(spec: SyntheticSpec, rng: np.random.Generator):
    """Sample the low-dimensional manifold points and labels for a spec."""
    m, c = spec.per_class, spec.classes
    if spec.kind == "moons":
        t0 = rng.uniform(0.0, np.pi, m)
        t1 = rng.uniform(0.0, np.pi, m)
        arc0 = np.column_stack([np.cos(t0), np.sin(t0)])
        arc1 = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
        pts = np.vstack([arc0, arc1])
        labels = np.repeat([0, 1], m)
    elif spec.kind == "circles":
        parts, labels = [], []
        for k in range(c):
            t = rng.uniform(0.0, 2.0 * np.pi, m)
            r = 1.0 + k
            parts.append(np.column_stack([r * np.cos(t), r * np.sin(t)]))
            labels.append(np.full(m, k))
        pts = np.vstack(parts)
        labels = np.concatenate(labels)
    elif spec.kind == "swiss-roll":
        lo, hi = 1.5 * np.pi, 4.5 * np.pi
        edges = np.linspace(lo, hi, c + 1)
        parts, labels = [], []
        for k in range(c):
            t = rng.uniform(edges[k], edges[k + 1], m)
            h = rng.uniform(0.0, 10.0, m)
            parts.append(np.column_stack([t * np.cos(t), h, t * np.sin(t)]))
            labels.append(np.full(m, k))
        pts = np.vstack(parts)
        labels = np.concatenate(labels)
    else:  # clusters: centers only; the ambient noise provides the blobs
        centers = rng.normal(size=(c, 2))
        # spread the centers so small-noise blobs are k-means separable
        dists = [
            np.linalg.norm(centers[i] - centers[j])
            for i in range(c)
            for j in range(i + 1, c)
        ]
        scale = 4.0 / max(min(dists), 1e-9) if dists else 1.0
        centers *= scale
        # keep every center off the origin so l2 normalization stays sane
        norms = np.linalg.norm(centers, axis=1)
        low = norms < 2.5
        if low.any():
            centers[low] += centers[low] / norms[low, None] * (2.5 - norms[low, None])
        pts = np.repeat(centers, m, axis=0)
        labels = np.repeat(np.arange(c), m)
    return pts, labels.astype(np.int64)


def generate_synthetic(spec: SyntheticSpec, seed: int) -> FeatureSet:
    """Generate a labeled synthetic dataset, deterministic per (spec, seed).

    The manifold is sampled in its intrinsic dimension, lifted into
    ``ambient_dim`` via a seeded random orthonormal matrix when the ambient
    dimension exceeds the intrinsic one, and perturbed by isotropic Gaussian
    noise. Values are quantized through float32 so the feature-file round
    trip is exact.
    """
    if spec.kind not in SYNTHETIC_KINDS:
        raise BadSpec(f"unknown kind {spec.kind!r}; expected one of {SYNTHETIC_KINDS}")
    if spec.per_class < 1 or spec.classes < 1 or spec.ambient_dim < 1:
        raise BadSpec("per_class, classes and ambient_dim must be positive")
    if spec.kind == "moons" and spec.classes != 2:
        raise BadSpec("moons has exactly 2 classes")
    if spec.noise < 0:
        raise BadSpec("noise must be non-negative")

    rng = np.random.default_rng(seed)
    pts, labels = _intrinsic_points(spec, rng)
    q = pts.shape[1]
    if spec.ambient_dim < q:
        raise BadSpec(f"ambient_dim {spec.ambient_dim} below intrinsic dimension {q}")
    if spec.ambient_dim > q:
        basis, _ = np.linalg.qr(rng.normal(size=(spec.ambient_dim, q)))
        pts = pts @ basis.T
        # affine part of the embedding: move the manifold plane off the
        # origin (as CNN-style features are), otherwise l2 normalization
        # would collapse the lifted plane onto a circle of directions.
        # Cluster centers already sit on spread-out rays, where the purely
        # radial view is the interesting geometry, so they stay unshifted.
        if spec.kind != "clusters":
            shift = rng.normal(size=spec.ambient_dim)
            shift /= np.linalg.norm(shift)
            pts = pts + 3.0 * max(1.0, float(np.linalg.norm(pts, axis=1).max())) * shift
    if spec.noise > 0:
        pts = pts + spec.noise * rng.normal(size=pts.shape)
    pts = pts.astype(np.float32).astype(np.float64)
    return FeatureSet(data=pts, labels=labels, normalized=False)


def save_features(features: FeatureSet, path) -> None:
    """Write the binary feature file: MOM1, u32 n, u32 d, n*d float32 LE."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", features.n, features.d))
        fh.write(features.data.astype("<f4").tobytes())


def load_features(path) -> FeatureSet:
    """Read a binary feature file written by :func:`save_features`."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if len(magic) < 4:
            raise TruncatedFile(f"{path}: file shorter than the 4-byte magic")
        if magic != MAGIC:
            raise BadMagic(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        header = fh.read(8)
        if len(header) < 8:
            raise TruncatedFile(f"{path}: header truncated")
        n, d = struct.unpack("<II", header)
        payload = fh.read(n * d * 4)
        if len(payload) < n * d * 4:
            have = len(payload) // (d * 4) if d else 0
            raise TruncatedFile(f"{path}: header promises {n} rows, payload has {have}")
    data = np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float64)
    return FeatureSet(data=data, normalized=False)


def save_labels(labels: np.ndarray, path) -> None:
    with open(path, "w") as fh:
        for v in labels:
            fh.write(f"{int(v)}\n")


def load_labels(path, expected_n: int) -> np.ndarray:
    """Read the label sidecar: one decimal integer per line, exactly n lines."""
    with open(path) as fh:
        values = [int(line) for line in fh.read().split()]
    if len(values) != expected_n:
        raise DimMismatch(f"{path}: {len(values)} labels for n={expected_n} items")
    return np.asarray(values, dtype=np.int64)
