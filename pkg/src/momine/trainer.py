"""Small trainable embedding and the tuple-based metric-learning loop.

The model is a linear (or one-hidden-layer ReLU) map followed by l2
normalization. Losses operate on embedding triples and return analytic
gradients; backprop through the normalization is the tangent-space projection
(I - z z^T)/||u||. Training is single-threaded and fully determined by the
config seed.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .diffusion import DiffusionConfig
from .errors import BadMagic, DegenerateOutput, Diverged, TruncatedFile
from .features import FeatureSet
from .mining import MiningConfig, sample_epoch_tuples

MODEL_MAGIC = b"MOMM"
_KIND_CODES = {"linear": 0, "mlp": 1}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


@dataclass
class EmbeddingModel:
    """Parametric map to the unit sphere: affine (+ optional ReLU hidden layer),
    then l2 normalization."""

    kind: str  # "linear" | "mlp"
    input_dim: int
    output_dim: int
    hidden_dim: int = 0
    layers: list = field(default_factory=list)  # [[W, b], ...]

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"kind must be 'linear' or 'mlp', got {self.kind!r}")
        if self.kind == "linear" and self.hidden_dim:
            raise ValueError("linear model takes hidden_dim=0")
        if self.kind == "mlp" and self.hidden_dim < 1:
            raise ValueError("mlp model needs hidden_dim >= 1")
        if not self.layers:
            raise ValueError("layers missing; use EmbeddingModel.initialize")
        shapes = self._expected_shapes()
        got = [(w.shape, b.shape) for w, b in self.layers]
        if got != shapes:
            raise ValueError(f"parameter shapes {got} do not match architecture {shapes}")

    def _expected_shapes(self):
        if self.kind == "linear":
            return [((self.output_dim, self.input_dim), (self.output_dim,))]
        return [
            ((self.hidden_dim, self.input_dim), (self.hidden_dim,)),
            ((self.output_dim, self.hidden_dim), (self.output_dim,)),
        ]

    @property
    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    @classmethod
    def initialize(cls, kind, input_dim, output_dim, hidden_dim=0, seed=0):
        """Fine-tuning-style init: the starting embedding preserves the input
        geometry as far as the architecture allows.

        Linear models start at the identity (square) or a seeded orthonormal
        projection (reducing), so the epoch-0 embedding equals the normalized
        input features. MLP layers get seeded Gaussians scaled by
        1/sqrt(fan_in); biases are zero.
        """
        rng = np.random.default_rng(seed)
        if kind == "linear":
            if output_dim == input_dim:
                w = np.eye(output_dim)
            elif output_dim < input_dim:
                q, _ = np.linalg.qr(rng.normal(size=(input_dim, output_dim)))
                w = q.T
            else:
                q, _ = np.linalg.qr(rng.normal(size=(output_dim, input_dim)))
                w = q
            layers = [[w, np.zeros(output_dim)]]
        else:
            layers = [
                [rng.normal(scale=1.0 / np.sqrt(fan_in), size=(fan_out, fan_in)), np.zeros(fan_out)]
                for fan_out, fan_in in [(hidden_dim, input_dim), (output_dim, hidden_dim)]
            ]
        return cls(kind, input_dim, output_dim, hidden_dim, layers)

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(
            self.kind,
            self.input_dim,
            self.output_dim,
            self.hidden_dim,
            [[w.copy(), b.copy()] for w, b in self.layers],
        )


def _forward_cache(model: EmbeddingModel, x: np.ndarray):
    """Batched forward pass keeping what the backward pass needs."""
    cache = {"x": x}
    if model.kind == "linear":
        w, b = model.layers[0]
        pre = x @ w.T + b
    else:
        w1, b1 = model.layers[0]
        w2, b2 = model.layers[1]
        hpre = x @ w1.T + b1
        h = np.maximum(hpre, 0.0)
        cache["hpre"] = hpre
        cache["h"] = h
        pre = h @ w2.T + b2
    norms = np.linalg.norm(pre, axis=1)
    if np.any(norms < 1e-12):
        bad = int(np.flatnonzero(norms < 1e-12)[0])
        raise DegenerateOutput(f"pre-normalization norm below 1e-12 for input row {bad}")
    z = pre / norms[:, None]
    cache["z"] = z
    cache["norms"] = norms
    return z, cache


def forward(model: EmbeddingModel, x: np.ndarray) -> np.ndarray:
    """Embed one vector or a batch; rows come out unit-norm."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    z, _ = _forward_cache(model, arr[None, :] if single else arr)
    return z[0] if single else z


def _backward(model: EmbeddingModel, cache, dz: np.ndarray, grads: list) -> None:
    """Accumulate parameter gradients for dLoss/dz into `grads` (same shapes
    as model.layers). Normalization backprop: dpre = (dz - (dz.z) z)/||pre||."""
    z, norms = cache["z"], cache["norms"]
    dpre = (dz - np.sum(dz * z, axis=1, keepdims=True) * z) / norms[:, None]
    if model.kind == "linear":
        grads[0][0] += dpre.T @ cache["x"]
        grads[0][1] += dpre.sum(axis=0)
        return
    w2 = model.layers[1][0]
    grads[1][0] += dpre.T @ cache["h"]
    grads[1][1] += dpre.sum(axis=0)
    dh = (dpre @ w2) * (cache["hpre"] > 0.0)
    grads[0][0] += dh.T @ cache["x"]
    grads[0][1] += dh.sum(axis=0)


def _contrastive_batch(zr, zp, zn, margin):
    """Pair loss ||zr-zp||^2 + [m - ||zr-zn||]_+^2 with gradients per row.

    Subgradient 0 at the hinge kink and at zn == zr (where the distance is
    not differentiable)."""
    dp = zr - zp
    dn = zr - zn
    dist_n = np.linalg.norm(dn, axis=1)
    hinge = np.maximum(margin - dist_n, 0.0)
    losses = np.sum(dp * dp, axis=1) + hinge**2
    safe = dist_n > 1e-12
    coef = np.zeros_like(dist_n)
    coef[safe] = 2.0 * hinge[safe] / dist_n[safe]
    g_r = 2.0 * dp - coef[:, None] * dn
    g_p = -2.0 * dp
    g_n = coef[:, None] * dn
    return losses, g_r, g_p, g_n


def _triplet_batch(zr, zp, zn, margin):
    """Standard squared-distance triplet: [m + ||zr-zp||^2 - ||zr-zn||^2]_+."""
    dp = zr - zp
    dn = zr - zn
    act = margin + np.sum(dp * dp, axis=1) - np.sum(dn * dn, axis=1)
    losses = np.maximum(act, 0.0)
    on = (act > 0.0).astype(np.float64)[:, None]
    g_r = on * 2.0 * (dp - dn)
    g_p = on * (-2.0 * dp)
    g_n = on * 2.0 * dn
    return losses, g_r, g_p, g_n


def _triplet_literal_batch(zr, zp, zn, margin):
    """Hinge-squared variant with an unsquared negative distance:
    [m + ||zr-zp||^2 - ||zr-zn||]_+^2."""
    dp = zr - zp
    dn = zr - zn
    dist_n = np.linalg.norm(dn, axis=1)
    act = np.maximum(margin + np.sum(dp * dp, axis=1) - dist_n, 0.0)
    losses = act**2
    safe = dist_n > 1e-12
    inv = np.zeros_like(dist_n)
    inv[safe] = 1.0 / dist_n[safe]
    two_act = (2.0 * act)[:, None]
    g_r = two_act * (2.0 * dp - inv[:, None] * dn)
    g_p = two_act * (-2.0 * dp)
    g_n = two_act * (inv[:, None] * dn)
    return losses, g_r, g_p, g_n


_LOSSES = {
    "contrastive": _contrastive_batch,
    "triplet": _triplet_batch,
    "triplet-literal": _triplet_literal_batch,
}


def contrastive_loss(z_r, z_p, z_n, margin):
    """Scalar contrastive loss and gradients w.r.t. the three embeddings."""
    losses, g_r, g_p, g_n = _contrastive_batch(
        np.atleast_2d(z_r), np.atleast_2d(z_p), np.atleast_2d(z_n), margin
    )
    return float(losses[0]), (g_r[0], g_p[0], g_n[0])


def triplet_loss(z_r, z_p, z_n, margin, literal_form: bool = False):
    """Scalar triplet loss and gradients; `literal_form` switches to the
    hinge-squared mixed-distance variant."""
    fn = _triplet_literal_batch if literal_form else _triplet_batch
    losses, g_r, g_p, g_n = fn(
        np.atleast_2d(z_r), np.atleast_2d(z_p), np.atleast_2d(z_n), margin
    )
    return float(losses[0]), (g_r[0], g_p[0], g_n[0])


def apply_weight(loss: float, grads, weight: float):
    """Scale a loss and its gradients by a non-negative tuple weight."""
    if weight < 0:
        raise ValueError("weight must be non-negative")
    return loss * weight, tuple(g * weight for g in grads)


def sgd_momentum_step(params: list, grads: list, velocity: list, lr: float, momentum: float):
    """In-place v <- momentum*v - lr*g; theta <- theta + v."""
    for (w, b), (gw, gb), (vw, vb) in zip(params, grads, velocity):
        vw *= momentum
        vw -= lr * gw
        w += vw
        vb *= momentum
        vb -= lr * gb
        b += vb
    return params, velocity


@dataclass
class TrainConfig:
    loss: str = "contrastive"
    weighted: bool = True
    margin: float = 0.7
    lr0: float = 0.01
    lr_decay: float = 0.1
    lr_decay_every: int = 10
    momentum: float = 0.9
    batch_size: int = 42
    epochs: int = 30
    seed: int = 0
    weight_normalization: str = "per-anchor-max"  # or "none"

    def __post_init__(self):
        if self.loss not in _LOSSES:
            raise ValueError(f"loss must be one of {sorted(_LOSSES)}, got {self.loss!r}")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_normalization not in ("per-anchor-max", "none"):
            raise ValueError("weight_normalization must be 'per-anchor-max' or 'none'")


def train(
    features: FeatureSet,
    pools: list,
    model: EmbeddingModel,
    train_config: TrainConfig,
    mining_config: MiningConfig,
):
    """Train the model in place on frozen pools; returns (model, epoch log).

    Each epoch re-embeds the training pool with the current parameters,
    samples one tuple per anchor (hard negatives in the current space),
    shuffles, and runs momentum-SGD minibatches. Log rows carry epoch,
    mean_loss, lr, tuples_used.
    """
    if not pools:
        raise ValueError("pools must be non-empty")
    if features.d != model.input_dim:
        raise ValueError(f"model expects input_dim={model.input_dim}, features have d={features.d}")
    members = set()
    max_w = {}
    for pool in pools:
        members.add(pool.anchor_id)
        members.update(j for j, _ in pool.positives)
        members.update(j for j, _ in pool.negatives)
        if pool.positives:
            max_w[pool.anchor_id] = max(w for _, w in pool.positives)
    members = np.asarray(sorted(members), dtype=np.int64)

    loss_fn = _LOSSES[train_config.loss]
    velocity = [[np.zeros_like(w), np.zeros_like(b)] for w, b in model.layers]
    shuffle_rng = np.random.default_rng([train_config.seed, 1])
    log = []
    for epoch in range(train_config.epochs):
        lr = train_config.lr0 * train_config.lr_decay ** (epoch // train_config.lr_decay_every)
        z_pool = np.zeros((features.n, model.output_dim))
        z_pool[members] = forward(model, features.data[members])
        tuples, _ = sample_epoch_tuples(
            pools, z_pool, mining_config, seed=[train_config.seed, 2, epoch]
        )
        if not tuples:
            log.append({"epoch": epoch, "mean_loss": 0.0, "lr": lr, "tuples_used": 0})
            continue
        order = shuffle_rng.permutation(len(tuples))
        total = 0.0
        for start in range(0, len(order), train_config.batch_size):
            batch = [tuples[t] for t in order[start : start + train_config.batch_size]]
            r_ids = np.asarray([t.anchor_id for t in batch])
            p_ids = np.asarray([t.positive_id for t in batch])
            n_ids = np.asarray([t.negative_id for t in batch])
            if train_config.weighted:
                if train_config.weight_normalization == "per-anchor-max":
                    w = np.asarray(
                        [
                            t.weight / max_w[t.anchor_id] if max_w.get(t.anchor_id, 0.0) > 0 else 0.0
                            for t in batch
                        ]
                    )
                else:
                    w = np.asarray([t.weight for t in batch])
            else:
                w = np.ones(len(batch))
            zr, cr = _forward_cache(model, features.data[r_ids])
            zp, cp = _forward_cache(model, features.data[p_ids])
            zn, cn = _forward_cache(model, features.data[n_ids])
            losses, g_r, g_p, g_n = loss_fn(zr, zp, zn, train_config.margin)
            scale = (w / len(batch))[:, None]
            grads = [[np.zeros_like(wm), np.zeros_like(bm)] for wm, bm in model.layers]
            _backward(model, cr, g_r * scale, grads)
            _backward(model, cp, g_p * scale, grads)
            _backward(model, cn, g_n * scale, grads)
            sgd_momentum_step(model.layers, grads, velocity, lr, train_config.momentum)
            total += float(np.sum(losses * w))
        mean_loss = total / len(tuples)
        if not np.isfinite(mean_loss):
            raise Diverged(f"mean loss became non-finite at epoch {epoch}")
        log.append(
            {"epoch": epoch, "mean_loss": mean_loss, "lr": lr, "tuples_used": len(tuples)}
        )
    return model, log


def alternate_rounds(
    features: FeatureSet,
    rounds: int,
    model: EmbeddingModel,
    graph_k: int,
    anchor_count: int,
    diffusion_config: DiffusionConfig,
    mining_config: MiningConfig,
    train_config: TrainConfig,
    power_tolerance: float = 1e-10,
    power_max_iterations: int = 10000,
):
    """Alternate (mine -> train) for `rounds` rounds.

    Round 1 mines on the (normalized) input features; each later round embeds
    the whole set with the current model and mines on those embeddings, while
    the model keeps consuming the original features. Returns (model, rounds
    info), one record per round with the graph, anchors, pools and train log.
    """
    from .anchors import power_iteration, select_anchors
    from .features import l2_normalize
    from .graph import build_reciprocal_graph, normalize_graph
    from .mining import build_training_pool

    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    records = []
    for rnd in range(1, rounds + 1):
        if rnd == 1:
            space = features if features.normalized else l2_normalize(features)
        else:
            space = FeatureSet(data=forward(model, features.data), normalized=True)
        graph = build_reciprocal_graph(space, graph_k)
        sym = normalize_graph(graph, "symmetric")
        sto = normalize_graph(graph, "stochastic")
        stationary = power_iteration(sto, power_tolerance, power_max_iterations)
        anchor_set = select_anchors(graph, stationary.pi, anchor_count)
        pools, pool_items = build_training_pool(
            anchor_set, space, sym, diffusion_config, mining_config
        )
        model, log = train(features, pools, model, train_config, mining_config)
        records.append(
            {
                "round": rnd,
                "graph": graph,
                "stationary": stationary,
                "anchors": anchor_set,
                "pools": pools,
                "pool_items": pool_items,
                "log": log,
            }
        )
    return model, records


def save_model(model: EmbeddingModel, path) -> None:
    """Binary format: MOMM, u32 kind code, u32 in/out/hidden dims, then all
    parameters as float32 LE, layer by layer (weights row-major, then bias)."""
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(
            struct.pack(
                "<IIII",
                _KIND_CODES[model.kind],
                model.input_dim,
                model.output_dim,
                model.hidden_dim,
            )
        )
        for w, b in model.layers:
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(np.asarray(b, dtype="<f4").tobytes())


def load_model(path) -> EmbeddingModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if len(magic) < 4:
            raise TruncatedFile(f"{path}: shorter than the 4-byte magic")
        if magic != MODEL_MAGIC:
            raise BadMagic(f"{path}: bad magic {magic!r}, expected {MODEL_MAGIC!r}")
        header = fh.read(16)
        if len(header) < 16:
            raise TruncatedFile(f"{path}: header truncated")
        code, d_in, d_out, hidden = struct.unpack("<IIII", header)
        if code not in _CODE_KINDS:
            raise BadMagic(f"{path}: unknown model kind code {code}")
        kind = _CODE_KINDS[code]
        dims = (
            [(d_out, d_in)] if kind == "linear" else [(hidden, d_in), (d_out, hidden)]
        )
        layers = []
        for fan_out, fan_in in dims:
            need = (fan_out * fan_in + fan_out) * 4
            blob = fh.read(need)
            if len(blob) < need:
                raise TruncatedFile(f"{path}: parameter payload truncated")
            flat = np.frombuffer(blob, dtype="<f4").astype(np.float64)
            layers.append(
                [flat[: fan_out * fan_in].reshape(fan_out, fan_in), flat[fan_out * fan_in :]]
            )
    return EmbeddingModel(kind, d_in, d_out, hidden, layers)


def save_train_log(log: list, path) -> None:
    """CSV: epoch,mean_loss,lr,tuples_used."""
    with open(path, "w") as fh:
        fh.write("epoch,mean_loss,lr,tuples_used\n")
        for row in log:
            fh.write(
                f"{row['epoch']},{row['mean_loss']:.9g},{row['lr']:.9g},{row['tuples_used']}\n"
            )
