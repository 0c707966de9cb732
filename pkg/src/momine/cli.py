"""Command-line pipeline: gen, graph, diffuse, anchors, mine, train, eval,
and the chained `pipeline` with optional alternating rounds.

Every subcommand reads a flat dotted-key JSON config (CLI flags win), writes
its resolved config next to its outputs, and prints a one-line summary.
Exit codes: 0 success, 1 usage error, 2 data error. Artifacts contain no
timestamps, so a fixed seed reproduces them byte for byte.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .anchors import AnchorSet, load_anchors, power_iteration, save_anchors, select_anchors
from .diffusion import DiffusionConfig, solve_column
from .errors import MomineError
from .features import (
    FeatureSet,
    SyntheticSpec,
    generate_synthetic,
    l2_normalize,
    load_features,
    load_labels,
    pca_whiten_apply,
    pca_whiten_fit,
    save_features,
    save_labels,
)
from .graph import build_reciprocal_graph, load_graph, normalize_graph, save_graph
from .mining import (
    MiningConfig,
    baseline_pools,
    build_training_pool,
    load_pools,
    oracle_pools,
    save_pools,
)
from .evaluation import evaluate_embeddings
from .trainer import (
    EmbeddingModel,
    TrainConfig,
    forward,
    load_model,
    save_model,
    save_train_log,
    train,
)

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "gen.kind": "moons",
    "gen.classes": 2,
    "gen.per_class": 200,
    "gen.ambient_dim": 16,
    "gen.noise": 0.15,
    "prep.whiten_dims": 0,  # 0 = off
    "graph.k": 30,
    "diffusion.alpha": 0.99,
    "diffusion.tolerance": 1e-6,
    "diffusion.max_iterations": 100,
    "anchors.count": 64,
    "anchors.mode": "maxima",  # maxima | all (every non-isolated node, by pi)
    "anchors.tolerance": 1e-10,
    "anchors.max_iterations": 10000,
    "anchors.damping": 0.0,  # 0 = off
    "mining.k_pos": 50,
    "mining.k_neg": 100,
    "mining.max_pos": 0,  # 0 = unlimited
    "mining.max_neg": 50,
    "mining.hard_subset_size": 10,
    "mining.mode": "mined",  # mined | baseline
    "mining.baseline_k": 5,
    "mining.oracle": "none",  # none | positive | negative
    "model.kind": "linear",
    "model.output_dim": 16,
    "model.hidden_dim": 0,
    "train.loss": "contrastive",
    "train.weighted": True,
    "train.margin": 0.0,  # 0 = per-loss default (0.7 contrastive, 0.5 triplet)
    "train.lr0": 0.01,
    "train.lr_decay": 0.1,
    "train.lr_decay_every": 10,
    "train.momentum": 0.9,
    "train.batch_size": 42,
    "train.epochs": 30,
    "train.weight_normalization": "per-anchor-max",
    "eval.ks": "1,2,4,8",
    "rounds": 1,
}


class _Parser(argparse.ArgumentParser):
    # usage errors exit 1 (argparse defaults to 2, which we reserve for data errors)
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_config(path) -> dict:
    cfg = dict(DEFAULTS)
    if path:
        with open(path) as fh:
            loaded = json.load(fh)
        unknown = sorted(set(loaded) - set(DEFAULTS))
        if unknown:
            raise MomineError(f"unknown config keys: {unknown}")
        cfg.update(loaded)
    return cfg


def _apply_overrides(cfg: dict, pairs) -> dict:
    for key, value in pairs:
        if key not in DEFAULTS:
            raise MomineError(f"unknown config key {key!r}")
        ref = DEFAULTS[key]
        if isinstance(ref, bool):
            cfg[key] = value.lower() in ("1", "true", "yes")
        elif isinstance(ref, int):
            cfg[key] = int(value)
        elif isinstance(ref, float):
            cfg[key] = float(value)
        else:
            cfg[key] = value
    return cfg


def _resolve_seed(args, cfg) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("MOM_SEED")
    if env is not None:
        return int(env)
    return int(cfg["seed"])


def _write_config(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _margin(cfg) -> float:
    if cfg["train.margin"] > 0:
        return float(cfg["train.margin"])
    return 0.7 if cfg["train.loss"] == "contrastive" else 0.5


def _diffusion_config(cfg) -> DiffusionConfig:
    return DiffusionConfig(
        alpha=float(cfg["diffusion.alpha"]),
        tolerance=float(cfg["diffusion.tolerance"]),
        max_iterations=int(cfg["diffusion.max_iterations"]),
    )


def _mining_config(cfg) -> MiningConfig:
    return MiningConfig(
        k_pos=int(cfg["mining.k_pos"]),
        k_neg=int(cfg["mining.k_neg"]),
        max_pos=int(cfg["mining.max_pos"]) or None,
        max_neg=int(cfg["mining.max_neg"]),
        hard_subset_size=int(cfg["mining.hard_subset_size"]),
    )


def _train_config(cfg, seed) -> TrainConfig:
    return TrainConfig(
        loss=cfg["train.loss"],
        weighted=bool(cfg["train.weighted"]),
        margin=_margin(cfg),
        lr0=float(cfg["train.lr0"]),
        lr_decay=float(cfg["train.lr_decay"]),
        lr_decay_every=int(cfg["train.lr_decay_every"]),
        momentum=float(cfg["train.momentum"]),
        batch_size=int(cfg["train.batch_size"]),
        epochs=int(cfg["train.epochs"]),
        seed=seed,
        weight_normalization=cfg["train.weight_normalization"],
    )


def _anchor_set(graph, stat, cfg) -> AnchorSet:
    """Anchor selection per config: stationary local maxima, or every
    non-isolated node ordered by pi (the all-items protocol)."""
    count = int(cfg["anchors.count"])
    if cfg["anchors.mode"] == "all":
        ids = np.flatnonzero(graph.degrees > 0)
        order = np.lexsort((ids, -stat.pi[ids]))[:count]
        chosen = ids[order]
        return AnchorSet(anchor_ids=chosen, pi_values=stat.pi[chosen])
    return select_anchors(graph, stat.pi, count)


def _gen(cfg, seed) -> FeatureSet:
    spec = SyntheticSpec(
        kind=cfg["gen.kind"],
        per_class=int(cfg["gen.per_class"]),
        classes=int(cfg["gen.classes"]),
        ambient_dim=int(cfg["gen.ambient_dim"]),
        noise=float(cfg["gen.noise"]),
    )
    return generate_synthetic(spec, seed)


def _prepared_features(path, cfg) -> FeatureSet:
    feats = load_features(path)
    if int(cfg["prep.whiten_dims"]):
        transform = pca_whiten_fit(feats, int(cfg["prep.whiten_dims"]))
        feats = pca_whiten_apply(feats, transform)
    return l2_normalize(feats)


def _mine_pools(feats, graph, anchor_set, cfg, seed, labels=None):
    sym = normalize_graph(graph, "symmetric")
    dcfg = _diffusion_config(cfg)
    mcfg = _mining_config(cfg)
    if cfg["mining.mode"] == "baseline":
        pools = [
            baseline_pools(
                int(a), feats, k_base=int(cfg["mining.baseline_k"]), seed=seed,
                max_neg=mcfg.max_neg,
            )
            for a in anchor_set.anchor_ids
        ]
        pools = [p for p in pools if p.positives or p.negatives]
        items = None
    else:
        pools, items = build_training_pool(anchor_set, feats, sym, dcfg, mcfg)
    if cfg["mining.oracle"] != "none":
        if labels is None:
            raise MomineError("oracle pools need --labels")
        pools = [
            oracle_pools(
                p, labels, cfg["mining.oracle"], feats,
                max_neg=mcfg.max_neg, max_pos=mcfg.max_pos,
            )
            for p in pools
        ]
    return pools


def cmd_gen(args, cfg, seed, out: Path):
    feats = _gen(cfg, seed)
    save_features(feats, out / "features.bin")
    save_labels(feats.labels, out / "labels.txt")
    print(
        f"gen: {cfg['gen.kind']} n={feats.n} d={feats.d} noise={cfg['gen.noise']}"
        f" -> {out / 'features.bin'}"
    )
    return 0


def cmd_graph(args, cfg, seed, out: Path):
    feats = _prepared_features(args.features, cfg)
    graph = build_reciprocal_graph(feats, int(cfg["graph.k"]))
    save_graph(graph, out / "graph.txt")
    isolated = int(np.sum(graph.degrees == 0))
    print(
        f"graph: n={graph.n} k={graph.k} edges={graph.adjacency.nnz // 2}"
        f" isolated={isolated} -> {out / 'graph.txt'}"
    )
    return 0


def cmd_diffuse(args, cfg, seed, out: Path):
    graph = load_graph(args.graph)
    sym = normalize_graph(graph, "symmetric")
    column = solve_column(sym, args.anchor, _diffusion_config(cfg))
    order = np.lexsort((np.arange(graph.n), -column.values))
    with open(out / "column.txt", "w") as fh:
        for j in order:
            fh.write(f"{j} {column.values[j]:.9g}\n")
    print(
        f"diffuse: anchor={args.anchor} iterations={column.iterations_used}"
        f" residual={column.residual_norm:.3g} converged={column.converged}"
        f" -> {out / 'column.txt'}"
    )
    return 0


def cmd_anchors(args, cfg, seed, out: Path):
    graph = load_graph(args.graph)
    sto = normalize_graph(graph, "stochastic")
    damping = float(cfg["anchors.damping"]) or None
    stat = power_iteration(
        sto, float(cfg["anchors.tolerance"]), int(cfg["anchors.max_iterations"]), damping
    )
    anchor_set = _anchor_set(graph, stat, cfg)
    save_anchors(anchor_set, out / "anchors.txt")
    print(
        f"anchors: {len(anchor_set)} of requested {cfg['anchors.count']}"
        f" (power iteration: {stat.iterations_used} its, converged={stat.converged})"
        f" -> {out / 'anchors.txt'}"
    )
    return 0


def cmd_mine(args, cfg, seed, out: Path):
    feats = _prepared_features(args.features, cfg)
    graph = load_graph(args.graph)
    anchor_set = load_anchors(args.anchors)
    labels = load_labels(args.labels, feats.n) if args.labels else None
    pools = _mine_pools(feats, graph, anchor_set, cfg, seed, labels)
    save_pools(pools, out / "pools.jsonl")
    n_pos = sum(len(p.positives) for p in pools)
    n_neg = sum(len(p.negatives) for p in pools)
    print(
        f"mine: {len(pools)} anchors, {n_pos} positives, {n_neg} negatives"
        f" (mode={cfg['mining.mode']}, oracle={cfg['mining.oracle']})"
        f" -> {out / 'pools.jsonl'}"
    )
    return 0


def cmd_train(args, cfg, seed, out: Path):
    feats = _prepared_features(args.features, cfg)
    pools = load_pools(args.pools)
    model = EmbeddingModel.initialize(
        cfg["model.kind"],
        feats.d,
        int(cfg["model.output_dim"]),
        int(cfg["model.hidden_dim"]),
        seed=seed,
    )
    model, log = train(feats, pools, model, _train_config(cfg, seed), _mining_config(cfg))
    save_model(model, out / "model.bin")
    save_train_log(log, out / "train_log.csv")
    last = log[-1]["mean_loss"] if log else float("nan")
    print(
        f"train: {cfg['train.epochs']} epochs, loss={cfg['train.loss']}"
        f" weighted={cfg['train.weighted']}, final mean loss {last:.6g}"
        f" -> {out / 'model.bin'}"
    )
    return 0


def _eval_report(embeddings, labels, cfg, seed):
    ks = [int(k) for k in str(cfg["eval.ks"]).split(",") if k]
    return evaluate_embeddings(embeddings, labels, ks=ks, seed=seed)


def _write_report(report, path):
    payload = {
        "recall_at": {str(k): v for k, v in report.recall_at.items()},
        "nmi": report.nmi,
        "map_score": report.map_score,
        "n_queries": report.n_queries,
        "seed": report.seed,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_eval(args, cfg, seed, out: Path):
    feats = _prepared_features(args.features, cfg)
    labels = load_labels(args.labels, feats.n)
    if args.model:
        model = load_model(args.model)
        emb = forward(model, feats.data)
        name = "report.json"
    else:
        emb = feats.data
        name = "initial_report.json"
    report = _eval_report(emb, labels, cfg, seed)
    _write_report(report, out / name)
    r1 = report.recall_at.get(1)
    print(
        f"eval: recall@1={r1:.4f} nmi={report.nmi:.4f}"
        f" map={report.map_score:.4f} -> {out / name}"
    )
    return 0


def cmd_pipeline(args, cfg, seed, out: Path):
    if args.features:
        feats_raw = load_features(args.features)
        labels = load_labels(args.labels, feats_raw.n) if args.labels else None
    else:
        feats_raw = _gen(cfg, seed)
        labels = feats_raw.labels
    save_features(feats_raw, out / "features.bin")
    if labels is not None:
        save_labels(labels, out / "labels.txt")
    if int(cfg["prep.whiten_dims"]):
        transform = pca_whiten_fit(feats_raw, int(cfg["prep.whiten_dims"]))
        feats_raw = pca_whiten_apply(feats_raw, transform)
    feats = l2_normalize(feats_raw)

    model = EmbeddingModel.initialize(
        cfg["model.kind"], feats.d, int(cfg["model.output_dim"]),
        int(cfg["model.hidden_dim"]), seed=seed,
    )
    rounds = int(cfg["rounds"])
    mcfg = _mining_config(cfg)
    tcfg = _train_config(cfg, seed)
    for rnd in range(1, rounds + 1):
        suffix = "" if rnd == 1 else f".round{rnd}"
        space = feats if rnd == 1 else FeatureSet(
            data=forward(model, feats.data), normalized=True
        )
        graph = build_reciprocal_graph(space, int(cfg["graph.k"]))
        save_graph(graph, out / f"graph{suffix}.txt")
        sto = normalize_graph(graph, "stochastic")
        damping = float(cfg["anchors.damping"]) or None
        stat = power_iteration(
            sto, float(cfg["anchors.tolerance"]), int(cfg["anchors.max_iterations"]), damping
        )
        anchor_set = _anchor_set(graph, stat, cfg)
        save_anchors(anchor_set, out / f"anchors{suffix}.txt")
        pools = _mine_pools(space, graph, anchor_set, cfg, seed, labels)
        save_pools(pools, out / f"pools{suffix}.jsonl")
        model, log = train(feats, pools, model, tcfg, mcfg)
        save_train_log(log, out / f"train_log{suffix}.csv")
    save_model(model, out / "model.bin")

    if labels is not None:
        initial = _eval_report(feats.data, labels, cfg, seed)
        _write_report(initial, out / "initial_report.json")
        trained = _eval_report(forward(model, feats.data), labels, cfg, seed)
        _write_report(trained, out / "report.json")
        print(
            f"pipeline: rounds={rounds} recall@1 initial={initial.recall_at.get(1):.4f}"
            f" trained={trained.recall_at.get(1):.4f} -> {out / 'report.json'}"
        )
    else:
        print(f"pipeline: rounds={rounds} trained model -> {out / 'model.bin'} (no labels, no eval)")
    return 0


def _add_common(p):
    p.add_argument("--config", help="JSON config with flat dotted keys")
    p.add_argument("--seed", type=int, default=None, help="global seed (fallback: MOM_SEED env)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads; 1 (default) guarantees bitwise determinism")
    p.add_argument("--set", nargs=2, action="append", default=[], metavar=("KEY", "VALUE"),
                   help="override one config key, e.g. --set graph.k 10")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> _Parser:
    parser = _Parser(prog="mom", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"momine {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic labeled dataset")
    _add_common(p)

    p = sub.add_parser("graph", help="build the reciprocal kNN graph")
    _add_common(p)
    p.add_argument("--features", required=True)

    p = sub.add_parser("diffuse", help="solve one diffusion column (debug dump)")
    _add_common(p)
    p.add_argument("--graph", required=True)
    p.add_argument("--anchor", type=int, required=True)

    p = sub.add_parser("anchors", help="select anchors from the stationary distribution")
    _add_common(p)
    p.add_argument("--graph", required=True)

    p = sub.add_parser("mine", help="build positive/negative pools per anchor")
    _add_common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--anchors", required=True)
    p.add_argument("--labels", help="label sidecar (oracle ablations only)")

    p = sub.add_parser("train", help="train the embedding on mined pools")
    _add_common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--pools", required=True)

    p = sub.add_parser("eval", help="evaluate an embedding against labels")
    _add_common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--model", help="model file; omit to score the raw features")

    p = sub.add_parser("pipeline", help="gen/load -> graph -> anchors -> mine -> train -> eval")
    _add_common(p)
    p.add_argument("--features", help="feature file; omit to generate synthetically")
    p.add_argument("--labels", help="label sidecar for evaluation")
    p.add_argument("--rounds", type=int, default=None, help="alternating mine/train rounds")
    p.add_argument("--baseline", choices=["euclidean"], default=None,
                   help="use Euclidean-NN baseline pools instead of mined ones")
    p.add_argument("--oracle", choices=["positive", "negative"], default=None,
                   help="replace one pool side with label ground truth (needs labels)")
    return parser


_COMMANDS = {
    "gen": cmd_gen,
    "graph": cmd_graph,
    "diffuse": cmd_diffuse,
    "anchors": cmd_anchors,
    "mine": cmd_mine,
    "train": cmd_train,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config)
        _apply_overrides(cfg, args.set)
        if args.threads is not None:
            cfg["threads"] = args.threads
        if getattr(args, "rounds", None) is not None:
            cfg["rounds"] = args.rounds
        if getattr(args, "baseline", None):
            cfg["mining.mode"] = "baseline"
        if getattr(args, "oracle", None):
            cfg["mining.oracle"] = args.oracle
        seed = _resolve_seed(args, cfg)
        cfg["seed"] = seed
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_config(cfg, out)
        return _COMMANDS[args.command](args, cfg, seed, out)
    except (MomineError, FileNotFoundError, IsADirectoryError, json.JSONDecodeError) as exc:
        print(f"mom {args.command}: error: {exc}", file=sys.stderr)
        return 2


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
