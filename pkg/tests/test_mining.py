import json

import numpy as np
import pytest

from momine.anchors import AnchorSet, power_iteration, select_anchors
from momine.diffusion import DiffusionConfig, dense_oracle
from momine.errors import AllPoolsEmpty, LabelsMissing
from momine.features import FeatureSet, SyntheticSpec, generate_synthetic, l2_normalize
from momine.graph import build_reciprocal_graph, normalize_graph
from momine.mining import (
    AnchorPools,
    MiningConfig,
    TrainingTuple,
    baseline_pools,
    build_training_pool,
    load_pools,
    mine_anchor_pools,
    negative_pool,
    oracle_pools,
    positive_pool,
    sample_epoch_tuples,
    save_pools,
    save_tuples,
)

from helpers import knn_oracle

DC = DiffusionConfig(alpha=0.99, tolerance=1e-12, max_iterations=500)


def small_setup(n=40, d=6, seed=0, k=6):
    rng = np.random.default_rng(seed)
    feats = l2_normalize(FeatureSet(data=rng.normal(size=(n, d))))
    graph = build_reciprocal_graph(feats, k)
    return feats, graph, normalize_graph(graph, "symmetric")


def clusters_setup(noise=1.0, seed=11, k=12):
    spec = SyntheticSpec(kind="clusters", per_class=70, classes=6, ambient_dim=16, noise=noise)
    fs = generate_synthetic(spec, seed)
    fn = l2_normalize(fs)
    graph = build_reciprocal_graph(fn, k)
    sym = normalize_graph(graph, "symmetric")
    sto = normalize_graph(graph, "stochastic")
    stat = power_iteration(sto, max_iterations=20000)
    order = np.lexsort((np.arange(fn.n), -stat.pi))
    anchors = AnchorSet(anchor_ids=order, pi_values=stat.pi[order])
    return fs, fn, graph, sym, anchors


def pools_via_dense_oracle(anchor, feats, op, cfg):
    """Independent pool computation from the dense similarity matrix plus an
    exhaustive euclidean scan."""
    n = feats.n
    col = dense_oracle(op, DC.alpha)[:, anchor]
    order = np.lexsort((np.arange(n), -col))
    m_rank = [int(j) for j in order if j != anchor]
    k_pos = min(cfg.k_pos, n - 1)
    k_neg = min(cfg.k_neg, n - 1)
    e_pos = knn_oracle(feats.data, k_pos)[anchor]
    e_neg = knn_oracle(feats.data, k_neg)[anchor]
    pos = [j for j in m_rank[:k_pos] if j not in set(e_pos)]
    if cfg.max_pos is not None:
        pos = pos[: cfg.max_pos]
    m_set = set(m_rank[:k_neg])
    neg = [j for j in e_neg if j not in m_set][: cfg.max_neg]
    return pos, neg


def test_pool_contracts_hold():
    feats, graph, op = small_setup()
    cfg = MiningConfig(k_pos=10, k_neg=15, max_neg=8, hard_subset_size=4)
    for anchor in range(0, feats.n, 5):
        pools = mine_anchor_pools(anchor, feats, op, DC, cfg)
        pos_ids = [j for j, _ in pools.positives]
        neg_ids = [j for j, _ in pools.negatives]
        assert anchor not in pos_ids and anchor not in neg_ids
        assert not set(pos_ids) & set(neg_ids)
        assert len(pos_ids) <= cfg.k_pos
        assert len(neg_ids) <= cfg.max_neg
        pos_w = [w for _, w in pools.positives]
        neg_w = [w for _, w in pools.negatives]
        assert all(a >= b for a, b in zip(pos_w, pos_w[1:]))
        assert all(a >= b for a, b in zip(neg_w, neg_w[1:]))


def test_pools_match_dense_oracle_exactly():
    for seed in (1, 2, 3):
        feats, graph, op = small_setup(n=60, seed=seed, k=8)
        cfg = MiningConfig(k_pos=12, k_neg=20, max_neg=10, hard_subset_size=5)
        for anchor in (0, 11, 37):
            pools = mine_anchor_pools(anchor, feats, op, DC, cfg)
            pos, neg = pools_via_dense_oracle(anchor, feats, op, cfg)
            assert [j for j, _ in pools.positives] == pos
            assert [j for j, _ in pools.negatives] == neg


def test_identical_rankings_give_empty_pools():
    # with k = n-1 both neighbor sets cover everything, so both differences
    # are empty
    feats, graph, op = small_setup(n=12, k=5)
    cfg = MiningConfig(k_pos=11, k_neg=11, max_neg=5, hard_subset_size=2)
    assert positive_pool(0, feats, op, DC, cfg) == []
    assert negative_pool(0, feats, op, DC, cfg) == []


def test_elbow_graph_pools_hand_checked():
    # eight points on an L shape; the corner connects the two legs
    pts = np.array(
        [
            [0.0, 3.0], [0.0, 2.0], [0.0, 1.0], [0.0, 0.0],
            [1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [3.0, 1.0],
        ]
    ) + np.array([5.0, 5.0])
    feats = l2_normalize(FeatureSet(data=pts))
    graph = build_reciprocal_graph(feats, 2)
    op = normalize_graph(graph, "symmetric")
    cfg = MiningConfig(k_pos=4, k_neg=4, max_neg=4, hard_subset_size=2)
    pools = mine_anchor_pools(0, feats, op, DC, cfg)
    pos, neg = pools_via_dense_oracle(0, feats, op, cfg)
    assert [j for j, _ in pools.positives] == pos
    assert [j for j, _ in pools.negatives] == neg


def test_two_moons_tip_positive_pool_purity():
    spec = SyntheticSpec(kind="moons", per_class=150, classes=2, ambient_dim=16, noise=0.12)
    fs = generate_synthetic(spec, 11)
    fn = l2_normalize(fs)
    graph = build_reciprocal_graph(fn, 12)
    op = normalize_graph(graph, "symmetric")
    cfg = MiningConfig(k_pos=40, k_neg=40, max_neg=20, hard_subset_size=5)
    dcfg = DiffusionConfig(alpha=0.95, tolerance=1e-8, max_iterations=500)
    # anchors away from the gap: positives should stay on the same moon
    checked = 0
    hits = []
    for anchor in range(0, fn.n, 10):
        pool = positive_pool(anchor, fn, op, dcfg, cfg)
        if len(pool) < 3:
            continue
        checked += 1
        hits += [fs.labels[j] == fs.labels[anchor] for j, _ in pool]
    assert checked >= 10
    assert np.mean(hits) > 0.9


def test_two_moons_gap_negative_pool_purity():
    spec = SyntheticSpec(kind="moons", per_class=150, classes=2, ambient_dim=16, noise=0.08)
    fs = generate_synthetic(spec, 11)
    fn = l2_normalize(fs)
    graph = build_reciprocal_graph(fn, 12)
    op = normalize_graph(graph, "symmetric")
    cfg = MiningConfig(k_pos=200, k_neg=200, max_neg=10, hard_subset_size=5)
    dcfg = DiffusionConfig(alpha=0.95, tolerance=1e-8, max_iterations=500)
    # anchors near the inter-moon gap: closest to any opposite-moon point
    other = {0: fn.data[fs.labels == 1], 1: fn.data[fs.labels == 0]}
    gap_dist = np.array(
        [np.linalg.norm(other[int(fs.labels[i])] - fn.data[i], axis=1).min() for i in range(fn.n)]
    )
    anchors = np.argsort(gap_dist)[:15]
    hits = []
    for anchor in anchors:
        pool = negative_pool(int(anchor), fn, op, dcfg, cfg)
        hits += [fs.labels[j] != fs.labels[anchor] for j, _ in pool]
    assert len(hits) >= 30
    assert np.mean(hits) > 0.9


def test_clusters_benchmark_pool_purity():
    # frozen thresholds for the desk-scale benchmark: negatives >= 0.9,
    # positives >= 0.35
    fs, fn, graph, sym, anchors = clusters_setup(noise=1.0)
    cfg = MiningConfig(k_pos=50, k_neg=150, max_neg=20, hard_subset_size=10)
    dcfg = DiffusionConfig(alpha=0.99, tolerance=1e-6, max_iterations=300)
    pools, _ = build_training_pool(anchors, fn, sym, dcfg, cfg)
    pos_hits, neg_hits = [], []
    for pool in pools:
        label = fs.labels[pool.anchor_id]
        pos_hits += [fs.labels[j] == label for j, _ in pool.positives]
        neg_hits += [fs.labels[j] != label for j, _ in pool.negatives]
    assert np.mean(neg_hits) >= 0.9
    assert np.mean(pos_hits) >= 0.35


def test_unconverged_diffusion_flags_the_pool():
    feats, graph, op = small_setup(n=50, seed=12, k=6)
    cfg = MiningConfig(k_pos=10, k_neg=15, max_neg=8, hard_subset_size=4)
    starved = DiffusionConfig(alpha=0.99, tolerance=1e-14, max_iterations=2)
    pools = mine_anchor_pools(0, feats, op, starved, cfg)
    assert pools.diffusion_converged is False
    healthy = mine_anchor_pools(0, feats, op, DC, cfg)
    assert healthy.diffusion_converged is True


def test_baseline_pools_contract():
    feats, graph, op = small_setup(n=30, seed=4)
    pools = baseline_pools(3, feats, k_base=5, seed=9, max_neg=10)
    expected = knn_oracle(feats.data, 5)[3]
    assert [j for j, _ in pools.positives] == expected
    again = baseline_pools(3, feats, k_base=5, seed=9, max_neg=10)
    assert pools.negatives == again.negatives
    other_anchor = baseline_pools(4, feats, k_base=5, seed=9, max_neg=10)
    assert pools.negatives != other_anchor.negatives
    neg_ids = {j for j, _ in pools.negatives}
    assert 3 not in neg_ids and not neg_ids & set(expected)
    neg_w = [w for _, w in pools.negatives]
    assert all(a >= b for a, b in zip(neg_w, neg_w[1:]))


def test_baseline_pools_exhausted_complement():
    rng = np.random.default_rng(5)
    feats = l2_normalize(FeatureSet(data=rng.normal(size=(6, 4))))
    pools = baseline_pools(0, feats, k_base=5, seed=1, max_neg=10)
    assert len(pools.positives) == 5
    assert pools.negatives == []


def test_oracle_pools_modes():
    fs, fn, graph, sym, anchors = clusters_setup(noise=0.8)
    cfg = MiningConfig(k_pos=30, k_neg=60, max_neg=15, hard_subset_size=5)
    base = mine_anchor_pools(int(anchors.anchor_ids[0]), fn, sym, DiffusionConfig(), cfg)
    pos = oracle_pools(base, fs.labels, "positive", fn, max_neg=15)
    anchor_label = fs.labels[base.anchor_id]
    assert all(fs.labels[j] == anchor_label for j, _ in pos.positives)
    assert pos.negatives == base.negatives
    neg = oracle_pools(base, fs.labels, "negative", fn, max_neg=15)
    assert all(fs.labels[j] != anchor_label for j, _ in neg.negatives)
    assert neg.positives == base.positives
    assert len(neg.negatives) <= 15
    with pytest.raises(LabelsMissing):
        oracle_pools(base, None, "positive", fn)
    with pytest.raises(ValueError):
        oracle_pools(base, fs.labels, "both", fn)


def test_oracle_positive_singleton_class_empty():
    rng = np.random.default_rng(6)
    feats = l2_normalize(FeatureSet(data=rng.normal(size=(8, 3))))
    labels = np.array([0, 1, 1, 1, 1, 1, 1, 1])
    base = AnchorPools(anchor_id=0, positives=[(1, 0.5)], negatives=[(2, 0.4)])
    out = oracle_pools(base, labels, "positive", feats)
    assert out.positives == []


def test_build_training_pool_union():
    feats, graph, op = small_setup(n=50, seed=7, k=7)
    sto = normalize_graph(graph, "stochastic")
    stat = power_iteration(sto, max_iterations=50000)
    anchors = select_anchors(graph, stat.pi, 10)
    cfg = MiningConfig(k_pos=10, k_neg=15, max_neg=8, hard_subset_size=4)
    pools, items = build_training_pool(anchors, feats, op, DC, cfg)
    # oracle: recompute the union from the returned pools
    expected = set()
    for pool in pools:
        expected.add(pool.anchor_id)
        expected.update(j for j, _ in pool.positives)
        expected.update(j for j, _ in pool.negatives)
    assert set(items) == expected
    assert list(items) == sorted(items)


def test_build_training_pool_all_empty_raises():
    feats, graph, op = small_setup(n=10, k=4)
    anchors = AnchorSet(anchor_ids=np.array([0, 1]), pi_values=np.array([0.2, 0.1]))
    cfg = MiningConfig(k_pos=9, k_neg=9, max_neg=3, hard_subset_size=2)
    with pytest.warns(UserWarning, match="dropped 2 anchors"):
        with pytest.raises(AllPoolsEmpty):
            build_training_pool(anchors, feats, op, DC, cfg)


def test_sample_epoch_tuples_deterministic():
    feats, graph, op = small_setup(n=40, seed=8)
    cfg = MiningConfig(k_pos=10, k_neg=15, max_neg=8, hard_subset_size=3)
    pools = [mine_anchor_pools(a, feats, op, DC, cfg) for a in range(0, 40, 4)]
    pools = [p for p in pools if p.positives and p.negatives]
    rng = np.random.default_rng(9)
    z = rng.normal(size=(40, 5))
    first, skipped1 = sample_epoch_tuples(pools, z, cfg, seed=123)
    second, _ = sample_epoch_tuples(pools, z, cfg, seed=123)
    assert [(t.anchor_id, t.positive_id, t.negative_id, t.weight) for t in first] == [
        (t.anchor_id, t.positive_id, t.negative_id, t.weight) for t in second
    ]
    third, _ = sample_epoch_tuples(pools, z, cfg, seed=124)
    assert first != third
    for t in first:
        assert len({t.anchor_id, t.positive_id, t.negative_id}) == 3


def test_sample_epoch_tuples_hard_window():
    pool = AnchorPools(anchor_id=0, positives=[(1, 0.9)], negatives=[(2, 0.8), (3, 0.7), (4, 0.6)])
    z = np.zeros((5, 2))
    z[0] = [1.0, 0.0]
    z[2] = [0.0, 1.0]
    z[3] = [1.0, 0.0]  # collapsed onto the anchor: always the hardest
    z[4] = [0.0, -1.0]
    cfg = MiningConfig(k_pos=5, k_neg=5, max_neg=3, hard_subset_size=1)
    for seed in range(5):
        tuples, _ = sample_epoch_tuples([pool], z, cfg, seed=seed)
        assert tuples[0].negative_id == 3
    # degenerate window: with the window as large as the pool every member
    # can be drawn
    cfg_all = MiningConfig(k_pos=5, k_neg=5, max_neg=3, hard_subset_size=3)
    seen = set()
    for seed in range(30):
        tuples, _ = sample_epoch_tuples([pool], z, cfg_all, seed=seed)
        seen.add(tuples[0].negative_id)
    assert seen == {2, 3, 4}


def test_sample_epoch_tuples_skips_empty():
    full = AnchorPools(anchor_id=0, positives=[(1, 0.9)], negatives=[(2, 0.8)])
    empty = AnchorPools(anchor_id=3, positives=[], negatives=[(2, 0.8)])
    z = np.eye(4)
    cfg = MiningConfig(k_pos=3, k_neg=3, max_neg=2, hard_subset_size=1)
    tuples, skipped = sample_epoch_tuples([full, empty], z, cfg, seed=0)
    assert len(tuples) == 1 and skipped == 1


def test_tuples_file_format(tmp_path):
    tuples = [
        TrainingTuple(anchor_id=3, positive_id=7, negative_id=1, weight=0.123456789),
        TrainingTuple(anchor_id=5, positive_id=2, negative_id=9, weight=0.5),
    ]
    path = tmp_path / "tuples.jsonl"
    save_tuples(tuples, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    first = json.loads(lines[0])
    assert first == {"r": 3, "p": 7, "n": 1, "w": pytest.approx(0.123456789, rel=1e-8)}
    save_tuples(tuples, tmp_path / "again.jsonl")
    assert path.read_bytes() == (tmp_path / "again.jsonl").read_bytes()


def test_pools_jsonl_round_trip(tmp_path):
    feats, graph, op = small_setup(n=30, seed=10)
    cfg = MiningConfig(k_pos=8, k_neg=12, max_neg=6, hard_subset_size=3)
    pools = [mine_anchor_pools(a, feats, op, DC, cfg) for a in (0, 5, 9)]
    path = tmp_path / "pools.jsonl"
    save_pools(pools, path)
    for line in path.read_text().splitlines():
        json.loads(line)  # every line is valid JSON
    save_pools(pools, tmp_path / "again.jsonl")
    assert path.read_bytes() == (tmp_path / "again.jsonl").read_bytes()
    loaded = load_pools(path)
    for a, b in zip(pools, loaded):
        assert a.anchor_id == b.anchor_id
        assert [j for j, _ in a.positives] == [j for j, _ in b.positives]
        assert [j for j, _ in a.negatives] == [j for j, _ in b.negatives]
        for (_, wa), (_, wb) in zip(a.positives + a.negatives, b.positives + b.negatives):
            assert wb == pytest.approx(wa, rel=1e-8)
