import datetime
import math
import random

import numpy as np
import pytest

from bincorpus.dedup import (
    ConfigError,
    SimilarityConfig,
    SimilarityMetric,
    calibrate_threshold,
    dedup,
    hybrid_similarity,
)
from bincorpus.features import FeatureConfig, GlobalVectors, extract_sample

HYBRID = SimilarityConfig(gamma=5.0, tau=0.9999, metric=SimilarityMetric.HYBRID)


def gv(sem, struct):
    return GlobalVectors(
        v_struct=np.array(struct, dtype=float),
        v_sem=None if sem is None else np.array(sem, dtype=float),
    )


def sem9(*head):
    v = [0.0] * 9
    for i, x in enumerate(head):
        v[i] = x
    return v


def test_self_similarity_exact():
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = gv(rng.random(18), rng.random(4))
        assert abs(hybrid_similarity(v, v, HYBRID) - 1.0) <= 1e-12


def test_orthogonal_sem_zero():
    a = gv(sem9(1.0), [1.0, 1.0])
    b = gv(sem9(0.0, 1.0), [1.0, 1.0])
    assert hybrid_similarity(a, b, HYBRID) == pytest.approx(0.0, abs=1e-15)


def test_fixture_pair_inv_sqrt2():
    a = gv(sem9(1.0, 1.0), [3.0, 4.0])
    b = gv(sem9(1.0), [3.0, 4.0])
    s = hybrid_similarity(a, b, HYBRID)
    assert s == pytest.approx(1.0 / math.sqrt(2.0), abs=1e-12)


def test_symmetry_and_range_random():
    rng = np.random.default_rng(42)
    for _ in range(300):
        a = gv(rng.random(18), rng.random(4) * 10)
        b = gv(rng.random(18), rng.random(4) * 10)
        s_ab = hybrid_similarity(a, b, HYBRID)
        s_ba = hybrid_similarity(b, a, HYBRID)
        assert abs(s_ab - s_ba) <= 1e-12
        assert -1e-12 <= s_ab <= 1.0 + 1e-12


def test_positive_scaling_invariance():
    rng = np.random.default_rng(7)
    for _ in range(100):
        a = gv(rng.random(18), rng.random(4))
        c1, c2 = 10 ** rng.uniform(-3, 3), 10 ** rng.uniform(-3, 3)
        b = gv(rng.random(18), rng.random(4))
        scaled_a = gv(a.v_sem * c1, a.v_struct * c2)
        assert abs(
            hybrid_similarity(a, b, HYBRID) - hybrid_similarity(scaled_a, b, HYBRID)
        ) <= 1e-12


def test_zero_vector_rules():
    zero = gv([0.0] * 9, [0.0, 0.0])
    other = gv(sem9(1.0), [1.0, 2.0])
    assert hybrid_similarity(zero, zero, HYBRID) == 1.0
    assert hybrid_similarity(zero, other, HYBRID) == pytest.approx(0.0, abs=1e-6)


def test_dimension_mismatch_rejected():
    a = gv(sem9(1.0), [1.0, 2.0])
    b = gv(sem9(1.0), [1.0, 2.0, 3.0])
    with pytest.raises(ConfigError):
        hybrid_similarity(a, b, HYBRID)
    with pytest.raises(ConfigError):
        hybrid_similarity(a, gv(None, [1.0, 2.0]), HYBRID)


def test_cosine_only_metric():
    cfg = SimilarityConfig(gamma=5.0, tau=0.9, metric=SimilarityMetric.COSINE_ONLY)
    a = gv(sem9(1.0, 1.0), [1.0, 0.0])
    b = gv(sem9(1.0), [0.0, 1.0])  # far apart structurally
    assert hybrid_similarity(a, b, cfg) == pytest.approx(1.0 / math.sqrt(2.0), abs=1e-12)


def test_structural_only_fallbacks():
    hyb = hybrid_similarity(gv(None, [1.0, 0.0]), gv(None, [0.0, 1.0]), HYBRID)
    assert hyb == pytest.approx(math.exp(-5.0 * 2.0), abs=1e-12)
    cos = SimilarityConfig(metric=SimilarityMetric.COSINE_ONLY)
    assert hybrid_similarity(gv(None, [1.0, 1.0]), gv(None, [2.0, 2.0]), cos) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# clustering

def d(iso):
    return datetime.date.fromisoformat(iso)


def test_union_transitivity():
    tau = 0.9
    phi = math.radians(18)  # cos(18deg)=0.951 >= tau, cos(36deg)=0.809 < tau
    struct = [1.0, 1.0]
    items = [
        ("a" * 64, gv(sem9(1.0, 0.0), struct)),
        ("b" * 64, gv(sem9(math.cos(phi), math.sin(phi)), struct)),
        ("c" * 64, gv(sem9(math.cos(2 * phi), math.sin(2 * phi)), struct)),
    ]
    cfg = SimilarityConfig(gamma=5.0, tau=tau, metric=SimilarityMetric.HYBRID)
    ab = hybrid_similarity(items[0][1], items[1][1], cfg)
    ac = hybrid_similarity(items[0][1], items[2][1], cfg)
    assert ab >= tau > ac
    result = dedup(items, cfg)
    assert sorted(len(c) for c in result.clusters) == [3]


def test_all_below_tau_singletons():
    items = [
        ("a" * 64, gv(sem9(1.0), [1.0, 0.0])),
        ("b" * 64, gv(sem9(0.0, 1.0), [1.0, 0.0])),
        ("c" * 64, gv(sem9(0.0, 0.0, 1.0), [1.0, 0.0])),
    ]
    result = dedup(items, HYBRID)
    assert sorted(len(c) for c in result.clusters) == [1, 1, 1]
    assert result.ledger == []


def test_representative_earliest_then_hash():
    v = gv(sem9(1.0), [1.0, 1.0])
    items = [("c" * 64, v), ("a" * 64, v), ("b" * 64, v)]
    first_seen = {"c" * 64: d("2015-01-01"), "a" * 64: d("2020-01-01"), "b" * 64: d("2015-01-01")}
    result = dedup(items, HYBRID, first_seen)
    rep = result.representatives["a" * 64]
    assert rep == "b" * 64  # 2015 tie, smallest hash wins
    removed = {e.removed_hash for e in result.ledger}
    assert removed == {"a" * 64, "c" * 64}
    for e in result.ledger:
        assert e.representative_hash == "b" * 64
        assert e.similarity == pytest.approx(1.0)


def test_duplicate_hash_rejected():
    v = gv(sem9(1.0), [1.0, 1.0])
    with pytest.raises(ConfigError):
        dedup([("a" * 64, v), ("a" * 64, v)], HYBRID)


def brute_force_partition(items, cfg):
    """Independent oracle: pairwise scoring plus BFS connected components."""
    n = len(items)
    adj = {i: [] for i in range(n)}
    for i in range(n):
        for j in range(i + 1, n):
            if hybrid_similarity(items[i][1], items[j][1], cfg) >= cfg.tau:
                adj[i].append(j)
                adj[j].append(i)
    seen = set()
    parts = []
    for i in range(n):
        if i in seen:
            continue
        comp = []
        queue = [i]
        seen.add(i)
        while queue:
            u = queue.pop()
            comp.append(items[u][0])
            for w in adj[u]:
                if w not in seen:
                    seen.add(w)
                    queue.append(w)
        parts.append(tuple(sorted(comp)))
    return sorted(parts)


def _synthetic_items(n_bases, x86, seed=11):
    from bincorpus.evalharness import MutationSpec, build_ground_truth, sample_group_sizes
    from bincorpus.synth import synthetic_corpus

    rng = random.Random(seed)
    bases = synthetic_corpus(n_bases, seed=seed)
    sizes = sample_group_sizes(max(1, n_bases // 2), rng, mean=4.0, hi=9)
    spec = MutationSpec(seed=seed)
    gt = build_ground_truth(bases, sizes, isolated=n_bases - len(sizes), spec=spec)
    cfg = FeatureConfig()
    feats = [extract_sample(s, x86, cfg) for s in gt.samples]
    return [(f.sha256, f.global_vectors) for f in feats]


@pytest.mark.parametrize("tau", [0.999, 0.9999])
def test_partition_matches_brute_force_oracle(x86, tau):
    items = _synthetic_items(30, x86)
    assert len(items) >= 60
    cfg = SimilarityConfig(gamma=5.0, tau=tau, metric=SimilarityMetric.HYBRID)
    result = dedup(items, cfg)
    ours = sorted(tuple(sorted(c)) for c in result.clusters)
    assert ours == brute_force_partition(items, cfg)


def test_monotonicity_raising_tau_refines():
    rng = np.random.default_rng(5)
    items = []
    base = rng.random(9)
    for i in range(40):
        sem = base + rng.normal(0, 0.002, 9).clip(-0.01, 0.01)
        items.append((f"{i:064x}", gv(np.abs(sem), rng.random(2) + 1.0)))
    lo = dedup(items, SimilarityConfig(tau=0.995, metric=SimilarityMetric.HYBRID))
    hi = dedup(items, SimilarityConfig(tau=0.9999, metric=SimilarityMetric.HYBRID))
    coarse = {h: i for i, c in enumerate(lo.clusters) for h in c}
    for cluster in hi.clusters:
        assert len({coarse[h] for h in cluster}) == 1


def test_calibrate_threshold_prefers_perfect_precision():
    pairs = [(1.0, True)] * 8 + [(0.9995, True)] * 2 + [(0.9995, False)] + [(0.5, False)] * 20
    best, rows = calibrate_threshold(pairs, [0.99, 0.999, 0.9999])
    # 0.999 catches the impure 0.9995 scores; 0.9999 keeps precision 1.0
    assert best == 0.9999
    by_tau = {r.tau: r for r in rows}
    assert by_tau[0.999].fp == 1
    assert by_tau[0.9999].fp == 0
    assert by_tau[0.9999].precision == 1.0


def test_calibrate_threshold_fallback_when_no_perfect():
    pairs = [(0.999, True), (0.999, False), (0.9, True)]
    best, rows = calibrate_threshold(pairs, [0.99, 0.999])
    assert best in (0.99, 0.999)
    assert all(r.precision < 1.0 or r.tp == 0 for r in rows)
