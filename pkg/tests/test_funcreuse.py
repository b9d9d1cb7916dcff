import math

import numpy as np
import pytest

from bincorpus.ann import TopKIndex
from bincorpus.features import FeatureConfig, extract_sample
from bincorpus.funcreuse import (
    ANNConfig,
    FunctionKey,
    FunctionPoint,
    FunctionVectors,
    cluster_functions,
    filter_trivial,
    function_similarity,
    org_distribution,
    points_from_features,
    verify_union_edges,
)

from conftest import block, function, make_sample


def fv(x, y, w):
    return FunctionVectors.from_components(x, y, w)


def sem(*head):
    v = [0.0] * 9
    for i, val in enumerate(head):
        v[i] = val
    return v


def key(i, sha="a"):
    return FunctionKey(sha * 64, f"f{i}", 0x1000 + i)


def point(i, vectors, org="org-a", cfg_size=3, sha="a"):
    return FunctionPoint(key=key(i, sha), vectors=vectors, org=org, cfg_size=cfg_size)


# ---------------------------------------------------------------------------
# trivial filter

def test_filter_trivial_boundary():
    two = function("f2", 0x10, [block(0, ["mov"]), block(1, ["ret"])], [(0, 1)])
    three = function(
        "f3", 0x20, [block(0, ["mov"]), block(1, ["jmp"]), block(2, ["ret"])], [(0, 1), (1, 2)]
    )
    kept = filter_trivial([two, three])
    assert [f.function_id for f in kept] == ["f3"]
    assert filter_trivial([]) == []


# ---------------------------------------------------------------------------
# similarity

def test_identity_similarity():
    f = fv(1.5, 2.5, sem(1.0, 2.0))
    assert function_similarity(f, f) == pytest.approx(1.0, abs=1e-12)


def test_orthogonal_sem_zero_similarity():
    f = fv(1.0, 2.0, sem(1.0))
    g = fv(1.0, 2.0, sem(0.0, 1.0))
    assert function_similarity(f, g) == pytest.approx(0.0, abs=1e-15)


def test_struct_distance_hand_value():
    # distance 0.1 at gamma 5 -> exp(-0.05)
    f = fv(1.0, 0.0, sem(1.0))
    g = fv(1.0, 0.1, sem(1.0))
    assert function_similarity(f, g, gamma=5.0) == pytest.approx(math.exp(-0.05), abs=1e-12)
    assert math.exp(-0.05) == pytest.approx(0.9512, abs=1e-4)


def test_normalized_copies_unit_norm():
    f = fv(3.0, 4.0, sem(2.0, 0.0, 1.0))
    assert np.linalg.norm(f.struct_unit) == pytest.approx(1.0, abs=1e-12)
    assert np.linalg.norm(f.sem_unit) == pytest.approx(1.0, abs=1e-12)
    assert np.array_equal(f.struct, [3.0, 4.0])
    zero = fv(0.0, 0.0, [0.0] * 9)
    assert np.all(zero.struct_unit == 0.0) and np.all(zero.sem_unit == 0.0)


def test_org_distribution_counts():
    members = [(key(0), "A"), (key(1), "A"), (key(2), "B")]
    assert org_distribution(members) == {"A": 2, "B": 1}
    assert org_distribution([(key(0), "A")]) == {"A": 1}


# ---------------------------------------------------------------------------
# top-k index

def test_topk_exact_and_deterministic():
    rng = np.random.default_rng(1)
    vecs = rng.random((50, 8))
    vecs /= np.linalg.norm(vecs, axis=1)[:, None]
    index = TopKIndex(vecs)
    hits = index.query(vecs, k=5)
    scores = vecs @ vecs.T
    for i, row in enumerate(hits):
        expect = np.argsort(-scores[i], kind="stable")[:5]
        got_scores = scores[i, row]
        want_scores = scores[i, expect]
        assert np.allclose(np.sort(got_scores), np.sort(want_scores))
    assert np.array_equal(hits, index.query(vecs, k=5))


def test_topk_pads_when_small():
    index = TopKIndex(np.eye(3))
    hits = index.query(np.eye(3), k=5)
    assert hits.shape == (3, 5)
    assert (hits[:, 3:] == -1).all()


# ---------------------------------------------------------------------------
# clustering

def test_identical_functions_cross_sample_cluster():
    f = fv(5.0, 2.0, sem(3.0, 1.0))
    pts = [
        point(0, f, org="org-a", sha="a"),
        FunctionPoint(key=FunctionKey("b" * 64, "g0", 0x2000), vectors=f, org="org-b", cfg_size=4),
    ]
    result = cluster_functions(pts, tau=0.999)
    assert len(result.clusters) == 1
    c = result.clusters[0]
    assert c.size == 2
    assert c.org_distribution == {"org-a": 1, "org-b": 1}
    assert c.cross_org
    assert c.representative.cfg_size == 4  # largest CFG wins


def test_single_org_never_cross():
    f = fv(5.0, 2.0, sem(3.0, 1.0))
    pts = [point(i, f, org="org-a") for i in range(4)]
    for i, p in enumerate(pts):
        p.key = FunctionKey("a" * 64, f"f{i}", 0x1000 + i)
    result = cluster_functions(pts, tau=0.999)
    assert all(not c.cross_org for c in result.clusters)


def test_representative_tie_break():
    f = fv(5.0, 2.0, sem(3.0, 1.0))
    p1 = FunctionPoint(key=FunctionKey("b" * 64, "f", 0x10), vectors=f, org="x", cfg_size=5)
    p2 = FunctionPoint(key=FunctionKey("a" * 64, "f", 0x20), vectors=f, org="x", cfg_size=5)
    p3 = FunctionPoint(key=FunctionKey("a" * 64, "f", 0x08), vectors=f, org="x", cfg_size=5)
    result = cluster_functions([p1, p2, p3], tau=0.999)
    rep = result.clusters[0].representative
    assert (rep.key.sample_sha256, rep.key.start_address) == ("a" * 64, 0x08)


def test_cluster_id_stable_under_order():
    f = fv(5.0, 2.0, sem(3.0, 1.0))
    pts = [point(i, f) for i in range(3)]
    ids1 = {c.cluster_id for c in cluster_functions(pts, tau=0.999).clusters}
    ids2 = {c.cluster_id for c in cluster_functions(list(reversed(pts)), tau=0.999).clusters}
    assert ids1 == ids2


def brute_force_function_partition(points, tau, gamma=5.0):
    n = len(points)
    adj = {i: [] for i in range(n)}
    for i in range(n):
        for j in range(i + 1, n):
            if function_similarity(points[i].vectors, points[j].vectors, gamma) >= tau:
                adj[i].append(j)
                adj[j].append(i)
    seen, parts = set(), []
    for i in range(n):
        if i in seen:
            continue
        comp, queue = [], [i]
        seen.add(i)
        while queue:
            u = queue.pop()
            comp.append(points[u].key)
            queue.extend(w for w in adj[u] if w not in seen and not seen.add(w))
        parts.append(tuple(sorted(comp)))
    return sorted(parts)


def _corpus_points(x86, n_bases=12, seed=23):
    from bincorpus.evalharness import MutationSpec, build_ground_truth
    from bincorpus.synth import synthetic_corpus

    bases = synthetic_corpus(n_bases, seed=seed, min_functions=3, max_functions=8)
    spec = MutationSpec(seed=seed)
    gt = build_ground_truth(bases, [3] * (n_bases // 2), isolated=n_bases // 2, spec=spec)
    cfg = FeatureConfig()
    feats = [extract_sample(s, x86, cfg) for s in gt.samples]
    return points_from_features(feats)


def test_exhaustive_matches_brute_force(x86):
    points = _corpus_points(x86)
    assert 50 <= len(points) <= 200
    result = cluster_functions(points, tau=0.999, ann=ANNConfig(k=len(points), max_rounds=10))
    ours = sorted(tuple(c.members) for c in result.clusters)
    assert ours == brute_force_function_partition(points, tau=0.999)


def test_small_k_is_refinement_with_no_false_merges(x86):
    points = _corpus_points(x86, n_bases=14, seed=29)
    result = cluster_functions(points, tau=0.999, ann=ANNConfig(k=4, max_rounds=10))
    assert verify_union_edges(result, points, tau=0.999) == []
    oracle = brute_force_function_partition(points, tau=0.999)
    oracle_of = {k: i for i, part in enumerate(oracle) for k in part}
    for c in result.clusters:
        assert len({oracle_of[k] for k in c.members}) == 1


def test_cluster_sizes_sum_and_invariants(x86):
    points = _corpus_points(x86, n_bases=10, seed=31)
    result = cluster_functions(points, tau=0.999)
    assert sum(c.size for c in result.clusters) == len(points)
    for c in result.clusters:
        assert c.size == sum(c.org_distribution.values())
        assert c.representative.key in c.members


def test_points_from_features_filters_trivial(x86):
    fns = [
        function("big", 0x10, [block(0, ["mov"]), block(1, ["jmp"]), block(2, ["ret"])],
                 [(0, 1), (1, 2)]),
        function("tiny", 0x20, [block(0, ["ret"])], []),
    ]
    feats = extract_sample(make_sample(functions=fns), x86, FeatureConfig())
    points = points_from_features([feats])
    assert [p.key.function_id for p in points] == ["big"]
    assert points[0].cfg_size == 3
