"""Cross-sample function clustering into reuse clusters.

Functions with trivially small CFGs (import thunks, trampolines, thin
wrappers) are filtered first. The rest are clustered by a per-function
hybrid similarity: a Gaussian kernel over the raw (X, Y) structural pair
times the dot product of unit-normalized category-weight vectors. Candidate
pairs come from a top-k index over unit-normalized concatenations and every
candidate is re-scored exactly before union, so approximate retrieval can
only lose recall, never merge wrongly.
"""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .ann import TopKIndex
from .dedup import cosine_similarity
from .features import SampleFeatures
from .model import FunctionRecord
from .unionfind import UnionFind

MIN_CFG_SIZE = 3


def filter_trivial(fns: list[FunctionRecord]) -> list[FunctionRecord]:
    """Drop functions whose CFGs have fewer than three basic blocks."""
    return [fn for fn in fns if fn.cfg_size >= MIN_CFG_SIZE]


@dataclass(frozen=True, order=True)
class FunctionKey:
    sample_sha256: str
    function_id: str
    start_address: int

    def as_string(self) -> str:
        return f"{self.sample_sha256}:{self.function_id}:{self.start_address:#x}"


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v / n if n > 0.0 else v


@dataclass
class FunctionVectors:
    """Raw structural pair plus unit-normalized copies for scoring/indexing."""

    struct: np.ndarray
    sem_unit: np.ndarray
    struct_unit: np.ndarray

    @classmethod
    def from_components(cls, x: float, y: float, w) -> "FunctionVectors":
        struct = np.array([x, y], dtype=float)
        sem = np.asarray(w, dtype=float)
        return cls(struct=struct, sem_unit=_unit(sem), struct_unit=_unit(struct))

    def concat_unit(self) -> np.ndarray:
        return np.concatenate([self.struct_unit, self.sem_unit])


def function_similarity(f: FunctionVectors, g: FunctionVectors, gamma: float = 5.0) -> float:
    d = f.struct - g.struct
    sim_struct = math.exp(-gamma * float(np.dot(d, d)))
    sim_sem = cosine_similarity(f.sem_unit, g.sem_unit)
    return sim_struct * sim_sem


def org_distribution(members: list[tuple[FunctionKey, str]]) -> dict[str, int]:
    return dict(Counter(org for _, org in members))


@dataclass
class FunctionPoint:
    key: FunctionKey
    vectors: FunctionVectors
    org: str
    cfg_size: int
    cfg_blocks: list[tuple[int, int]] = field(default_factory=list)
    cfg_edges: list[tuple[int, int]] = field(default_factory=list)
    asm_summary: list[str] = field(default_factory=list)


def points_from_features(records: list[SampleFeatures]) -> list[FunctionPoint]:
    """Clustering inputs from extracted features, trivial functions removed."""
    points = []
    for rec in records:
        for f in rec.functions:
            if f.cfg_size < MIN_CFG_SIZE:
                continue
            points.append(
                FunctionPoint(
                    key=FunctionKey(rec.sha256, f.function_id, f.start_address),
                    vectors=FunctionVectors.from_components(f.vector.x, f.vector.y, f.vector.w),
                    org=rec.org,
                    cfg_size=f.cfg_size,
                    cfg_blocks=f.cfg_blocks,
                    cfg_edges=f.cfg_edges,
                    asm_summary=f.asm_summary,
                )
            )
    return points


@dataclass(frozen=True)
class ANNConfig:
    k: int = 64
    max_rounds: int = 10


@dataclass
class FunctionReuseCluster:
    cluster_id: str
    size: int
    org_distribution: dict[str, int]
    representative: FunctionPoint
    members: list[FunctionKey]
    cross_org: bool


@dataclass
class ClusteringResult:
    clusters: list[FunctionReuseCluster]
    union_edges: list[tuple[FunctionKey, FunctionKey, float]]
    rounds: int


def _cluster_id(members: list[FunctionKey]) -> str:
    canon = "\n".join(sorted(k.as_string() for k in members))
    return hashlib.sha256(canon.encode("ascii")).hexdigest()[:16]


def cluster_functions(
    points: list[FunctionPoint],
    tau: float = 0.999,
    gamma: float = 5.0,
    ann: ANNConfig = ANNConfig(),
) -> ClusteringResult:
    """Iterative search-and-prune clustering.

    Each round queries a freshly built index with the active point set,
    re-scores candidate pairs exactly, and unions pairs at or above tau.
    Settled clusters then shed all but one delegate from the active set.
    Stops when a round unions nothing or after max_rounds.
    """
    n = len(points)
    uf = UnionFind()
    for i in range(n):
        uf.add(i)
    union_edges: list[tuple[FunctionKey, FunctionKey, float]] = []

    if n < 2:
        clusters = _emit_clusters(points, uf)
        return ClusteringResult(clusters, union_edges, rounds=0)

    all_vecs = np.stack([p.vectors.concat_unit() for p in points])
    active = list(range(n))
    rounds = 0
    for _ in range(ann.max_rounds):
        if len(active) < 2:
            break
        rounds += 1
        sub = all_vecs[active]
        index = TopKIndex(sub)
        k_eff = min(ann.k + 1, len(active))  # +1: each query retrieves itself
        hits = index.query(sub, k_eff)

        pairs = set()
        for qi, row in enumerate(hits):
            gi = active[qi]
            for local in row:
                if local < 0:
                    continue
                gj = active[int(local)]
                if gi == gj:
                    continue
                pairs.add((gi, gj) if gi < gj else (gj, gi))

        merged_any = False
        for i, j in sorted(pairs):
            sim = function_similarity(points[i].vectors, points[j].vectors, gamma)
            if sim >= tau:
                if uf.union(i, j):
                    merged_any = True
                union_edges.append((points[i].key, points[j].key, sim))
        if not merged_any:
            break

        # prune settled clusters down to one delegate each
        members_by_root: dict[int, list[int]] = {}
        for i in active:
            members_by_root.setdefault(uf.find(i), []).append(i)
        active = sorted(
            min(members, key=lambda i: points[i].key)
            for members in members_by_root.values()
        )

    clusters = _emit_clusters(points, uf)
    return ClusteringResult(clusters, union_edges, rounds=rounds)


def _emit_clusters(points: list[FunctionPoint], uf: UnionFind) -> list[FunctionReuseCluster]:
    clusters = []
    for _, members in sorted(uf.groups().items(), key=lambda kv: min(kv[1])):
        keys = sorted(points[i].key for i in members)
        dist = org_distribution([(points[i].key, points[i].org) for i in members])
        # representative: largest CFG, ties to smallest (sample hash, start address)
        best_size = max(points[i].cfg_size for i in members)
        rep = min(
            (points[i] for i in members if points[i].cfg_size == best_size),
            key=lambda p: (p.key.sample_sha256, p.key.start_address),
        )
        clusters.append(
            FunctionReuseCluster(
                cluster_id=_cluster_id(keys),
                size=len(members),
                org_distribution=dist,
                representative=rep,
                members=keys,
                cross_org=len(dist) >= 2,
            )
        )
    return clusters


def verify_union_edges(
    result: ClusteringResult,
    points: list[FunctionPoint],
    tau: float,
    gamma: float = 5.0,
) -> list[tuple[FunctionKey, FunctionKey, float]]:
    """Re-score every union edge exactly; returns edges violating tau (none
    expected: candidate generation cannot introduce false merges)."""
    by_key = {p.key: p for p in points}
    bad = []
    for a, b, _ in result.union_edges:
        sim = function_similarity(by_key[a].vectors, by_key[b].vectors, gamma)
        if sim < tau:
            bad.append((a, b, sim))
    return bad
