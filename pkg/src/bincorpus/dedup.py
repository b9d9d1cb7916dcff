"""Near-duplicate sample collapse via hybrid similarity and union-find.

The score for a pair of samples multiplies a semantic term (cosine over the
category-weight global vectors) by a structural term (Gaussian kernel over
the distance between L2-normalized structural global vectors). Pairs at or
above the threshold are unioned; connected components become duplicate
clusters and every cluster keeps its earliest-seen member.
"""

from __future__ import annotations

import datetime
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .features import GlobalVectors
from .unionfind import UnionFind


class SimilarityMetric(Enum):
    COSINE_ONLY = "cosine"
    HYBRID = "hybrid"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimilarityConfig:
    gamma: float = 5.0
    tau: float = 0.9999
    metric: SimilarityMetric = SimilarityMetric.HYBRID

    def __post_init__(self):
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        if not (0.0 < self.tau <= 1.0):
            raise ConfigError("tau must be in (0, 1]")


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v / n if n > 0.0 else v


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    # featureless-vs-featureless must score 1 so empty samples still collapse
    if na == 0.0 and nb == 0.0:
        return 1.0
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def structural_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> float:
    d = _unit(a) - _unit(b)
    return math.exp(-gamma * float(np.dot(d, d)))


def hybrid_similarity(a: GlobalVectors, b: GlobalVectors, cfg: SimilarityConfig) -> float:
    """Pairwise sample similarity in [0, 1].

    HYBRID multiplies semantic cosine by the structural kernel; COSINE_ONLY
    returns the semantic cosine alone. Configurations without semantic
    vectors degrade to the structural term (kernel for HYBRID, plain cosine
    for COSINE_ONLY).
    """
    if (a.v_sem is None) != (b.v_sem is None):
        raise ConfigError("samples featurized under different configurations")
    if a.v_struct.shape != b.v_struct.shape:
        raise ConfigError(
            f"structural dimension mismatch: {a.v_struct.shape} vs {b.v_struct.shape}"
        )
    if a.v_sem is not None and a.v_sem.shape != b.v_sem.shape:
        raise ConfigError(f"semantic dimension mismatch: {a.v_sem.shape} vs {b.v_sem.shape}")

    if cfg.metric is SimilarityMetric.COSINE_ONLY:
        if a.v_sem is None:
            return cosine_similarity(a.v_struct, b.v_struct)
        return cosine_similarity(a.v_sem, b.v_sem)

    s2 = structural_kernel(a.v_struct, b.v_struct, cfg.gamma)
    if a.v_sem is None:
        return s2
    return cosine_similarity(a.v_sem, b.v_sem) * s2


@dataclass
class LedgerEntry:
    removed_hash: str
    representative_hash: str
    similarity: float


@dataclass
class DuplicateClusters:
    clusters: list[list[str]]
    representatives: dict[str, str]  # member hash -> its cluster representative
    ledger: list[LedgerEntry] = field(default_factory=list)

    @property
    def removed(self) -> list[str]:
        return [e.removed_hash for e in self.ledger]


def _similarity_matrix(
    sems: np.ndarray | None,
    structs: np.ndarray,
    cfg: SimilarityConfig,
) -> np.ndarray:
    n = structs.shape[0]

    def unit_rows(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        norms = np.linalg.norm(m, axis=1)
        safe = np.where(norms > 0.0, norms, 1.0)
        return m / safe[:, None], norms == 0.0

    s1 = None
    if sems is not None:
        u, zero = unit_rows(sems)
        s1 = u @ u.T
        if zero.any():
            both = np.outer(zero, zero)
            either = np.outer(zero, ~zero) | np.outer(~zero, zero)
            s1[both] = 1.0
            s1[either] = 0.0

    if cfg.metric is SimilarityMetric.COSINE_ONLY:
        if s1 is not None:
            return s1
        u, zero = unit_rows(structs)
        s = u @ u.T
        if zero.any():
            both = np.outer(zero, zero)
            either = np.outer(zero, ~zero) | np.outer(~zero, zero)
            s[both] = 1.0
            s[either] = 0.0
        return s

    u, zero = unit_rows(structs)
    # squared norms are 1 for normalized rows, 0 for all-zero rows
    sq = 1.0 - zero.astype(float)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (u @ u.T)
    np.clip(d2, 0.0, None, out=d2)
    s2 = np.exp(-cfg.gamma * d2)
    return s1 * s2 if s1 is not None else s2


def dedup(
    items: Sequence[tuple[str, GlobalVectors]],
    cfg: SimilarityConfig,
    first_seen: Mapping[str, datetime.date] | None = None,
) -> DuplicateClusters:
    """Exact all-pairs scoring, threshold-graph connected components.

    Representative per cluster: earliest first_seen, ties broken by the
    lexicographically smallest hash; hashes without a known date sort last.
    """
    hashes = [h for h, _ in items]
    if len(set(hashes)) != len(hashes):
        raise ConfigError("duplicate hashes in dedup input; run exact-hash collapse first")

    uf = UnionFind()
    for h in hashes:
        uf.add(h)

    sims = None
    if len(items) > 1:
        dims_sem = {(v.v_sem.shape if v.v_sem is not None else None) for _, v in items}
        dims_st = {v.v_struct.shape for _, v in items}
        if len(dims_sem) > 1 or len(dims_st) > 1:
            raise ConfigError("mixed feature dimensions in dedup input")
        structs = np.stack([v.v_struct for _, v in items])
        sems = None
        if next(iter(dims_sem)) is not None:
            sems = np.stack([v.v_sem for _, v in items])
        sims = _similarity_matrix(sems, structs, cfg)
        ii, jj = np.where(np.triu(sims >= cfg.tau, k=1))
        for i, j in sorted(zip(ii.tolist(), jj.tolist())):
            uf.union(hashes[i], hashes[j])

    def rep_key(h: str):
        if first_seen is not None and h in first_seen:
            return (first_seen[h], h)
        return (datetime.date.max, h)

    idx = {h: i for i, h in enumerate(hashes)}
    clusters: list[list[str]] = []
    representatives: dict[str, str] = {}
    ledger: list[LedgerEntry] = []
    for _, members in sorted(uf.groups().items(), key=lambda kv: kv[1][0]):
        rep = min(members, key=rep_key)
        clusters.append(members)
        for m in members:
            representatives[m] = rep
            if m != rep:
                sim = float(sims[idx[m], idx[rep]]) if sims is not None else 1.0
                ledger.append(LedgerEntry(m, rep, sim))
    return DuplicateClusters(clusters=clusters, representatives=representatives, ledger=ledger)


@dataclass
class ThresholdRow:
    tau: float
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float


def calibrate_threshold(
    scored_pairs: Sequence[tuple[float, bool]],
    taus: Sequence[float],
) -> tuple[float, list[ThresholdRow]]:
    """Pick the threshold maximizing F1 subject to precision = 1.0.

    If no candidate reaches perfect precision, fall back to the best
    (precision, F1) pair. Ties prefer the strictest (largest) threshold.
    """
    rows = []
    for tau in taus:
        tp = sum(1 for s, dup in scored_pairs if s >= tau and dup)
        fp = sum(1 for s, dup in scored_pairs if s >= tau and not dup)
        fn = sum(1 for s, dup in scored_pairs if s < tau and dup)
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        rows.append(ThresholdRow(tau, tp, fp, fn, p, r, f1))
    perfect = [row for row in rows if row.fp == 0 and row.tp > 0]
    pool = perfect if perfect else rows
    best = max(pool, key=lambda row: (row.f1, row.tau) if perfect else (row.precision, row.f1, row.tau))
    return best.tau, rows
