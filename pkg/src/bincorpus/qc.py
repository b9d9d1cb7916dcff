"""Dataset quality-control statistics.

Label-consensus via the Gini concentration test, diversity metrics
(normalized Shannon entropy and Herfindahl-Hirschman index), tiered
stratified sampling plans, exact binomial confidence intervals, and
chance-corrected inter-rater agreement.
"""

from __future__ import annotations

import datetime
import math
import random
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from scipy.stats import beta as _beta

UNKNOWN = "unknown"

GINI_DEFAULT_THRESHOLD = 0.2


def gini(counts: Mapping[str, int]) -> float:
    total = sum(counts.values())
    if total <= 0:
        raise ValueError("label group needs at least one count")
    return 1.0 - sum((c / total) ** 2 for c in counts.values())


@dataclass(frozen=True)
class LabelGroup:
    key: str
    counts: dict[str, int]

    def __post_init__(self):
        if not self.counts or any(c < 1 for c in self.counts.values()):
            raise ValueError("label counts must be positive")


def gini_consensus(group: LabelGroup, threshold: float = GINI_DEFAULT_THRESHOLD) -> str:
    """Majority label when concentration passes the Gini test, else UNKNOWN.

    A majority tie also resolves to UNKNOWN: there is no majority to keep.
    """
    g = gini(group.counts)
    if g > threshold:
        return UNKNOWN
    top = max(group.counts.values())
    winners = [label for label, c in group.counts.items() if c == top]
    return winners[0] if len(winners) == 1 else UNKNOWN


def diversity(dist: Mapping[str, int]) -> tuple[float, float]:
    """(normalized entropy, HHI) of a categorical count distribution.

    Zero-count categories are ignored; a single-category distribution is
    (0, 1) by definition.
    """
    counts = [c for c in dist.values() if c > 0]
    if not counts:
        raise ValueError("diversity needs at least one positive count")
    total = sum(counts)
    ps = [c / total for c in counts]
    hhi = sum(p * p for p in ps)
    k = len(ps)
    if k == 1:
        return 0.0, hhi
    h = -sum(p * math.log(p) for p in ps)
    return h / math.log(k), hhi


# ---------------------------------------------------------------------------
# stratified sampling

# (upper size bound, sampling rate, minimum draw); None bound = open tier
_TIERS = [
    (5, 1.0, 0),
    (20, 0.5, 5),
    (100, 0.3, 10),
    (500, 0.15, 30),
    (None, 0.08, 75),
]
_TOP_TIER_CAP = 120

ERA_BOUNDARIES = (datetime.date(2015, 1, 1), datetime.date(2020, 1, 1))
ERAS = ("pre2015", "2015-2019", "2020plus")


def era_of(first_seen: datetime.date) -> str:
    if first_seen < ERA_BOUNDARIES[0]:
        return ERAS[0]
    if first_seen < ERA_BOUNDARIES[1]:
        return ERAS[1]
    return ERAS[2]


def tier_allocation(size: int) -> int:
    if size < 1:
        raise ValueError("organization size must be positive")
    for bound, rate, floor in _TIERS:
        if bound is None or size <= bound:
            n = int(size * rate + 0.5)
            n = max(n, floor)
            if bound is None:
                n = min(n, _TOP_TIER_CAP)
            return min(n, size)
    raise AssertionError("unreachable")


@dataclass
class SamplingPlan:
    allocations: dict[str, int]
    seed: int
    tier_notes: dict[str, str] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.allocations.values())


def sampling_plan(org_sizes: Mapping[str, int], seed: int) -> SamplingPlan:
    """Tiered allocation per organization; the seed fixes later draws."""
    allocations = {}
    notes = {}
    for org in sorted(org_sizes):
        size = org_sizes[org]
        n = tier_allocation(size)
        allocations[org] = n
        notes[org] = f"{size}->{n}"
    return SamplingPlan(allocations=allocations, seed=seed, tier_notes=notes)


def stratified_draw(
    members: Mapping[str, Sequence[tuple[str, datetime.date]]],
    plan: SamplingPlan,
) -> dict[str, list[str]]:
    """Draw each organization's allocation, stratified by first-seen era.

    Era quotas are proportional (largest-remainder rounding); draws are
    seeded per organization so the result is reproducible and insensitive
    to org iteration order.
    """
    out: dict[str, list[str]] = {}
    for org, alloc in plan.allocations.items():
        pool = sorted(members.get(org, ()), key=lambda t: (t[1], t[0]))
        if len(pool) < alloc:
            raise ValueError(f"{org}: allocation {alloc} exceeds {len(pool)} members")
        by_era: dict[str, list[str]] = {e: [] for e in ERAS}
        for ident, seen in pool:
            by_era[era_of(seen)].append(ident)
        total = len(pool)
        quotas = {}
        remainders = []
        assigned = 0
        for e in ERAS:
            exact = alloc * len(by_era[e]) / total
            quotas[e] = int(exact)
            assigned += quotas[e]
            remainders.append((-(exact - int(exact)), e))
        for _, e in sorted(remainders):
            if assigned >= alloc:
                break
            if quotas[e] < len(by_era[e]):
                quotas[e] += 1
                assigned += 1
        # era exhaustion can leave a shortfall; top up wherever room remains
        while assigned < alloc:
            for e in ERAS:
                if assigned >= alloc:
                    break
                if quotas[e] < len(by_era[e]):
                    quotas[e] += 1
                    assigned += 1
        rng = random.Random(f"{plan.seed}:{org}")
        chosen = []
        for e in ERAS:
            take = min(quotas[e], len(by_era[e]))
            chosen.extend(rng.sample(by_era[e], take))
        out[org] = sorted(chosen)
    return out


# ---------------------------------------------------------------------------
# exact binomial interval

@dataclass
class AccuracyReport:
    n: int
    s: int
    point: float
    ci_low: float
    ci_high: float
    confidence: float


def clopper_pearson(s: int, n: int, confidence: float = 0.95) -> AccuracyReport:
    """Exact binomial confidence interval via Beta quantiles."""
    if n < 1 or not (0 <= s <= n):
        raise ValueError(f"invalid successes/trials: {s}/{n}")
    if not (0.0 < confidence < 1.0):
        raise ValueError("confidence must be in (0, 1)")
    alpha = 1.0 - confidence
    low = 0.0 if s == 0 else float(_beta.ppf(alpha / 2, s, n - s + 1))
    high = 1.0 if s == n else float(_beta.ppf(1 - alpha / 2, s + 1, n - s))
    return AccuracyReport(n=n, s=s, point=s / n, ci_low=low, ci_high=high, confidence=confidence)


# ---------------------------------------------------------------------------
# inter-rater agreement

def cohen_kappa(table: Sequence[Sequence[int]]) -> float:
    """Chance-corrected agreement for a two-rater contingency matrix."""
    k = len(table)
    if any(len(row) != k for row in table):
        raise ValueError("contingency matrix must be square")
    total = sum(sum(row) for row in table)
    if total <= 0:
        raise ValueError("empty contingency matrix")
    po = sum(table[i][i] for i in range(k)) / total
    rows = [sum(row) for row in table]
    cols = [sum(table[i][j] for i in range(k)) for j in range(k)]
    pe = sum(rows[i] * cols[i] for i in range(k)) / (total * total)
    if pe >= 1.0:
        return 1.0  # single used category: total agreement by definition
    return (po - pe) / (1.0 - pe)


def fleiss_kappa(ratings: Sequence[Sequence[int]]) -> float:
    """Multi-rater agreement over an items x categories count matrix."""
    if not ratings:
        raise ValueError("no rating rows")
    n_raters = sum(ratings[0])
    if n_raters < 2:
        raise ValueError("need at least two ratings per item")
    for row in ratings:
        if sum(row) != n_raters:
            raise ValueError("every item needs the same number of ratings")
    n_items = len(ratings)
    n_cats = len(ratings[0])
    p_cat = [
        sum(row[j] for row in ratings) / (n_items * n_raters) for j in range(n_cats)
    ]
    p_items = [
        (sum(c * c for c in row) - n_raters) / (n_raters * (n_raters - 1))
        for row in ratings
    ]
    p_bar = sum(p_items) / n_items
    pe = sum(p * p for p in p_cat)
    if pe >= 1.0:
        return 1.0
    return (p_bar - pe) / (1.0 - pe)
