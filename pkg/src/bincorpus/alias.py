"""Threat-actor alias knowledge base and name normalization.

Arbitrary actor names are matched against a curated knowledge base using
edit-distance and token-sort similarity over aggressively preprocessed
strings. Scores at or above 0.95 are accepted automatically, scores in
[0.80, 0.95) go to an analyst review queue, anything lower is a non-match.
Entries whose alias sets overlap strongly (Jaccard) are merged, with source
authority weights deciding the surviving canonical name.
"""

from __future__ import annotations

import datetime
import json
import re
import unicodedata
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

DEFAULT_MODIFIERS = frozenset({"team", "group", "gang", "crew", "unit"})
ACCEPT_THRESHOLD = 0.95
REVIEW_THRESHOLD = 0.80
DEFAULT_AUTHORITY = 0.5

_SPACE_RUN = re.compile(r"\s+")


@dataclass(frozen=True)
class PreprocessRules:
    modifiers: frozenset[str] = DEFAULT_MODIFIERS
    expansions: dict[str, str] = field(default_factory=dict)


def preprocess(name: str, rules: PreprocessRules | None = None) -> str:
    """Normalize a raw actor name for matching.

    Case-folds, applies Unicode compatibility normalization, maps
    punctuation/symbols to spaces, collapses whitespace, expands configured
    abbreviations, and strips non-specific modifier words. May return ""
    (the no-match sentinel) when nothing specific survives.
    """
    rules = rules or PreprocessRules()
    text = unicodedata.normalize("NFKC", name).casefold()
    chars = []
    for c in text:
        cat = unicodedata.category(c)
        chars.append(" " if cat.startswith(("P", "S")) else c)
    text = _SPACE_RUN.sub(" ", "".join(chars)).strip()
    tokens = []
    for tok in text.split():
        tok = rules.expansions.get(tok, tok)
        # expansion output can itself be multi-token
        for piece in tok.split():
            if piece not in rules.modifiers:
                tokens.append(piece)
    return " ".join(tokens)


def levenshtein_distance(a: str, b: str) -> int:
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def levenshtein_ratio(a: str, b: str) -> float:
    """Normalized edit similarity: 1 - d / max(len); 1.0 for two empties."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein_distance(a, b) / longest


def token_sort_ratio(a: str, b: str) -> float:
    """Edit similarity after sorting whitespace-separated tokens."""
    sa = " ".join(sorted(a.split()))
    sb = " ".join(sorted(b.split()))
    return levenshtein_ratio(sa, sb)


class MatchStatus(Enum):
    ACCEPT = "accept"
    REVIEW = "review"
    NO_MATCH = "no_match"


def status_for_score(score: float) -> MatchStatus:
    if score >= ACCEPT_THRESHOLD:
        return MatchStatus.ACCEPT
    if score >= REVIEW_THRESHOLD:
        return MatchStatus.REVIEW
    return MatchStatus.NO_MATCH


@dataclass(frozen=True)
class AliasEntry:
    canonical_name: str
    aliases: frozenset[str]
    sources: frozenset[tuple[str, float]]
    last_updated: datetime.date

    def __post_init__(self):
        if not self.aliases:
            raise ValueError("entry needs at least one alias")
        if self.canonical_name not in self.aliases:
            object.__setattr__(self, "aliases", self.aliases | {self.canonical_name})
        for _, weight in self.sources:
            if not (0.0 <= weight <= 1.0):
                raise ValueError("authority weights must be in [0, 1]")

    @property
    def authority(self) -> float:
        return sum(w for _, w in self.sources)

    @property
    def max_authority(self) -> float:
        return max((w for _, w in self.sources), default=0.0)


@dataclass
class MatchResult:
    status: MatchStatus
    score: float
    entry: AliasEntry | None = None
    matched_alias: str | None = None


class KnowledgeBase:
    """Immutable snapshot of alias entries; matching reads are thread-safe.

    Raw collected entries may share aliases (that is what merge_entities
    cleans up); pass strict=True to reject a snapshot that still has
    cross-entry overlaps, e.g. after a merge pass.
    """

    def __init__(
        self,
        entries: list[AliasEntry],
        rules: PreprocessRules | None = None,
        strict: bool = False,
    ):
        self.rules = rules or PreprocessRules()
        self.entries = list(entries)
        if strict:
            overlaps = self.alias_overlaps()
            if overlaps:
                a, owners = next(iter(sorted(overlaps.items())))
                raise ValueError(f"alias {a!r} claimed by both {owners[0]!r} and {owners[1]!r}")
        # preprocessed alias cache: entry index -> [(clean, raw), ...]
        self._clean: list[list[tuple[str, str]]] = [
            sorted({(preprocess(a, self.rules), a) for a in e.aliases})
            for e in self.entries
        ]

    def alias_overlaps(self) -> dict[str, list[str]]:
        """Aliases claimed by more than one entry, with their claimants."""
        claims: dict[str, list[str]] = {}
        for e in self.entries:
            for a in e.aliases:
                claims.setdefault(a, []).append(e.canonical_name)
        return {a: sorted(owners) for a, owners in claims.items() if len(set(owners)) > 1}

    def match(self, name: str) -> MatchResult:
        """Best-entry match for a raw name.

        Score is the max over all aliases of max(edit ratio, token-sort
        ratio) on preprocessed strings. Ties across entries break to the
        higher summed source authority, then the lexicographically smaller
        canonical name.
        """
        query = preprocess(name, self.rules)
        if not query:
            return MatchResult(MatchStatus.NO_MATCH, 0.0)
        best: tuple[float, float, str] | None = None
        best_entry = None
        best_alias = None
        for entry, aliases in zip(self.entries, self._clean):
            for clean, raw in aliases:
                if not clean:
                    continue
                score = max(levenshtein_ratio(query, clean), token_sort_ratio(query, clean))
                key = (score, entry.authority, entry.canonical_name)
                if (
                    best is None
                    or score > best[0]
                    or (score == best[0] and entry.authority > best[1])
                    or (
                        score == best[0]
                        and entry.authority == best[1]
                        and entry.canonical_name < best[2]
                    )
                ):
                    best = key
                    best_entry = entry
                    best_alias = raw
        if best is None:
            return MatchResult(MatchStatus.NO_MATCH, 0.0)
        score = best[0]
        status = status_for_score(score)
        if status is MatchStatus.NO_MATCH:
            return MatchResult(status, score)
        return MatchResult(status, score, entry=best_entry, matched_alias=best_alias)


def match(name: str, kb: KnowledgeBase) -> MatchResult:
    return kb.match(name)


# ---------------------------------------------------------------------------
# entity merging

HIGH_AUTHORITY_FLOOR = 0.8


@dataclass
class MergeConflict:
    canonical_a: str
    canonical_b: str
    jaccard: float
    reason: str


def jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def _merge_pair(a: AliasEntry, b: AliasEntry) -> AliasEntry:
    if a.authority > b.authority:
        canonical = a.canonical_name
    elif b.authority > a.authority:
        canonical = b.canonical_name
    else:
        canonical = min(a.canonical_name, b.canonical_name)
    return AliasEntry(
        canonical_name=canonical,
        aliases=a.aliases | b.aliases,
        sources=a.sources | b.sources,
        last_updated=max(a.last_updated, b.last_updated),
    )


def merge_entities(
    kb: KnowledgeBase, jaccard_threshold: float = 0.5
) -> tuple[KnowledgeBase, list[MergeConflict]]:
    """Merge entries with alias-set Jaccard >= threshold, to fixpoint.

    The merged entry keeps the canonical name backed by the higher summed
    source authority (lexicographic on exact ties). A tie between two
    high-authority claims (both entries carry a source at or above
    HIGH_AUTHORITY_FLOOR) with different canonical names is not resolvable
    mechanically: the pair goes to the conflict list untouched.
    """
    if not (0.0 < jaccard_threshold <= 1.0):
        raise ValueError("jaccard threshold must be in (0, 1]")
    entries = list(kb.entries)
    conflicts: list[MergeConflict] = []
    blocked: set[tuple[str, str]] = set()

    while True:
        best = None  # (jaccard, name_a, name_b, i, j)
        for i in range(len(entries)):
            for j in range(i + 1, len(entries)):
                a, b = entries[i], entries[j]
                pair_key = tuple(sorted((a.canonical_name, b.canonical_name)))
                if pair_key in blocked:
                    continue
                jac = jaccard(a.aliases, b.aliases)
                if jac < jaccard_threshold:
                    continue
                cand = (-jac, pair_key[0], pair_key[1], i, j)
                if best is None or cand < best:
                    best = cand
        if best is None:
            break
        _, _, _, i, j = best
        a, b = entries[i], entries[j]
        jac = jaccard(a.aliases, b.aliases)
        ambiguous = (
            a.canonical_name != b.canonical_name
            and abs(a.authority - b.authority) < 1e-9
            and a.max_authority >= HIGH_AUTHORITY_FLOOR
            and b.max_authority >= HIGH_AUTHORITY_FLOOR
        )
        if ambiguous:
            conflicts.append(
                MergeConflict(
                    canonical_a=min(a.canonical_name, b.canonical_name),
                    canonical_b=max(a.canonical_name, b.canonical_name),
                    jaccard=jac,
                    reason="equal high-authority canonical claims",
                )
            )
            blocked.add(tuple(sorted((a.canonical_name, b.canonical_name))))
            continue
        merged = _merge_pair(a, b)
        entries = [e for idx, e in enumerate(entries) if idx not in (i, j)]
        entries.append(merged)

    entries, residual = _resolve_contested_aliases(entries)
    conflicts.extend(residual)
    return KnowledgeBase(entries, kb.rules), conflicts


def _resolve_contested_aliases(
    entries: list[AliasEntry],
) -> tuple[list[AliasEntry], list[MergeConflict]]:
    """Assign each alias still claimed by several below-threshold entries to
    a single owner: the entry whose canonical name it is, else the highest
    summed authority, ties to the lexicographically smaller canonical. Two
    entries using the same string as their canonical cannot be resolved
    mechanically and are escalated instead."""
    claims: dict[str, list[int]] = {}
    for i, e in enumerate(entries):
        for a in e.aliases:
            claims.setdefault(a, []).append(i)
    drop: dict[int, set[str]] = {}
    conflicts = []
    for alias_name, owners in sorted(claims.items()):
        if len(owners) < 2:
            continue
        canonical_owners = [i for i in owners if entries[i].canonical_name == alias_name]
        if len(canonical_owners) > 1:
            names = sorted(entries[i].canonical_name for i in canonical_owners)
            conflicts.append(
                MergeConflict(names[0], names[1], 0.0, reason="shared canonical name")
            )
            continue
        if canonical_owners:
            winner = canonical_owners[0]
        else:
            winner = min(owners, key=lambda i: (-entries[i].authority, entries[i].canonical_name))
        for i in owners:
            if i != winner:
                drop.setdefault(i, set()).add(alias_name)
    if drop:
        entries = [
            e
            if i not in drop
            else AliasEntry(
                canonical_name=e.canonical_name,
                aliases=frozenset(e.aliases - drop[i]),
                sources=e.sources,
                last_updated=e.last_updated,
            )
            for i, e in enumerate(entries)
        ]
    return entries, conflicts


# ---------------------------------------------------------------------------
# corpus relabeling

@dataclass
class ReviewItem:
    sha256: str
    label: str
    candidate: str
    score: float


@dataclass
class NormalizationReport:
    accepted: int = 0
    review: int = 0
    no_match: int = 0
    unified_label_groups: int = 0


def normalize_labels(samples, kb: KnowledgeBase):
    """Replace accepted org labels with canonical names.

    Review-band labels are left untouched and queued for an analyst;
    non-matches are left untouched and counted. Returns (relabeled samples,
    review queue, report). Running the result through again is a no-op:
    canonical names hit their own entry exactly.
    """
    relabeled = []
    queue: list[ReviewItem] = []
    report = NormalizationReport()
    absorbed: dict[str, set[str]] = {}
    cache: dict[str, MatchResult] = {}
    for sample in samples:
        new_labels = []
        for label, source in sample.org_labels:
            res = cache.get(label)
            if res is None:
                res = kb.match(label)
                cache[label] = res
            if res.status is MatchStatus.ACCEPT:
                report.accepted += 1
                canonical = res.entry.canonical_name
                absorbed.setdefault(canonical, set()).add(label)
                new_labels.append((canonical, source))
            elif res.status is MatchStatus.REVIEW:
                report.review += 1
                queue.append(ReviewItem(sample.sha256, label, res.entry.canonical_name, res.score))
                new_labels.append((label, source))
            else:
                report.no_match += 1
                new_labels.append((label, source))
        relabeled.append(replace(sample, org_labels=tuple(new_labels)))
    report.unified_label_groups = sum(1 for raws in absorbed.values() if len(raws) >= 2)
    return relabeled, queue, report


# ---------------------------------------------------------------------------
# persistence

def load_kb(path: str | Path, rules: PreprocessRules | None = None) -> KnowledgeBase:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    entries = []
    for e in obj["entries"]:
        sources = frozenset(
            (str(name), float(weight) if weight is not None else DEFAULT_AUTHORITY)
            for name, weight in (
                pair if isinstance(pair, (list, tuple)) else (pair, None)
                for pair in e.get("sources", [])
            )
        )
        entries.append(
            AliasEntry(
                canonical_name=e["canonical_name"],
                aliases=frozenset(e["aliases"]),
                sources=sources,
                last_updated=datetime.date.fromisoformat(e["last_updated"]),
            )
        )
    file_rules = rules
    if file_rules is None and "preprocess" in obj:
        p = obj["preprocess"]
        file_rules = PreprocessRules(
            modifiers=frozenset(p.get("modifiers", DEFAULT_MODIFIERS)),
            expansions=dict(p.get("expansions", {})),
        )
    return KnowledgeBase(entries, file_rules)


def save_kb(kb: KnowledgeBase, path: str | Path) -> None:
    obj = {
        "schema_version": 1,
        "preprocess": {
            "modifiers": sorted(kb.rules.modifiers),
            "expansions": dict(sorted(kb.rules.expansions.items())),
        },
        "entries": [
            {
                "canonical_name": e.canonical_name,
                "aliases": sorted(e.aliases),
                "sources": [[n, w] for n, w in sorted(e.sources)],
                "last_updated": e.last_updated.isoformat(),
            }
            for e in sorted(kb.entries, key=lambda e: e.canonical_name)
        ],
    }
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
