"""Export-file ingestion and exact-hash collapse."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .model import SampleRecord, SchemaError, sample_from_dict


def ingest_export(path: str | Path) -> SampleRecord:
    """Read and validate a single-sample export file (one JSON object)."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError("", f"not valid JSON: {e}") from e
    return sample_from_dict(obj)


def load_corpus(path: str | Path) -> list[SampleRecord]:
    """Load samples from a JSONL file (one sample per line) or a directory
    of per-sample export files."""
    path = Path(path)
    samples: list[SampleRecord] = []
    if path.is_dir():
        for child in sorted(path.iterdir()):
            if child.suffix in (".json", ".jsonl"):
                samples.extend(load_corpus(child))
        return samples
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"{path}:{lineno}", f"not valid JSON: {e}") from e
            try:
                samples.append(sample_from_dict(obj))
            except SchemaError as e:
                raise SchemaError(f"{path}:{lineno}:{e.path}", e.message) from e
    return samples


@dataclass
class CollisionGroup:
    """All records seen for one sha256, with their label provenance."""

    sha256: str
    org_labels: list[tuple[str, str]] = field(default_factory=list)
    record_count: int = 0
    conflicting: bool = False


def exact_hash_dedup(
    samples: list[SampleRecord],
) -> tuple[list[SampleRecord], list[CollisionGroup]]:
    """Collapse byte-identical files (same sha256) to one record each.

    The kept record is the first ingested per hash, carrying the union of
    org labels seen for that hash and the earliest first_seen. Groups with
    two or more distinct label strings are flagged as conflicting. Collision
    groups are only emitted for hashes that actually collided.
    """
    by_hash: dict[str, list[SampleRecord]] = {}
    order: list[str] = []
    for s in samples:
        if s.sha256 not in by_hash:
            by_hash[s.sha256] = []
            order.append(s.sha256)
        by_hash[s.sha256].append(s)

    kept: list[SampleRecord] = []
    groups: list[CollisionGroup] = []
    for sha in order:
        records = by_hash[sha]
        merged_labels: list[tuple[str, str]] = []
        for r in records:
            for pair in r.org_labels:
                if pair not in merged_labels:
                    merged_labels.append(pair)
        first = records[0]
        if len(records) == 1:
            kept.append(first)
            continue
        distinct = {label for label, _ in merged_labels}
        groups.append(
            CollisionGroup(
                sha256=sha,
                org_labels=merged_labels,
                record_count=len(records),
                conflicting=len(distinct) > 1,
            )
        )
        kept.append(
            SampleRecord(
                sha256=first.sha256,
                org_labels=tuple(merged_labels),
                first_seen=min(r.first_seen for r in records),
                file_type=first.file_type,
                functions=first.functions,
                fcg_edges=first.fcg_edges,
                packed=first.packed,
            )
        )
    return kept, groups
