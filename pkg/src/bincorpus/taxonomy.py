"""Mnemonic-to-category classification.

Nine semantic categories partition all opcodes; unknown mnemonics fall to a
configurable default so the mapping is total. Classification is
mnemonic-only: operand-dependent distinctions (e.g. whether an arithmetic
instruction touches memory) are out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

from .model import BasicBlock


class OpcodeCategory(Enum):
    # ordinal order is load-bearing: it fixes the layout of the 9 weight slots
    MEM_ACCESS = 0
    ARITHMETIC_LOGIC = 1
    CONTROL_FLOW = 2
    LOAD_CONSTANT = 3
    OBJECT_ORIENTED = 4
    TYPE_CONVERSION = 5
    STACK_OPS = 6
    METADATA_REFLECTION = 7
    OTHER_IGNORE = 8


N_CATEGORIES = len(OpcodeCategory)


@dataclass(frozen=True)
class TaxonomyTable:
    """Immutable mnemonic -> category mapping, total via default_category."""

    mapping: dict[str, OpcodeCategory]
    default_category: OpcodeCategory = OpcodeCategory.OTHER_IGNORE
    name: str = "custom"

    def __post_init__(self):
        for mnem in self.mapping:
            if mnem != mnem.lower():
                raise ValueError(f"taxonomy keys must be lowercase: {mnem!r}")


def classify(mnemonic: str, table: TaxonomyTable) -> OpcodeCategory:
    return table.mapping.get(mnemonic, table.default_category)


def block_category_counts(block: BasicBlock, table: TaxonomyTable) -> list[int]:
    """Per-category instruction counts for one block; sums to block.n."""
    counts = [0] * N_CATEGORIES
    for ins in block.instructions:
        counts[classify(ins.mnemonic, table).value] += 1
    return counts


def parse_taxonomy(text: str, name: str = "custom") -> TaxonomyTable:
    """Parse a taxonomy config: lines of ``CATEGORY: mnem mnem ...``.

    A category may repeat across lines; ``default: CATEGORY`` sets the
    fallback for unknown mnemonics. ``#`` starts a comment.
    """
    mapping: dict[str, OpcodeCategory] = {}
    default = OpcodeCategory.OTHER_IGNORE
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ValueError(f"taxonomy line {lineno}: expected 'CATEGORY: mnemonics'")
        key, _, rest = line.partition(":")
        key = key.strip()
        mnemonics = rest.split()
        if key == "default":
            if len(mnemonics) != 1:
                raise ValueError(f"taxonomy line {lineno}: default takes one category")
            default = OpcodeCategory[mnemonics[0]]
            continue
        try:
            category = OpcodeCategory[key]
        except KeyError:
            raise ValueError(f"taxonomy line {lineno}: unknown category {key!r}")
        for mnem in mnemonics:
            low = mnem.lower()
            if low in mapping and mapping[low] is not category:
                raise ValueError(
                    f"taxonomy line {lineno}: {low!r} already mapped to {mapping[low].name}"
                )
            mapping[low] = category
    return TaxonomyTable(mapping=mapping, default_category=default, name=name)


def load_taxonomy(path: str | Path) -> TaxonomyTable:
    p = Path(path)
    return parse_taxonomy(p.read_text(encoding="utf-8"), name=p.stem)


def builtin_taxonomy(name: str = "x86") -> TaxonomyTable:
    """Load a bundled table: "x86" (native) or "managed" (bytecode-style)."""
    ref = resources.files("bincorpus.data").joinpath(f"{name}.taxonomy")
    return parse_taxonomy(ref.read_text(encoding="utf-8"), name=name)
