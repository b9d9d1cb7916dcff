"""Interchange data model for disassembly exports.

A sample is one binary's disassembly export: its functions (each a CFG of
basic blocks holding mnemonic-level instructions), the call graph between
functions, and file-level metadata. Records are immutable after
construction and safe to share across workers.
"""

from __future__ import annotations

import datetime
import json
import re
from dataclasses import dataclass

SCHEMA_VERSION = 1

_HEX64 = re.compile(r"^[0-9a-f]{64}$")
_EARLIEST_FIRST_SEEN = datetime.date(1990, 1, 1)


class SchemaError(ValueError):
    """Raised when an export violates the interchange schema.

    ``path`` names the offending field, e.g. ``functions[0].blocks[1].id``.
    """

    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class Instruction:
    mnemonic: str
    operand_count: int = 0

    def __post_init__(self):
        if not self.mnemonic:
            raise SchemaError("mnemonic", "empty mnemonic")
        if any(c.isspace() for c in self.mnemonic):
            raise SchemaError("mnemonic", f"whitespace in mnemonic {self.mnemonic!r}")
        if self.operand_count < 0:
            raise SchemaError("operand_count", "negative operand count")


@dataclass(frozen=True)
class BasicBlock:
    id: int
    instructions: tuple[Instruction, ...]
    loop_depth: int | None = None

    @property
    def n(self) -> int:
        """Instruction count of the block."""
        return len(self.instructions)

    def __post_init__(self):
        if self.id < 0:
            raise SchemaError("blocks.id", f"negative block id {self.id}")


@dataclass(frozen=True)
class ControlFlowGraph:
    blocks: tuple[BasicBlock, ...]
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        seen = set()
        for b in self.blocks:
            if b.id in seen:
                raise SchemaError("blocks.id", f"duplicate block id {b.id}")
            seen.add(b.id)
        for s, d in self.edges:
            if s not in seen or d not in seen:
                raise SchemaError("edges", f"edge ({s},{d}) references missing block")

    def block_by_id(self, block_id: int) -> BasicBlock:
        for b in self.blocks:
            if b.id == block_id:
                return b
        raise KeyError(block_id)

    def out_degrees(self) -> dict[int, int]:
        deg = {b.id: 0 for b in self.blocks}
        for s, _ in self.edges:
            deg[s] += 1
        return deg


@dataclass(frozen=True)
class FunctionRecord:
    function_id: str
    start_address: int
    cfg: ControlFlowGraph

    @property
    def cfg_size(self) -> int:
        return len(self.cfg.blocks)

    def __post_init__(self):
        if not self.function_id:
            raise SchemaError("function_id", "empty function id")
        if self.start_address < 0:
            raise SchemaError("start_address", "negative start address")
        if not self.cfg.blocks:
            raise SchemaError("cfg", f"function {self.function_id} has no blocks")

    def mnemonic_stream(self, limit: int | None = None) -> list[str]:
        """Mnemonics in block-id order, optionally truncated."""
        out: list[str] = []
        for b in sorted(self.cfg.blocks, key=lambda b: b.id):
            for ins in b.instructions:
                out.append(ins.mnemonic)
                if limit is not None and len(out) >= limit:
                    return out
        return out


@dataclass(frozen=True)
class SampleRecord:
    sha256: str
    org_labels: tuple[tuple[str, str], ...]
    first_seen: datetime.date
    file_type: str
    functions: tuple[FunctionRecord, ...]
    fcg_edges: tuple[tuple[str, str], ...]
    packed: bool | None = None

    def __post_init__(self):
        if not _HEX64.match(self.sha256):
            raise SchemaError("sha256", f"malformed sha256 {self.sha256!r}")
        if not (_EARLIEST_FIRST_SEEN <= self.first_seen <= datetime.date.today()):
            raise SchemaError("first_seen", f"date {self.first_seen} out of range")
        fids = set()
        addrs = set()
        for fn in self.functions:
            if fn.function_id in fids:
                raise SchemaError("functions", f"duplicate function_id {fn.function_id!r}")
            if fn.start_address in addrs:
                raise SchemaError(
                    "functions", f"duplicate start_address {fn.start_address:#x}"
                )
            fids.add(fn.function_id)
            addrs.add(fn.start_address)
        for caller, callee in self.fcg_edges:
            if caller not in fids or callee not in fids:
                raise SchemaError(
                    "fcg_edges", f"edge ({caller!r},{callee!r}) references missing function"
                )

    @property
    def primary_org(self) -> str:
        """First organization label, or "unknown" for unlabeled samples."""
        return self.org_labels[0][0] if self.org_labels else "unknown"

    def function_by_id(self, function_id: str) -> FunctionRecord:
        for fn in self.functions:
            if fn.function_id == function_id:
                return fn
        raise KeyError(function_id)


def sample_to_dict(sample: SampleRecord) -> dict:
    """Canonical dict form of a sample, field order fixed for round-tripping."""
    return {
        "schema_version": SCHEMA_VERSION,
        "sha256": sample.sha256,
        "org_labels": [[label, source] for label, source in sample.org_labels],
        "first_seen": sample.first_seen.isoformat(),
        "file_type": sample.file_type,
        "packed": sample.packed,
        "functions": [
            {
                "function_id": fn.function_id,
                "start_address": fn.start_address,
                "cfg_size": fn.cfg_size,
                "blocks": [
                    {
                        "id": b.id,
                        "instructions": [
                            {"mnemonic": ins.mnemonic, "operand_count": ins.operand_count}
                            for ins in b.instructions
                        ],
                    }
                    for b in fn.cfg.blocks
                ],
                "edges": [[s, d] for s, d in fn.cfg.edges],
            }
            for fn in sample.functions
        ],
        "fcg_edges": [[c, d] for c, d in sample.fcg_edges],
    }


def sample_to_json(sample: SampleRecord) -> str:
    return json.dumps(sample_to_dict(sample), separators=(",", ":"))


def _expect(obj: dict, key: str, path: str):
    if key not in obj:
        raise SchemaError(f"{path}.{key}" if path else key, "missing field")
    return obj[key]


def sample_from_dict(obj: dict) -> SampleRecord:
    """Parse and validate one exported sample; raises SchemaError on violation."""
    if not isinstance(obj, dict):
        raise SchemaError("", "sample is not an object")
    version = _expect(obj, "schema_version", "")
    if version != SCHEMA_VERSION:
        raise SchemaError("schema_version", f"unsupported version {version!r}")

    sha = _expect(obj, "sha256", "")
    if not isinstance(sha, str):
        raise SchemaError("sha256", "not a string")
    sha = sha.lower()

    raw_labels = _expect(obj, "org_labels", "")
    labels = []
    for i, pair in enumerate(raw_labels):
        if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
            raise SchemaError(f"org_labels[{i}]", "expected [label, source] pair")
        labels.append((str(pair[0]), str(pair[1])))

    raw_date = _expect(obj, "first_seen", "")
    try:
        first_seen = datetime.date.fromisoformat(raw_date)
    except (TypeError, ValueError):
        raise SchemaError("first_seen", f"not an ISO-8601 date: {raw_date!r}")

    file_type = str(_expect(obj, "file_type", ""))
    packed = obj.get("packed")
    if packed is not None and not isinstance(packed, bool):
        raise SchemaError("packed", "expected boolean or null")

    functions = []
    for i, fobj in enumerate(_expect(obj, "functions", "")):
        fpath = f"functions[{i}]"
        fid = str(_expect(fobj, "function_id", fpath))
        start = _expect(fobj, "start_address", fpath)
        if not isinstance(start, int):
            raise SchemaError(f"{fpath}.start_address", "expected integer")
        blocks = []
        for j, bobj in enumerate(_expect(fobj, "blocks", fpath)):
            bpath = f"{fpath}.blocks[{j}]"
            bid = _expect(bobj, "id", bpath)
            if not isinstance(bid, int):
                raise SchemaError(f"{bpath}.id", "expected integer")
            instructions = []
            for k, iobj in enumerate(_expect(bobj, "instructions", bpath)):
                ipath = f"{bpath}.instructions[{k}]"
                mnem = _expect(iobj, "mnemonic", ipath)
                if not isinstance(mnem, str) or not mnem or any(c.isspace() for c in mnem):
                    raise SchemaError(f"{ipath}.mnemonic", f"malformed mnemonic {mnem!r}")
                opc = iobj.get("operand_count", 0)
                if not isinstance(opc, int) or opc < 0:
                    raise SchemaError(f"{ipath}.operand_count", "expected nonnegative integer")
                # disassembler case conventions vary; fold here once
                instructions.append(Instruction(mnem.lower(), opc))
            try:
                blocks.append(BasicBlock(bid, tuple(instructions)))
            except SchemaError as e:
                raise SchemaError(f"{bpath}.{e.path}", e.message)
        edges = []
        for j, pair in enumerate(_expect(fobj, "edges", fpath)):
            if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
                raise SchemaError(f"{fpath}.edges[{j}]", "expected [src, dst] pair")
            s, d = pair
            if not isinstance(s, int) or not isinstance(d, int):
                raise SchemaError(f"{fpath}.edges[{j}]", "block ids must be integers")
            edges.append((s, d))
        try:
            cfg = ControlFlowGraph(tuple(blocks), tuple(edges))
        except SchemaError as e:
            raise SchemaError(f"{fpath}.{e.path}", e.message)
        declared = _expect(fobj, "cfg_size", fpath)
        if declared != len(blocks):
            raise SchemaError(
                f"{fpath}.cfg_size",
                f"declared {declared} but {len(blocks)} blocks present",
            )
        try:
            functions.append(FunctionRecord(fid, start, cfg))
        except SchemaError as e:
            raise SchemaError(f"{fpath}.{e.path}", e.message)

    fcg = []
    for i, pair in enumerate(_expect(obj, "fcg_edges", "")):
        if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
            raise SchemaError(f"fcg_edges[{i}]", "expected [caller, callee] pair")
        fcg.append((str(pair[0]), str(pair[1])))

    try:
        return SampleRecord(
            sha256=sha,
            org_labels=tuple(labels),
            first_seen=first_seen,
            file_type=file_type,
            functions=tuple(functions),
            fcg_edges=tuple(fcg),
            packed=packed,
        )
    except SchemaError:
        raise
