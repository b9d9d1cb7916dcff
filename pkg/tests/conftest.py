import datetime
import json

import pytest

from bincorpus.model import (
    BasicBlock,
    ControlFlowGraph,
    FunctionRecord,
    Instruction,
    SampleRecord,
)
from bincorpus.taxonomy import builtin_taxonomy

SHA_A = "a" * 64
SHA_B = "b" * 64
SHA_C = "c" * 64


@pytest.fixture(scope="session")
def x86():
    return builtin_taxonomy("x86")


def block(bid, mnemonics):
    return BasicBlock(bid, tuple(Instruction(m) for m in mnemonics))


def function(fid, addr, blocks, edges):
    return FunctionRecord(fid, addr, ControlFlowGraph(tuple(blocks), tuple(edges)))


def make_sample(functions=(), fcg_edges=(), sha=SHA_A, labels=(("APT28", "test"),),
                first_seen=datetime.date(2020, 6, 1), file_type="pe"):
    return SampleRecord(
        sha256=sha,
        org_labels=tuple(labels),
        first_seen=first_seen,
        file_type=file_type,
        functions=tuple(functions),
        fcg_edges=tuple(fcg_edges),
    )


def three_block_function(fid="f0", addr=0x1000):
    """Two blocks on one edge plus an isolated nop block.

    Hand-derived expectations with zero offset: omega=3, X=4/3, Y=2/3,
    W = [1, 1, 1, 0, 0, 0, 0, 0, 0] (mov, add, jmp).
    """
    return function(
        fid,
        addr,
        [block(1, ["mov", "add"]), block(2, ["jmp"]), block(3, ["nop"])],
        [(1, 2)],
    )


@pytest.fixture
def fixture_sample():
    return make_sample(functions=[three_block_function()])


def export_dict(sample: SampleRecord) -> dict:
    from bincorpus.model import sample_to_dict

    return sample_to_dict(sample)


def minimal_export(sha=SHA_A):
    return {
        "schema_version": 1,
        "sha256": sha,
        "org_labels": [["APT28", "test"]],
        "first_seen": "2020-06-01",
        "file_type": "pe",
        "packed": None,
        "functions": [
            {
                "function_id": "f0",
                "start_address": 4096,
                "cfg_size": 1,
                "blocks": [
                    {"id": 0, "instructions": [{"mnemonic": "ret", "operand_count": 0}]}
                ],
                "edges": [],
            }
        ],
        "fcg_edges": [],
    }


def write_jsonl(path, dicts):
    with open(path, "w", encoding="utf-8") as fh:
        for d in dicts:
            fh.write(json.dumps(d, separators=(",", ":")) + "\n")
