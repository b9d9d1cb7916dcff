"""Mutation-based ground truth and the ablation matrix runner.

Ground-truth duplicate groups are built by applying functionality-preserving
mutations to base exports: register renames and constant edits change only
the bytes a real binary would carry (so only hash provenance here), nop
padding injects ignorable instructions, block reordering permutes block ids
with consistent edge relabeling, and helper refactoring splits one
low-degree block. Pairwise duplicate labels are same-group membership;
singleton groups contribute only negatives.

The runner re-extracts features per configuration row, scores all pairs,
and reports precision/recall/F1 across a threshold sweep.
"""

from __future__ import annotations

import csv
import logging
import random
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import sparse

from .dedup import SimilarityConfig, SimilarityMetric, _similarity_matrix
from .features import (
    FeatureConfig,
    Representation,
    StructuralMode,
    extract_sample,
)
from .loopdepth import LoopDepthTimeout, loop_depth_analysis
from .model import (
    BasicBlock,
    ControlFlowGraph,
    FunctionRecord,
    Instruction,
    SampleRecord,
)
from .synth import content_sha256
from .taxonomy import TaxonomyTable

logger = logging.getLogger(__name__)


class MutationOperator(Enum):
    REGISTER_RENAME = "register_rename"
    NOP_PAD = "nop_pad"
    BLOCK_REORDER = "block_reorder"
    CONSTANT_EDIT = "constant_edit"
    HELPER_REFACTOR = "helper_refactor"


DEFAULT_RATES = {
    MutationOperator.REGISTER_RENAME: 1.0,
    MutationOperator.CONSTANT_EDIT: 1.0,
    MutationOperator.NOP_PAD: 0.5,
    MutationOperator.BLOCK_REORDER: 0.3,
    MutationOperator.HELPER_REFACTOR: 0.2,
}


@dataclass(frozen=True)
class MutationSpec:
    """Operators with per-operator firing rates in [0, 1].

    A rate is the probability the operator fires on a given mutant; fired
    operators apply a minimal fixed-size edit, keeping mutants functionally
    equivalent by construction.
    """

    rates: dict[MutationOperator, float] = field(default_factory=lambda: dict(DEFAULT_RATES))
    seed: int = 0

    def __post_init__(self):
        for op, rate in self.rates.items():
            if not (0.0 <= rate <= 1.0):
                raise ValueError(f"rate for {op.value} must be in [0, 1]")


def _permute_block_ids(fn: FunctionRecord, rng: random.Random) -> FunctionRecord:
    ids = [b.id for b in fn.cfg.blocks]
    if len(ids) < 2:
        return fn
    perm = ids[:]
    while perm == ids:
        rng.shuffle(perm)
    mapping = dict(zip(ids, perm))
    blocks = tuple(
        BasicBlock(mapping[b.id], b.instructions, b.loop_depth) for b in fn.cfg.blocks
    )
    edges = tuple((mapping[s], mapping[d]) for s, d in fn.cfg.edges)
    return FunctionRecord(fn.function_id, fn.start_address, ControlFlowGraph(blocks, edges))


def _insert_nop(fn: FunctionRecord, rng: random.Random) -> FunctionRecord:
    blocks = list(fn.cfg.blocks)
    bi = rng.randrange(len(blocks))
    target = blocks[bi]
    pos = rng.randint(0, target.n)
    instructions = list(target.instructions)
    instructions.insert(pos, Instruction("nop", 0))
    blocks[bi] = BasicBlock(target.id, tuple(instructions), target.loop_depth)
    return FunctionRecord(fn.function_id, fn.start_address, ControlFlowGraph(tuple(blocks), fn.cfg.edges))


def _edit_operand_metadata(fn: FunctionRecord, rng: random.Random) -> FunctionRecord:
    """Rewrite one instruction's operand count; features never read it."""
    candidates = [b for b in fn.cfg.blocks if b.n > 0]
    if not candidates:
        return fn
    blocks = list(fn.cfg.blocks)
    target = rng.choice(candidates)
    instructions = list(target.instructions)
    i = rng.randrange(len(instructions))
    ins = instructions[i]
    instructions[i] = Instruction(ins.mnemonic, (ins.operand_count + 1) % 4)
    blocks[blocks.index(target)] = BasicBlock(target.id, tuple(instructions), target.loop_depth)
    return FunctionRecord(fn.function_id, fn.start_address, ControlFlowGraph(tuple(blocks), fn.cfg.edges))


def _split_block(fn: FunctionRecord, rng: random.Random) -> FunctionRecord | None:
    deg = fn.cfg.out_degrees()
    candidates = [b for b in fn.cfg.blocks if b.n >= 2 and deg[b.id] <= 1]
    if not candidates:
        return None
    target = rng.choice(candidates)
    new_id = max(b.id for b in fn.cfg.blocks) + 1
    cut = target.n // 2
    first = BasicBlock(target.id, target.instructions[:cut])
    second = BasicBlock(new_id, target.instructions[cut:])
    blocks = []
    for b in fn.cfg.blocks:
        if b.id == target.id:
            blocks.append(first)
            blocks.append(second)
        else:
            blocks.append(b)
    edges = [(s, d) for s, d in fn.cfg.edges if s != target.id]
    edges.extend((new_id, d) for s, d in fn.cfg.edges if s == target.id)
    edges.append((target.id, new_id))
    return FunctionRecord(
        fn.function_id, fn.start_address, ControlFlowGraph(tuple(blocks), tuple(sorted(set(edges))))
    )


def mutate(sample: SampleRecord, spec: MutationSpec, nonce: int = 0) -> SampleRecord:
    """One functionality-preserving mutant of a sample.

    The mutant's sha256 is re-derived from the mutated content plus a
    mutation nonce, so hashes always differ from the base even when the
    fired operators (register renames, constant edits) leave the export
    payload itself unchanged.
    """
    if not sample.functions:
        raise ValueError("cannot mutate a metadata-only sample")
    rng = random.Random(f"{spec.seed}:{sample.sha256}:{nonce}")
    fired = [op for op in MutationOperator if rng.random() < spec.rates.get(op, 0.0)]

    functions = list(sample.functions)

    if MutationOperator.CONSTANT_EDIT in fired:
        fi = rng.randrange(len(functions))
        functions[fi] = _edit_operand_metadata(functions[fi], rng)

    if MutationOperator.NOP_PAD in fired:
        total_blocks = sum(fn.cfg_size for fn in functions)
        for _ in range(max(1, total_blocks // 50)):
            fi = rng.randrange(len(functions))
            functions[fi] = _insert_nop(functions[fi], rng)

    if MutationOperator.BLOCK_REORDER in fired:
        eligible = [i for i, fn in enumerate(functions) if fn.cfg_size >= 2]
        if eligible:
            fi = rng.choice(eligible)
            functions[fi] = _permute_block_ids(functions[fi], rng)
        else:
            logger.info("%s: no block-reorder site, operator skipped", sample.sha256[:12])

    if MutationOperator.HELPER_REFACTOR in fired:
        done = False
        non_entry = list(range(1, len(functions)))
        rng.shuffle(non_entry)
        for fi in non_entry:
            split = _split_block(functions[fi], rng)
            if split is not None:
                functions[fi] = split
                done = True
                break
        if not done:
            logger.info("%s: no helper-refactor site, operator skipped", sample.sha256[:12])

    functions = tuple(functions)
    ops_tag = ",".join(op.value for op in fired)
    sha = content_sha256(
        functions, sample.fcg_edges, salt=f"mutant:{sample.sha256}:{spec.seed}:{nonce}:{ops_tag}"
    )
    return SampleRecord(
        sha256=sha,
        org_labels=sample.org_labels,
        first_seen=sample.first_seen,
        file_type=sample.file_type,
        functions=functions,
        fcg_edges=sample.fcg_edges,
        packed=sample.packed,
    )


@dataclass
class GroundTruthCorpus:
    samples: list[SampleRecord]
    group_of: dict[str, int]

    def positive_pairs(self) -> int:
        sizes: dict[int, int] = {}
        for g in self.group_of.values():
            sizes[g] = sizes.get(g, 0) + 1
        return sum(s * (s - 1) // 2 for s in sizes.values())


def sample_group_sizes(
    n_groups: int, rng: random.Random, mean: float = 8.06, lo: int = 2, hi: int = 69
) -> list[int]:
    """Group sizes from a shifted geometric matched to the target mean."""
    p = 1.0 / (mean - lo + 1.0)
    sizes = []
    for _ in range(n_groups):
        u = rng.random()
        k = int(np.floor(np.log(1.0 - u) / np.log(1.0 - p)))
        sizes.append(min(lo + k, hi))
    return sizes


def build_ground_truth(
    bases: list[SampleRecord],
    group_sizes: list[int],
    isolated: int,
    spec: MutationSpec,
) -> GroundTruthCorpus:
    """Duplicate groups (base plus mutants) plus isolated singletons."""
    if len(bases) < len(group_sizes) + isolated:
        raise ValueError(
            f"need {len(group_sizes) + isolated} bases, got {len(bases)}"
        )
    if any(s < 2 for s in group_sizes):
        raise ValueError("duplicate groups need size >= 2")
    samples: list[SampleRecord] = []
    group_of: dict[str, int] = {}
    gid = 0
    for size in group_sizes:
        base = bases[gid]
        members = [base] + [mutate(base, spec, nonce=j) for j in range(1, size)]
        for m in members:
            samples.append(m)
            group_of[m.sha256] = gid
        gid += 1
    for i in range(isolated):
        base = bases[len(group_sizes) + i]
        samples.append(base)
        group_of[base.sha256] = gid
        gid += 1
    return GroundTruthCorpus(samples=samples, group_of=group_of)


# ---------------------------------------------------------------------------
# ablation matrix

@dataclass(frozen=True)
class AblationConfig:
    id: str
    features: FeatureConfig
    metric: SimilarityMetric


def _fc(rep: Representation, struct: StructuralMode, opcode: bool, weight: bool) -> FeatureConfig:
    return FeatureConfig(
        enable_z=struct is not StructuralMode.XY,
        enable_opcode_features=opcode,
        cfg_size_weighting=weight,
        wl_rounds=1,
        representation=rep,
        structural_mode=struct,
    )


_S = Representation.STRING_HASH
_N = Representation.NUMERICAL
_XY = StructuralMode.XY
_XYZ = StructuralMode.XYZ
_CEN = StructuralMode.CENTROID
_COS = SimilarityMetric.COSINE_ONLY
_HYB = SimilarityMetric.HYBRID

ABLATION_MATRIX: dict[str, AblationConfig] = {
    cfg.id: cfg
    for cfg in [
        AblationConfig("B1", _fc(_S, _CEN, False, False), _COS),
        AblationConfig("B2", _fc(_S, _XY, False, False), _COS),
        AblationConfig("B3", _fc(_S, _XYZ, False, False), _COS),
        AblationConfig("N1", _fc(_N, _CEN, False, False), _COS),
        AblationConfig("N2", _fc(_N, _XY, False, False), _COS),
        AblationConfig("N3", _fc(_N, _XYZ, False, False), _COS),
        AblationConfig("O1", _fc(_S, _XY, True, False), _COS),
        AblationConfig("O2", _fc(_S, _XYZ, True, False), _COS),
        AblationConfig("O3", _fc(_N, _XY, True, False), _COS),
        AblationConfig("O4", _fc(_N, _XYZ, True, False), _COS),
        AblationConfig("W1", _fc(_N, _CEN, False, True), _COS),
        AblationConfig("W2", _fc(_N, _XY, True, True), _COS),
        AblationConfig("W3", _fc(_N, _XYZ, True, True), _COS),
        AblationConfig("H1", _fc(_N, _XY, True, False), _HYB),
        AblationConfig("H2", _fc(_N, _XYZ, True, False), _HYB),
        AblationConfig("H3", _fc(_N, _XY, True, True), _HYB),
        AblationConfig("H4", _fc(_N, _XYZ, True, True), _HYB),
    ]
}

DEFAULT_THRESHOLDS = (0.99, 0.999, 0.9999, 0.99999, 0.999999)


@dataclass
class ThresholdMetrics:
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


@dataclass
class EvalMetrics:
    config_id: str
    rows: list[ThresholdMetrics]
    partial: bool
    wall_ms: float

    @property
    def best(self) -> ThresholdMetrics:
        return max(self.rows, key=lambda r: (r.f1, r.threshold))

    @property
    def best_f1_threshold(self) -> float:
        return self.best.threshold

    def at(self, threshold: float) -> ThresholdMetrics:
        for row in self.rows:
            if row.threshold == threshold:
                return row
        raise KeyError(threshold)


def _histogram_matrix(histograms: list[dict[str, int]]) -> sparse.csr_matrix:
    labels: dict[str, int] = {}
    rows, cols, vals = [], [], []
    for i, hist in enumerate(histograms):
        for label, count in hist.items():
            j = labels.setdefault(label, len(labels))
            rows.append(i)
            cols.append(j)
            vals.append(float(count))
    return sparse.csr_matrix(
        (vals, (rows, cols)), shape=(len(histograms), max(len(labels), 1))
    )


def _string_similarity_matrix(histograms: list[dict[str, int]]) -> np.ndarray:
    m = _histogram_matrix(histograms)
    norms = np.sqrt(m.multiply(m).sum(axis=1)).A1
    safe = np.where(norms > 0, norms, 1.0)
    unit = sparse.diags(1.0 / safe) @ m
    sims = (unit @ unit.T).toarray()
    zero = norms == 0
    if zero.any():
        sims[np.outer(zero, zero)] = 1.0
        sims[np.outer(zero, ~zero) | np.outer(~zero, zero)] = 0.0
    return sims


def precompute_loop_depths(
    samples: list[SampleRecord], timeout_s: float = 2.0
) -> dict[str, dict[str, dict[int, int] | None]]:
    """Loop depths per sample/function, shared across configuration rows."""
    out: dict[str, dict[str, dict[int, int] | None]] = {}
    for s in samples:
        per_fn: dict[str, dict[int, int] | None] = {}
        for fn in s.functions:
            try:
                per_fn[fn.function_id] = loop_depth_analysis(
                    fn.cfg, entry=fn.cfg.blocks[0].id, timeout=timeout_s
                )
            except LoopDepthTimeout:
                per_fn[fn.function_id] = None
        out[s.sha256] = per_fn
    return out


def run_ablation(
    corpus: GroundTruthCorpus,
    configs: list[AblationConfig],
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS,
    taxonomy: TaxonomyTable | None = None,
    gamma: float = 5.0,
    z_timeout_s: float = 2.0,
) -> list[EvalMetrics]:
    from .taxonomy import builtin_taxonomy

    taxonomy = taxonomy or builtin_taxonomy("x86")
    samples = corpus.samples
    n = len(samples)
    groups = np.array([corpus.group_of[s.sha256] for s in samples])
    duplicate = groups[:, None] == groups[None, :]
    iu = np.triu_indices(n, k=1)
    labels_flat = duplicate[iu]
    total_pairs = n * (n - 1) // 2

    depths = None
    if any(c.features.enable_z for c in configs):
        depths = precompute_loop_depths(samples, timeout_s=z_timeout_s)

    results = []
    for cfg in configs:
        t0 = time.monotonic()
        feats = [
            extract_sample(
                s,
                taxonomy,
                cfg.features,
                precomputed_depths=depths[s.sha256] if depths is not None else None,
            )
            for s in samples
        ]
        partial = any(f.z_fallback for f in feats)
        if cfg.features.representation is Representation.STRING_HASH:
            sims = _string_similarity_matrix([f.histogram for f in feats])
        else:
            sems = None
            if cfg.features.enable_opcode_features:
                sems = np.stack([f.global_vectors.v_sem for f in feats])
            structs = np.stack([f.global_vectors.v_struct for f in feats])
            sims = _similarity_matrix(
                sems, structs, SimilarityConfig(gamma=gamma, tau=1.0, metric=cfg.metric)
            )
        sims_flat = sims[iu]
        rows = []
        for t in thresholds:
            pred = sims_flat >= t
            tp = int(np.sum(pred & labels_flat))
            fp = int(np.sum(pred & ~labels_flat))
            fn_ = int(np.sum(~pred & labels_flat))
            tn = total_pairs - tp - fp - fn_
            rows.append(ThresholdMetrics(t, tp, fp, tn, fn_))
        wall_ms = (time.monotonic() - t0) * 1000.0
        results.append(EvalMetrics(config_id=cfg.id, rows=rows, partial=partial, wall_ms=wall_ms))
    return results


def write_ablation_csv(path: str | Path, results: list[EvalMetrics]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["config_id", "threshold", "tp", "fp", "tn", "fn",
             "precision", "recall", "f1", "wall_ms"]
        )
        for res in results:
            for row in res.rows:
                writer.writerow(
                    [
                        res.config_id,
                        f"{row.threshold:g}",
                        row.tp,
                        row.fp,
                        row.tn,
                        row.fn,
                        f"{row.precision:.6f}",
                        f"{row.recall:.6f}",
                        f"{row.f1:.6f}",
                        f"{res.wall_ms:.1f}",
                    ]
                )
