"""Per-function feature vectors and sample-level global vectors.

Each function's CFG is summarized into an 11-dimensional vector: two
structural components (instruction-count-weighted averages of block ids and
block out-degrees over the edge set) and nine semantic components (opcode
category occurrence sums along edges). An optional third structural
component aggregates loop depths the same way but is disabled by default:
it buys nothing and loop analysis can be expensive on pathological CFGs.

Node vectors are then propagated over the (undirected) function call graph
for a configurable number of rounds, each node accumulating the element-wise
sum of its neighbors' previous-round vectors. Summing the per-round blocks
over all nodes yields fixed-dimension global vectors per sample, split into
a structural part and a semantic part for the downstream similarity metric.
"""

from __future__ import annotations

import datetime
import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .loopdepth import LoopDepthTimeout, loop_depth_analysis
from .model import FunctionRecord, SampleRecord
from .taxonomy import N_CATEGORIES, TaxonomyTable, block_category_counts

logger = logging.getLogger(__name__)

ASM_SUMMARY_LEN = 64


class Representation(Enum):
    NUMERICAL = "numerical"
    STRING_HASH = "string_hash"


class StructuralMode(Enum):
    XY = "xy"
    XYZ = "xyz"
    CENTROID = "centroid"


@dataclass(frozen=True)
class FeatureConfig:
    c_offset: float = 0.0
    enable_z: bool = False
    enable_opcode_features: bool = True
    cfg_size_weighting: bool = True
    wl_rounds: int = 1
    representation: Representation = Representation.NUMERICAL
    structural_mode: StructuralMode = StructuralMode.XY
    z_timeout_ms: int = 2000

    def __post_init__(self):
        if self.wl_rounds < 0:
            raise ValueError("wl_rounds must be >= 0")
        if self.z_timeout_ms <= 0:
            raise ValueError("z_timeout_ms must be positive")
        if self.structural_mode in (StructuralMode.XYZ, StructuralMode.CENTROID):
            if not self.enable_z:
                raise ValueError(f"{self.structural_mode.value} mode requires enable_z")
        if self.structural_mode is StructuralMode.CENTROID and self.enable_opcode_features:
            raise ValueError("centroid mode is structural-only; disable opcode features")

    @property
    def struct_width(self) -> int:
        return 2 if self.structural_mode is StructuralMode.XY else 3

    @property
    def block_dim(self) -> int:
        return self.struct_width + (N_CATEGORIES if self.enable_opcode_features else 0)


@dataclass(frozen=True)
class OpcodeCfgVector:
    x: float
    y: float
    w: tuple[float, ...]
    omega: float
    z: float | None = None

    def __post_init__(self):
        if len(self.w) != N_CATEGORIES:
            raise ValueError(f"expected {N_CATEGORIES} category weights")


@dataclass
class NodeFeature:
    """Per-round feature blocks for one call-graph node (round 0 = own vector)."""

    blocks: list[np.ndarray]


@dataclass
class GlobalVectors:
    v_struct: np.ndarray
    v_sem: np.ndarray | None = None


def function_opcode_cfg(
    fn: FunctionRecord,
    taxonomy: TaxonomyTable,
    cfg: FeatureConfig,
    loop_depths: dict[int, int] | None = None,
) -> OpcodeCfgVector:
    """Edge-sum feature vector for one function.

    For a CFG with no edges (or whose edges touch only empty blocks, making
    the weight total zero) the single-node limit applies: the entry block's
    id becomes X, Y is 0, and the weights are the entry block's raw category
    counts. The entry block is the first block in export order.
    """
    blocks = fn.cfg.blocks
    by_id = {b.id: b for b in blocks}
    counts = {b.id: block_category_counts(b, taxonomy) for b in blocks}
    deg = fn.cfg.out_degrees()

    omega = 0.0
    sx = 0.0
    sy = 0.0
    sz = 0.0
    w = np.zeros(N_CATEGORIES)
    for s, d in fn.cfg.edges:
        bs, bd = by_id[s], by_id[d]
        omega += bs.n + bd.n
        sx += bs.n * s + bd.n * d
        sy += bs.n * deg[s] + bd.n * deg[d]
        if loop_depths is not None:
            sz += bs.n * loop_depths[s] + bd.n * loop_depths[d]
        w += np.asarray(counts[s], dtype=float) + np.asarray(counts[d], dtype=float)

    if not fn.cfg.edges or omega == 0.0:
        entry = blocks[0]
        z = None
        if cfg.enable_z:
            z = float(loop_depths[entry.id]) if loop_depths is not None else None
        return OpcodeCfgVector(
            x=float(entry.id) + cfg.c_offset,
            y=0.0,
            w=tuple(float(c) for c in counts[entry.id]),
            omega=float(entry.n),
            z=z,
        )

    z = None
    if cfg.enable_z:
        z = sz / omega if loop_depths is not None else None
    return OpcodeCfgVector(
        x=sx / omega + cfg.c_offset,
        y=sy / omega,
        w=tuple(float(v) for v in w),
        omega=omega,
        z=z,
    )


def _node_base_vector(vec: OpcodeCfgVector, cfg: FeatureConfig) -> np.ndarray:
    parts = [vec.x, vec.y]
    if cfg.struct_width == 3:
        if vec.z is None:
            raise ValueError("structural mode needs loop depth but none was computed")
        parts.append(vec.z)
    if cfg.enable_opcode_features:
        parts.extend(vec.w)
    return np.array(parts, dtype=float)


def wl_propagate(
    sample: SampleRecord,
    per_fn: dict[str, OpcodeCfgVector],
    cfg: FeatureConfig,
) -> dict[str, NodeFeature]:
    """Neighborhood sum-aggregation over the call graph.

    Round 0 is each function's own vector (scaled by its block count when
    size weighting is on); round k sums the neighbors' round k-1 vectors.
    Adjacency is undirected and de-duplicated; a self-call keeps a function
    in its own neighborhood.
    """
    missing = [fn.function_id for fn in sample.functions if fn.function_id not in per_fn]
    if missing:
        raise ValueError(f"per-function vectors missing for {missing[:3]}")

    neighbors: dict[str, set[str]] = {fn.function_id: set() for fn in sample.functions}
    for caller, callee in sample.fcg_edges:
        neighbors[caller].add(callee)
        neighbors[callee].add(caller)

    base: dict[str, np.ndarray] = {}
    for fn in sample.functions:
        v = _node_base_vector(per_fn[fn.function_id], cfg)
        if cfg.cfg_size_weighting:
            v = v * fn.cfg_size
        base[fn.function_id] = v

    out = {fid: NodeFeature(blocks=[vec]) for fid, vec in base.items()}
    for k in range(1, cfg.wl_rounds + 1):
        for fid, feat in out.items():
            agg = np.zeros(cfg.block_dim)
            # sorted for run-to-run bit-level determinism of the float sums
            for other in sorted(neighbors[fid]):
                agg = agg + out[other].blocks[k - 1]
            feat.blocks.append(agg)
    return out


def build_global_vectors(
    node_features: dict[str, NodeFeature], cfg: FeatureConfig
) -> GlobalVectors:
    """Sum node blocks per round into fixed-dimension sample vectors."""
    if not node_features:
        raise ValueError("no node features to aggregate")
    sw = cfg.struct_width
    v_struct = np.zeros(sw * (cfg.wl_rounds + 1))
    v_sem = np.zeros(N_CATEGORIES * (cfg.wl_rounds + 1)) if cfg.enable_opcode_features else None
    for fid in sorted(node_features):
        feat = node_features[fid]
        for k, block in enumerate(feat.blocks):
            v_struct[sw * k : sw * (k + 1)] += block[:sw]
            if v_sem is not None:
                v_sem[N_CATEGORIES * k : N_CATEGORIES * (k + 1)] += block[sw:]
    return GlobalVectors(v_struct=v_struct, v_sem=v_sem)


def node_label(feat: NodeFeature) -> str:
    """Discrete label for a node feature: hash of its exact serialized blocks.

    Any bit-level change in any component produces a different label, which
    is precisely the brittleness that motivates the numerical representation.
    """
    canon = "|".join(",".join(repr(float(x)) for x in block) for block in feat.blocks)
    return hashlib.blake2b(canon.encode("ascii"), digest_size=8).hexdigest()


def string_hash_features(node_features: dict[str, NodeFeature], cfg: FeatureConfig) -> dict[str, int]:
    """Label-frequency histogram of the sample (bag of hashed node features)."""
    if cfg.representation is not Representation.STRING_HASH:
        raise ValueError("string-hash features requested under numerical representation")
    return dict(Counter(node_label(f) for f in node_features.values()))


def histogram_cosine(a: dict[str, int], b: dict[str, int]) -> float:
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    dot = sum(c * b[label] for label, c in a.items() if label in b)
    na = sum(c * c for c in a.values()) ** 0.5
    nb = sum(c * c for c in b.values()) ** 0.5
    return dot / (na * nb)


@dataclass
class FunctionFeature:
    """One function's vector plus the metadata downstream clustering reports."""

    function_id: str
    start_address: int
    cfg_size: int
    vector: OpcodeCfgVector
    cfg_blocks: list[tuple[int, int]]  # (block id, instruction count)
    cfg_edges: list[tuple[int, int]]
    asm_summary: list[str]


@dataclass
class SampleFeatures:
    sha256: str
    org: str
    org_labels: list[tuple[str, str]]
    first_seen: datetime.date
    file_type: str
    global_vectors: GlobalVectors | None
    functions: list[FunctionFeature]
    histogram: dict[str, int] | None = None
    z_fallback: bool = False


def extract_sample(
    sample: SampleRecord,
    taxonomy: TaxonomyTable,
    cfg: FeatureConfig,
    precomputed_depths: dict[str, dict[int, int] | None] | None = None,
) -> SampleFeatures:
    """Full per-sample extraction: per-function vectors, propagation, globals.

    Metadata-only samples (no functions: documents, scripts) come back with
    global_vectors=None and are excluded from similarity downstream.

    When loop depth is required but analysis times out for any function, the
    whole sample falls back to the plain (X, Y) structural pair and the
    record is marked, so evaluation can flag partial rows.
    """
    if not sample.functions:
        return SampleFeatures(
            sha256=sample.sha256,
            org=sample.primary_org,
            org_labels=list(sample.org_labels),
            first_seen=sample.first_seen,
            file_type=sample.file_type,
            global_vectors=None,
            functions=[],
        )

    depths: dict[str, dict[int, int] | None] = {}
    z_fallback = False
    effective = cfg
    if cfg.enable_z:
        for fn in sample.functions:
            if precomputed_depths is not None and fn.function_id in precomputed_depths:
                depths[fn.function_id] = precomputed_depths[fn.function_id]
                continue
            try:
                depths[fn.function_id] = loop_depth_analysis(
                    fn.cfg, entry=fn.cfg.blocks[0].id, timeout=cfg.z_timeout_ms / 1000.0
                )
            except LoopDepthTimeout:
                depths[fn.function_id] = None
        if any(d is None for d in depths.values()):
            z_fallback = True
            logger.warning(
                "loop-depth analysis timed out for %s; falling back to XY structural mode",
                sample.sha256[:12],
            )
            effective = replace(cfg, enable_z=False, structural_mode=StructuralMode.XY)

    per_fn: dict[str, OpcodeCfgVector] = {}
    functions: list[FunctionFeature] = []
    for fn in sample.functions:
        vec = function_opcode_cfg(
            fn,
            taxonomy,
            effective,
            loop_depths=depths.get(fn.function_id) if effective.enable_z else None,
        )
        per_fn[fn.function_id] = vec
        functions.append(
            FunctionFeature(
                function_id=fn.function_id,
                start_address=fn.start_address,
                cfg_size=fn.cfg_size,
                vector=vec,
                cfg_blocks=[(b.id, b.n) for b in fn.cfg.blocks],
                cfg_edges=list(fn.cfg.edges),
                asm_summary=fn.mnemonic_stream(limit=ASM_SUMMARY_LEN),
            )
        )

    node_features = wl_propagate(sample, per_fn, effective)
    histogram = None
    if cfg.representation is Representation.STRING_HASH:
        histogram = string_hash_features(node_features, cfg)
    return SampleFeatures(
        sha256=sample.sha256,
        org=sample.primary_org,
        org_labels=list(sample.org_labels),
        first_seen=sample.first_seen,
        file_type=sample.file_type,
        global_vectors=build_global_vectors(node_features, effective),
        functions=functions,
        histogram=histogram,
        z_fallback=z_fallback,
    )


# ---------------------------------------------------------------------------
# features-file round trip

def _features_to_dict(sf: SampleFeatures) -> dict:
    gv = None
    if sf.global_vectors is not None:
        gv = {
            "v_struct": [float(v) for v in sf.global_vectors.v_struct],
            "v_sem": None
            if sf.global_vectors.v_sem is None
            else [float(v) for v in sf.global_vectors.v_sem],
        }
    return {
        "sha256": sf.sha256,
        "org": sf.org,
        "org_labels": [[l, s] for l, s in sf.org_labels],
        "first_seen": sf.first_seen.isoformat(),
        "file_type": sf.file_type,
        "z_fallback": sf.z_fallback,
        "global": gv,
        "histogram": sf.histogram,
        "functions": [
            {
                "function_id": f.function_id,
                "start_address": f.start_address,
                "cfg_size": f.cfg_size,
                "x": f.vector.x,
                "y": f.vector.y,
                "z": f.vector.z,
                "w": list(f.vector.w),
                "omega": f.vector.omega,
                "cfg_blocks": [[i, n] for i, n in f.cfg_blocks],
                "cfg_edges": [[s, d] for s, d in f.cfg_edges],
                "asm_summary": f.asm_summary,
            }
            for f in sf.functions
        ],
    }


def _features_from_dict(obj: dict) -> SampleFeatures:
    gv = None
    if obj.get("global") is not None:
        gv = GlobalVectors(
            v_struct=np.array(obj["global"]["v_struct"], dtype=float),
            v_sem=None
            if obj["global"]["v_sem"] is None
            else np.array(obj["global"]["v_sem"], dtype=float),
        )
    functions = [
        FunctionFeature(
            function_id=f["function_id"],
            start_address=f["start_address"],
            cfg_size=f["cfg_size"],
            vector=OpcodeCfgVector(
                x=f["x"], y=f["y"], w=tuple(f["w"]), omega=f["omega"], z=f["z"]
            ),
            cfg_blocks=[(i, n) for i, n in f["cfg_blocks"]],
            cfg_edges=[(s, d) for s, d in f["cfg_edges"]],
            asm_summary=list(f["asm_summary"]),
        )
        for f in obj["functions"]
    ]
    return SampleFeatures(
        sha256=obj["sha256"],
        org=obj["org"],
        org_labels=[(l, s) for l, s in obj["org_labels"]],
        first_seen=datetime.date.fromisoformat(obj["first_seen"]),
        file_type=obj["file_type"],
        global_vectors=gv,
        functions=functions,
        histogram=obj.get("histogram"),
        z_fallback=obj.get("z_fallback", False),
    )


def write_features(
    path: str | Path,
    records: list[SampleFeatures],
    cfg: FeatureConfig,
    taxonomy_name: str = "x86",
) -> None:
    header = {
        "kind": "features",
        "schema_version": 1,
        "taxonomy": taxonomy_name,
        "config": {
            "c_offset": cfg.c_offset,
            "enable_z": cfg.enable_z,
            "enable_opcode_features": cfg.enable_opcode_features,
            "cfg_size_weighting": cfg.cfg_size_weighting,
            "wl_rounds": cfg.wl_rounds,
            "representation": cfg.representation.value,
            "structural_mode": cfg.structural_mode.value,
            "z_timeout_ms": cfg.z_timeout_ms,
        },
    }
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for rec in records:
            fh.write(json.dumps(_features_to_dict(rec), separators=(",", ":")) + "\n")


def read_features(path: str | Path) -> tuple[list[SampleFeatures], FeatureConfig]:
    with Path(path).open(encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("kind") != "features":
            raise ValueError(f"{path}: not a features file")
        c = header["config"]
        cfg = FeatureConfig(
            c_offset=c["c_offset"],
            enable_z=c["enable_z"],
            enable_opcode_features=c["enable_opcode_features"],
            cfg_size_weighting=c["cfg_size_weighting"],
            wl_rounds=c["wl_rounds"],
            representation=Representation(c["representation"]),
            structural_mode=StructuralMode(c["structural_mode"]),
            z_timeout_ms=c["z_timeout_ms"],
        )
        records = [_features_from_dict(json.loads(line)) for line in fh if line.strip()]
    return records, cfg
